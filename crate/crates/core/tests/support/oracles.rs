//! Independent reference implementations used as test oracles. Shared by the
//! core integration tests and the acceptance harness.
#![allow(dead_code)]

use orbit_core::analysis::PerfPoint;
use orbit_core::model::{window, Beam, Example, Head, ModelConfig, ModelView, TokenId, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fraction of positions whose IEEE sign bits differ.
pub fn naive_sd(a: &[f32], b: &[f32]) -> f64 {
    let differ = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x.is_sign_negative() != y.is_sign_negative())
        .count();
    differ as f64 / a.len() as f64
}

/// O(n^2) dominance filter.
pub fn brute_pareto(points: &[PerfPoint]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            !points.iter().any(|q| {
                let p = &points[i];
                q.text >= p.text
                    && q.retrieval >= p.retrieval
                    && (q.text > p.text || q.retrieval > p.retrieval)
            })
        })
        .collect()
}

/// Smallest k at which `theta0` takes the sign of `init` under repeated
/// halving toward `init`, iterated in f64.
pub fn brute_flip(theta0: f64, init: f64) -> u32 {
    let mut t = theta0;
    let mut k = 0;
    while t.is_sign_negative() != init.is_sign_negative() {
        t = 0.5 * t + 0.5 * init;
        k += 1;
    }
    k
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Every length-`length` continuation over `partition`, scored by summing
/// per-step log-softmax, sorted by descending score then token order.
pub fn exhaustive_beams(
    view: &ModelView,
    prompt: &[TokenId],
    partition: Head,
    length: usize,
) -> Vec<Beam> {
    let vocab = view.config().vocab;
    let (offset, size) = match partition {
        Head::Text => (0, vocab.text_size()),
        Head::Sid => (vocab.text_size(), vocab.sid_size),
        Head::Joint => unreachable!("decoding is per partition"),
    };
    let mut out = Vec::new();
    let total = (size as usize).pow(length as u32);
    for code in 0..total {
        let mut rest = code;
        let mut tokens = vec![0; length];
        for slot in tokens.iter_mut().rev() {
            *slot = offset + (rest % size as usize) as TokenId;
            rest /= size as usize;
        }
        let mut seq = prompt.to_vec();
        let mut log_prob = 0.0;
        for &t in &tokens {
            let ctx = window(&seq, view.config().context);
            let lp = log_softmax(&view.logits(&ctx, partition).unwrap());
            log_prob += lp[(t - offset) as usize];
            seq.push(t);
        }
        out.push(Beam { tokens, log_prob });
    }
    out.sort_by(Beam::ranking);
    out
}

/// The tiny model of the gradient check.
pub fn tiny_config() -> ModelConfig {
    ModelConfig::new(2, 3, 4, Vocab::new(0, 5))
}

/// Random parameters and a random mixed-head batch for `config`.
pub fn random_problem(config: ModelConfig, seed: u64, batch: usize) -> (Vec<f64>, Vec<Example>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.param_count();
    let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let text = config.vocab.text_size();
    let total = config.vocab.total();
    let examples = (0..batch)
        .map(|_| {
            let context: Vec<TokenId> = (0..config.context)
                .map(|_| rng.random_range(0..total))
                .collect();
            let (head, target) = match rng.random_range(0..3) {
                0 => (Head::Text, rng.random_range(0..text)),
                1 => (Head::Sid, rng.random_range(text..total)),
                _ => (Head::Joint, rng.random_range(0..total)),
            };
            Example {
                context,
                target,
                head,
            }
        })
        .collect();
    (values, examples)
}

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates skipped because some ReLU changes state within +-h.
    pub kinks: usize,
}

/// Hidden pre-activations recomputed from the group table: embedding rows in
/// token order, then a `(C*E) x H` row-major hidden matrix and its bias.
pub fn pre_activations(config: ModelConfig, values: &[f64], context: &[TokenId]) -> Vec<f64> {
    let (e, h) = (config.embed_dim, config.hidden_dim);
    let specs = config.group_specs();
    let offset = |name: &str| {
        let mut off = 0;
        for g in &specs {
            if g.name == name {
                return off;
            }
            off += g.len;
        }
        panic!("no group {name}")
    };
    let (emb, w, b) = (offset("embed_text"), offset("hidden_w"), offset("hidden_b"));
    let mut a = values[b..b + h].to_vec();
    for (pos, &tok) in context.iter().enumerate() {
        for d in 0..e {
            let x = values[emb + tok as usize * e + d];
            let row = w + (pos * e + d) * h;
            for j in 0..h {
                a[j] += x * values[row + j];
            }
        }
    }
    a
}

fn relu_pattern(config: ModelConfig, values: &[f64], batch: &[Example]) -> Vec<bool> {
    batch
        .iter()
        .flat_map(|ex| pre_activations(config, values, &ex.context))
        .map(|a| a > 0.0)
        .collect()
}

/// Relative error `|a - n| / max(|a| + |n|, 1e-6)` of the analytic gradient
/// against central differences with step `h`.
pub fn grad_check(config: ModelConfig, seed: u64, h: f64) -> GradCheck {
    let (values, batch) = random_problem(config, seed, 6);
    let view = ModelView::from_values(config, values.clone());
    let (_, grad) = view.loss_and_grad(&batch).unwrap();
    let mut out = GradCheck {
        max_rel: 0.0,
        checked: 0,
        kinks: 0,
    };
    for i in 0..values.len() {
        let shifted = |delta: f64| {
            let mut v = values.clone();
            v[i] += delta;
            v
        };
        let (up, down) = (shifted(h), shifted(-h));
        if relu_pattern(config, &up, &batch) != relu_pattern(config, &down, &batch) {
            out.kinks += 1;
            continue;
        }
        let lu = ModelView::from_values(config, up).loss(&batch).unwrap();
        let ld = ModelView::from_values(config, down).loss(&batch).unwrap();
        let numeric = (lu - ld) / (2.0 * h);
        let rel = (grad[i] - numeric).abs() / (grad[i].abs() + numeric.abs()).max(1e-6);
        out.max_rel = out.max_rel.max(rel);
        out.checked += 1;
    }
    out
}

/// Recall@K and NDCG@K straight from a list of 1-based ranks.
pub fn metrics_from_ranks(ranks: &[Option<usize>], k: usize) -> (f64, f64) {
    let n = ranks.len() as f64;
    let recall = ranks
        .iter()
        .filter(|r| matches!(r, Some(r) if *r <= k))
        .count() as f64
        / n;
    let ndcg = ranks
        .iter()
        .map(|r| match r {
            Some(r) if *r <= k => 1.0 / ((*r as f64) + 1.0).log2(),
            _ => 0.0,
        })
        .sum::<f64>()
        / n;
    (recall, ndcg)
}
