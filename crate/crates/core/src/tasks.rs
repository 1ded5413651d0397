//! Seeded synthetic tasks and their evaluation.
//!
//! * The capability task is modular addition rendered as `Q k1 k2 A v` with
//!   `v = (k1 + k2) mod K`. It stands in for general text ability.
//! * The retrieval world is a set of items with hierarchical semantic codes
//!   (leading tokens name the cluster, trailing tokens the item inside it) and
//!   user histories generated by a cluster-level Markov chain. The model must
//!   predict the code of each user's held-out next item.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{window, BeamOptions, Example, Head, ModelView, TokenId, Vocab};

// ---------------------------------------------------------------------------
// Capability task

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilityTask {
    pub key_count: u32,
    pub train: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
}

impl CapabilityTask {
    pub fn answer(&self, a: u32, b: u32) -> u32 {
        (a + b) % self.key_count
    }

    /// `Q k1 k2 A`; the model predicts `v` next.
    pub fn prompt(&self, vocab: &Vocab, a: u32, b: u32) -> Vec<TokenId> {
        vec![Vocab::QUERY, vocab.key(a), vocab.key(b), Vocab::ANSWER]
    }

    pub fn examples(&self, vocab: &Vocab, context: usize, pairs: &[(u32, u32)]) -> Vec<Example> {
        pairs
            .iter()
            .map(|&(a, b)| Example {
                context: window(&self.prompt(vocab, a, b), context),
                target: vocab.key(self.answer(a, b)),
                head: Head::Text,
            })
            .collect()
    }
}

/// Splits the `K^2` key pairs into disjoint train / held-out sets.
pub fn gen_capability(
    seed: u64,
    key_count: u32,
    n_train: usize,
    n_test: usize,
) -> Result<CapabilityTask> {
    if key_count == 0 {
        return Err(Error::InvalidConfig(
            "capability key_count must be positive".to_owned(),
        ));
    }
    let all = key_count as usize * key_count as usize;
    if n_train + n_test > all {
        return Err(Error::InvalidConfig(format!(
            "n_train + n_test = {} exceeds the {all} distinct queries",
            n_train + n_test
        )));
    }
    let mut pairs: Vec<(u32, u32)> = (0..key_count)
        .flat_map(|a| (0..key_count).map(move |b| (a, b)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    let test = pairs[n_train..n_train + n_test].to_vec();
    pairs.truncate(n_train);
    Ok(CapabilityTask {
        key_count,
        train: pairs,
        test,
    })
}

/// Exact-match accuracy of the greedy answer on `queries`. The answer is the
/// highest-scoring key token under the text head (ties go to the lower key).
pub fn capability_accuracy(
    view: &ModelView,
    task: &CapabilityTask,
    queries: &[(u32, u32)],
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let vocab = view.config().vocab;
    if vocab.key_count != task.key_count {
        return Err(Error::InvalidConfig(format!(
            "model has {} key tokens, task has {}",
            vocab.key_count, task.key_count
        )));
    }
    let context = view.config().context;
    let mut correct = 0usize;
    for &(a, b) in queries {
        let logits = view.logits(&window(&task.prompt(&vocab, a, b), context), Head::Text)?;
        let keys = &logits[vocab.key(0) as usize..vocab.text_size() as usize];
        let best = (0..keys.len()).fold(0, |best, j| if keys[j] > keys[best] { j } else { best });
        if best as u32 == task.answer(a, b) {
            correct += 1;
        }
    }
    Ok(correct as f64 / queries.len() as f64)
}

/// Held-out capability accuracy.
pub fn eval_capability(view: &ModelView, task: &CapabilityTask) -> Result<f64> {
    capability_accuracy(view, task, &task.test)
}

// ---------------------------------------------------------------------------
// Retrieval world

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransitionKind {
    /// Each cluster favours `fanout` random successor clusters with
    /// geometrically decaying weights, mixed with `smoothing` uniform mass.
    Favoured {
        fanout: u32,
        decay: f64,
        smoothing: f64,
    },
    /// Users never leave their cluster.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    pub items: u32,
    pub clusters: u32,
    pub users: u32,
    /// Maximum history length (items).
    pub history_len: u32,
    pub min_history: u32,
    /// Semantic code length; the leading half names the cluster.
    pub code_len: u32,
    pub transition: TransitionKind,
    /// Zipf exponent of within-cluster item popularity.
    pub popularity_skew: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            items: 512,
            clusters: 16,
            users: 5000,
            history_len: 20,
            min_history: 3,
            code_len: 4,
            transition: TransitionKind::Favoured {
                fanout: 2,
                decay: 0.4,
                smoothing: 0.1,
            },
            popularity_skew: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub history: Vec<u32>,
    pub held_out: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalWorld {
    pub config: RetrievalConfig,
    /// Per-position symbol alphabet; SID index of symbol `v` at position `p`
    /// is `p * alphabet + v`.
    pub alphabet: u32,
    pub codes: Vec<Vec<u32>>,
    pub item_cluster: Vec<u32>,
    pub popularity: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub users: Vec<UserHistory>,
    #[serde(skip)]
    code_index: HashMap<Vec<u32>, u32>,
}

fn smallest_base(n: u32, digits: u32) -> u32 {
    let mut b = 1u32;
    while (b as u64).pow(digits) < n as u64 {
        b += 1;
    }
    b
}

fn digits(mut v: u32, base: u32, n: u32) -> Vec<u32> {
    let mut out = vec![0; n as usize];
    for slot in out.iter_mut().rev() {
        if base > 1 {
            *slot = v % base;
            v /= base;
        }
    }
    out
}

fn sample_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Generates a world whose codes fit `sid_size` SID tokens.
pub fn gen_retrieval(seed: u64, config: RetrievalConfig, sid_size: u32) -> Result<RetrievalWorld> {
    let c = &config;
    if c.clusters == 0 || c.items < c.clusters {
        return Err(Error::InvalidConfig(format!(
            "need items >= clusters >= 1, got {} / {}",
            c.items, c.clusters
        )));
    }
    if c.code_len < 2 || !sid_size.is_multiple_of(c.code_len) {
        return Err(Error::InvalidConfig(format!(
            "sid_size {sid_size} must be a multiple of code_len {} (>= 2)",
            c.code_len
        )));
    }
    if c.users == 0 || c.min_history == 0 || c.min_history > c.history_len {
        return Err(Error::InvalidConfig(
            "need users >= 1 and 1 <= min_history <= history_len".to_owned(),
        ));
    }
    if !(c.popularity_skew.is_finite() && c.popularity_skew >= 0.0) {
        return Err(Error::InvalidConfig(
            "popularity_skew must be finite and >= 0".to_owned(),
        ));
    }
    let alphabet = sid_size / c.code_len;
    let cluster_digits = c.code_len / 2;
    let item_digits = c.code_len - cluster_digits;
    let cluster_base = smallest_base(c.clusters, cluster_digits);
    let per_cluster = c.items.div_ceil(c.clusters);
    if cluster_base > alphabet || (alphabet as u64).pow(item_digits) < per_cluster as u64 {
        return Err(Error::InvalidConfig(format!(
            "{} clusters of up to {per_cluster} items do not fit a {}-token code over {alphabet} symbols",
            c.clusters, c.code_len
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<u32> = (0..c.items).collect();
    order.shuffle(&mut rng);
    let mut item_cluster = vec![0u32; c.items as usize];
    let mut codes = vec![Vec::new(); c.items as usize];
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); c.clusters as usize];
    for (pos, &item) in order.iter().enumerate() {
        let cluster = pos as u32 % c.clusters;
        let within = members[cluster as usize].len() as u32;
        members[cluster as usize].push(item);
        item_cluster[item as usize] = cluster;
        let mut code = digits(cluster, cluster_base, cluster_digits);
        code.extend(digits(within, alphabet, item_digits));
        codes[item as usize] = code;
    }

    let mut popularity = vec![0.0; c.items as usize];
    for group in &members {
        let mut ranks: Vec<usize> = (0..group.len()).collect();
        ranks.shuffle(&mut rng);
        for (item, rank) in group.iter().zip(ranks) {
            popularity[*item as usize] = 1.0 / ((rank + 1) as f64).powf(c.popularity_skew);
        }
    }

    let l = c.clusters as usize;
    let transition: Vec<Vec<f64>> = match c.transition {
        TransitionKind::Identity => (0..l)
            .map(|i| (0..l).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect(),
        TransitionKind::Favoured {
            fanout,
            decay,
            smoothing,
        } => {
            if fanout == 0 || !(0.0..=1.0).contains(&smoothing) || !(decay > 0.0 && decay <= 1.0) {
                return Err(Error::InvalidConfig(
                    "favoured transition needs fanout >= 1, decay in (0,1], smoothing in [0,1]"
                        .to_owned(),
                ));
            }
            let fanout = (fanout as usize).min(l);
            (0..l)
                .map(|_| {
                    let mut targets: Vec<usize> = (0..l).collect();
                    targets.shuffle(&mut rng);
                    let weights: Vec<f64> = (0..fanout).map(|r| decay.powi(r as i32)).collect();
                    let norm: f64 = weights.iter().sum();
                    let mut row = vec![smoothing / l as f64; l];
                    for (t, w) in targets.iter().zip(&weights) {
                        row[*t] += (1.0 - smoothing) * w / norm;
                    }
                    row
                })
                .collect()
        }
    };

    let pick_item = |rng: &mut ChaCha8Rng, cluster: usize| -> u32 {
        let group = &members[cluster];
        let weights: Vec<f64> = group.iter().map(|i| popularity[*i as usize]).collect();
        group[sample_index(rng, &weights)]
    };
    let mut users = Vec::with_capacity(c.users as usize);
    for _ in 0..c.users {
        let len = rng.random_range(c.min_history..=c.history_len) as usize;
        let mut cluster = rng.random_range(0..l);
        let mut seq = Vec::with_capacity(len + 1);
        seq.push(pick_item(&mut rng, cluster));
        for _ in 0..len {
            cluster = sample_index(&mut rng, &transition[cluster]);
            seq.push(pick_item(&mut rng, cluster));
        }
        let held_out = seq.pop().expect("non-empty");
        users.push(UserHistory {
            history: seq,
            held_out,
        });
    }

    let mut world = RetrievalWorld {
        config,
        alphabet,
        codes,
        item_cluster,
        popularity,
        transition,
        users,
        code_index: HashMap::new(),
    };
    world.rebuild_index()?;
    Ok(world)
}

impl RetrievalWorld {
    fn rebuild_index(&mut self) -> Result<()> {
        self.code_index = HashMap::with_capacity(self.codes.len());
        for (i, code) in self.codes.iter().enumerate() {
            if self.code_index.insert(code.clone(), i as u32).is_some() {
                return Err(Error::Malformed(format!(
                    "duplicate semantic code {code:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn code_len(&self) -> usize {
        self.config.code_len as usize
    }

    pub fn sid_size(&self) -> u32 {
        self.alphabet * self.config.code_len
    }

    /// SID tokens of an item.
    pub fn item_tokens(&self, vocab: &Vocab, item: u32) -> Vec<TokenId> {
        self.codes[item as usize]
            .iter()
            .enumerate()
            .map(|(p, v)| vocab.sid(p as u32 * self.alphabet + v))
            .collect()
    }

    /// Inverse of [`RetrievalWorld::item_tokens`]; `None` for sequences that
    /// are not an item code.
    pub fn decode_item(&self, vocab: &Vocab, tokens: &[TokenId]) -> Option<u32> {
        if tokens.len() != self.code_len() {
            return None;
        }
        let mut code = Vec::with_capacity(tokens.len());
        for (p, t) in tokens.iter().enumerate() {
            let s = vocab.sid_index(*t)?;
            let (pos, v) = (s / self.alphabet, s % self.alphabet);
            if pos != p as u32 {
                return None;
            }
            code.push(v);
        }
        self.code_index.get(&code).copied()
    }

    /// Flattened history tokens followed by `<start_of_SID>`.
    pub fn prompt(&self, vocab: &Vocab, items: &[u32]) -> Vec<TokenId> {
        let mut out: Vec<TokenId> = items
            .iter()
            .flat_map(|i| self.item_tokens(vocab, *i))
            .collect();
        out.push(Vocab::START_SID);
        out
    }

    /// Next-token examples for every history prefix of every user: the code
    /// tokens of the next item under the SID head, then `<end_of_SID>` under
    /// the text head. Held-out items are never used.
    pub fn train_examples(&self, vocab: &Vocab, context: usize) -> Vec<Example> {
        let mut out = Vec::new();
        for user in &self.users {
            for t in 1..user.history.len() {
                let mut seq = self.prompt(vocab, &user.history[..t]);
                for tok in self.item_tokens(vocab, user.history[t]) {
                    out.push(Example {
                        context: window(&seq, context),
                        target: tok,
                        head: Head::Sid,
                    });
                    seq.push(tok);
                }
                out.push(Example {
                    context: window(&seq, context),
                    target: Vocab::END_SID,
                    head: Head::Text,
                });
            }
        }
        out
    }

    /// Cluster of the first code tokens of `item`.
    pub fn cluster_of(&self, item: u32) -> u32 {
        self.item_cluster[item as usize]
    }

    pub fn save_jsonl(&self, dir: &Path) -> Result<()> {
        let mut meta = serde_json::to_value(self)?;
        if let Some(obj) = meta.as_object_mut() {
            obj.remove("users");
            obj.remove("codes");
            obj.remove("item_cluster");
            obj.remove("popularity");
        }
        std::fs::write(dir.join("world.json"), serde_json::to_string_pretty(&meta)?)?;
        let vocab = Vocab::new(0, self.sid_size());
        let mut items = BufWriter::new(File::create(dir.join("items.jsonl"))?);
        for (i, code) in self.codes.iter().enumerate() {
            let rec = ItemRecord {
                item: i as u32,
                cluster: self.item_cluster[i],
                code: code.clone(),
                sid: self
                    .item_tokens(&vocab, i as u32)
                    .iter()
                    .map(|t| t - vocab.text_size())
                    .collect(),
                popularity: self.popularity[i],
            };
            serde_json::to_writer(&mut items, &rec)?;
            items.write_all(b"\n")?;
        }
        items.flush()?;
        let mut users = BufWriter::new(File::create(dir.join("users.jsonl"))?);
        for (u, user) in self.users.iter().enumerate() {
            let rec = UserRecord {
                user: u as u32,
                history: user.history.clone(),
                held_out: user.held_out,
            };
            serde_json::to_writer(&mut users, &rec)?;
            users.write_all(b"\n")?;
        }
        users.flush()?;
        Ok(())
    }

    pub fn load_jsonl(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            config: RetrievalConfig,
            alphabet: u32,
            transition: Vec<Vec<f64>>,
        }
        let meta: Meta = serde_json::from_str(&std::fs::read_to_string(dir.join("world.json"))?)?;
        let items: Vec<ItemRecord> = read_jsonl(&dir.join("items.jsonl"))?;
        let users: Vec<UserRecord> = read_jsonl(&dir.join("users.jsonl"))?;
        let mut world = RetrievalWorld {
            config: meta.config,
            alphabet: meta.alphabet,
            codes: items.iter().map(|r| r.code.clone()).collect(),
            item_cluster: items.iter().map(|r| r.cluster).collect(),
            popularity: items.iter().map(|r| r.popularity).collect(),
            transition: meta.transition,
            users: users
                .into_iter()
                .map(|r| UserHistory {
                    history: r.history,
                    held_out: r.held_out,
                })
                .collect(),
            code_index: HashMap::new(),
        };
        world.rebuild_index()?;
        Ok(world)
    }
}

/// One line of `items.jsonl`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemRecord {
    pub item: u32,
    pub cluster: u32,
    pub code: Vec<u32>,
    /// SID-vocabulary indices (position-offset symbols).
    pub sid: Vec<u32>,
    pub popularity: f64,
}

/// One line of `users.jsonl`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserRecord {
    pub user: u32,
    pub history: Vec<u32>,
    pub held_out: u32,
}

/// One line of `capability.jsonl`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapabilityRecord {
    pub split: String,
    pub k1: u32,
    pub k2: u32,
    pub answer: u32,
    pub key_count: u32,
}

impl CapabilityTask {
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (split, pairs) in [("train", &self.train), ("test", &self.test)] {
            for &(k1, k2) in pairs {
                let rec = CapabilityRecord {
                    split: split.to_owned(),
                    k1,
                    k2,
                    answer: self.answer(k1, k2),
                    key_count: self.key_count,
                };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path, key_count: u32) -> Result<Self> {
        let records: Vec<CapabilityRecord> = read_jsonl(path)?;
        let mut task = CapabilityTask {
            key_count,
            train: Vec::new(),
            test: Vec::new(),
        };
        for r in records {
            if r.key_count != key_count || r.answer != task.answer(r.k1, r.k2) {
                return Err(Error::Malformed(format!(
                    "inconsistent capability record {r:?}"
                )));
            }
            match r.split.as_str() {
                "train" => task.train.push((r.k1, r.k2)),
                "test" => task.test.push((r.k1, r.k2)),
                other => return Err(Error::Malformed(format!("unknown split `{other}`"))),
            }
        }
        Ok(task)
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Ranking metrics

/// Fraction of queries whose relevant item has 1-based rank `<= k`.
pub fn recall_at_k(ranks: &[Option<usize>], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks
        .iter()
        .filter(|r| matches!(r, Some(r) if *r <= k))
        .count() as f64
        / ranks.len() as f64
}

/// NDCG@k with a single relevant item per query: `1 / log2(rank + 1)` when
/// the item ranks within `k`, else 0; averaged over queries.
pub fn ndcg_at_k(ranks: &[Option<usize>], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let gain: f64 = ranks
        .iter()
        .map(|r| match r {
            Some(r) if *r >= 1 && *r <= k => 1.0 / ((*r + 1) as f64).log2(),
            _ => 0.0,
        })
        .sum();
    gain / ranks.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalEvalOptions {
    pub k: usize,
    pub beam_width: usize,
    /// Candidates each beam proposes per step.
    pub tokens_per_beam: usize,
    /// Evaluate only the first `max_users` users when set.
    #[serde(default)]
    pub max_users: Option<usize>,
}

impl Default for RetrievalEvalOptions {
    fn default() -> Self {
        Self {
            k: 10,
            beam_width: 20,
            tokens_per_beam: 20,
            max_users: Some(500),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub recall: f64,
    pub ndcg: f64,
}

/// Rank of the held-out item among the valid decoded candidates of one user.
pub fn held_out_rank(
    view: &ModelView,
    world: &RetrievalWorld,
    user: &UserHistory,
    opts: &RetrievalEvalOptions,
) -> Result<Option<usize>> {
    let vocab = view.config().vocab;
    let prompt = world.prompt(&vocab, &user.history);
    let beam = BeamOptions {
        beam_width: opts.beam_width,
        expansion: opts.tokens_per_beam,
        length: world.code_len(),
    };
    let beams = view.beam_search(&window(&prompt, view.config().context), &beam, Head::Sid)?;
    let rank = beams
        .iter()
        .filter_map(|b| world.decode_item(&vocab, &b.tokens))
        .position(|item| item == user.held_out)
        .map(|p| p + 1);
    Ok(rank)
}

/// Recall@K and NDCG@K of beam-decoded recommendations. Users are evaluated
/// in parallel and aggregated in user order.
pub fn eval_retrieval(
    view: &ModelView,
    world: &RetrievalWorld,
    opts: &RetrievalEvalOptions,
) -> Result<RankingMetrics> {
    if opts.beam_width < opts.k {
        return Err(Error::InvalidConfig(format!(
            "beam width {} must be >= K = {}",
            opts.beam_width, opts.k
        )));
    }
    if view.config().vocab.sid_size != world.sid_size() {
        return Err(Error::InvalidConfig(format!(
            "model has {} SID tokens, world needs {}",
            view.config().vocab.sid_size,
            world.sid_size()
        )));
    }
    let n = opts
        .max_users
        .map_or(world.users.len(), |m| m.min(world.users.len()));
    if n == 0 {
        return Err(Error::EmptyEvalSet);
    }
    let ranks: Vec<Option<usize>> = world.users[..n]
        .par_iter()
        .map(|u| held_out_rank(view, world, u, opts))
        .collect::<Result<_>>()?;
    Ok(RankingMetrics {
        recall: recall_at_k(&ranks, opts.k),
        ndcg: ndcg_at_k(&ranks, opts.k),
    })
}

/// One evaluation point of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: u64,
    pub capability_accuracy: f64,
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
    pub k: usize,
    pub sd: f64,
    pub l2: f64,
    pub cumulative_merges: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, NgramLM};

    #[test]
    fn capability_is_seeded_and_disjoint() {
        let a = gen_capability(3, 7, 30, 10).unwrap();
        assert_eq!(a, gen_capability(3, 7, 30, 10).unwrap());
        assert_ne!(a, gen_capability(4, 7, 30, 10).unwrap());
        assert!(a.test.iter().all(|q| !a.train.contains(q)));
        assert_eq!(a.answer(3, 5), 1);
        assert!(gen_capability(3, 7, 0, 0).unwrap().test.is_empty());
        assert!(gen_capability(3, 7, 40, 10).is_err());
    }

    #[test]
    fn capability_eval_rejects_empty_set() {
        let task = gen_capability(1, 4, 16, 0).unwrap();
        let m = NgramLM::zeros(ModelConfig::new(4, 2, 2, Vocab::new(4, 4))).unwrap();
        assert!(matches!(
            eval_capability(&m.view(), &task),
            Err(Error::EmptyEvalSet)
        ));
    }

    #[test]
    fn zero_model_scores_exactly_one_in_k_on_full_table() {
        // A constant predictor hits each answer value exactly K times out of K^2.
        let task = gen_capability(1, 16, 0, 256).unwrap();
        let m = NgramLM::zeros(ModelConfig::new(4, 2, 2, Vocab::new(16, 4))).unwrap();
        assert_eq!(eval_capability(&m.view(), &task).unwrap(), 1.0 / 16.0);
    }

    fn small_config() -> RetrievalConfig {
        RetrievalConfig {
            items: 64,
            clusters: 4,
            users: 50,
            history_len: 6,
            min_history: 2,
            ..Default::default()
        }
    }

    #[test]
    fn retrieval_is_seeded() {
        let a = gen_retrieval(5, small_config(), 64).unwrap();
        assert_eq!(a, gen_retrieval(5, small_config(), 64).unwrap());
        assert_ne!(a.users, gen_retrieval(6, small_config(), 64).unwrap().users);
    }

    #[test]
    fn retrieval_codes_unique_and_rows_stochastic() {
        let w = gen_retrieval(5, RetrievalConfig::default(), 64).unwrap();
        let mut seen = std::collections::HashSet::new();
        assert!(w
            .codes
            .iter()
            .all(|c| c.len() == 4 && seen.insert(c.clone())));
        for row in &w.transition {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        assert!(w
            .users
            .iter()
            .all(|u| !u.history.is_empty() && u.history.len() <= 20));
        let vocab = Vocab::new(16, 64);
        for item in 0..w.codes.len() as u32 {
            assert_eq!(
                w.decode_item(&vocab, &w.item_tokens(&vocab, item)),
                Some(item)
            );
        }
    }

    #[test]
    fn single_cluster_shares_prefix() {
        let cfg = RetrievalConfig {
            clusters: 1,
            items: 200,
            ..small_config()
        };
        let w = gen_retrieval(2, cfg, 64).unwrap();
        assert!(w.codes.iter().all(|c| c[..2] == [0, 0]));
    }

    #[test]
    fn identity_transition_keeps_cluster() {
        let cfg = RetrievalConfig {
            transition: TransitionKind::Identity,
            ..small_config()
        };
        let w = gen_retrieval(2, cfg, 64).unwrap();
        for u in &w.users {
            assert_eq!(
                w.cluster_of(u.held_out),
                w.cluster_of(*u.history.last().unwrap())
            );
        }
    }

    #[test]
    fn oversized_world_rejected() {
        let cfg = RetrievalConfig {
            items: 4096,
            clusters: 2,
            ..small_config()
        };
        assert!(gen_retrieval(1, cfg, 64).is_err());
        assert!(gen_retrieval(1, small_config(), 63).is_err());
    }

    #[test]
    fn invalid_decodes_are_none() {
        let w = gen_retrieval(5, small_config(), 64).unwrap();
        let vocab = Vocab::new(16, 64);
        let mut toks = w.item_tokens(&vocab, 0);
        toks.swap(0, 1);
        assert_eq!(w.decode_item(&vocab, &toks), None);
        assert_eq!(w.decode_item(&vocab, &toks[..3]), None);
    }

    #[test]
    fn train_examples_cover_codes_and_end_token() {
        let w = gen_retrieval(5, small_config(), 64).unwrap();
        let vocab = Vocab::new(16, 64);
        let ex = w.train_examples(&vocab, 12);
        let expected: usize = w.users.iter().map(|u| (u.history.len() - 1) * 5).sum();
        assert_eq!(ex.len(), expected);
        assert_eq!(ex[4].target, Vocab::END_SID);
        assert_eq!(ex[4].head, Head::Text);
        assert_eq!(*ex[0].context.last().unwrap(), Vocab::START_SID);
    }

    #[test]
    fn ranking_metric_hand_values() {
        let all_first = vec![Some(1); 5];
        assert_eq!(recall_at_k(&all_first, 10), 1.0);
        assert_eq!(ndcg_at_k(&all_first, 10), 1.0);
        assert!((ndcg_at_k(&[Some(3)], 10) - 0.5).abs() < 1e-15);
        let mixed = [Some(1), Some(3), Some(11), None];
        assert_eq!(recall_at_k(&mixed, 10), 0.5);
        assert!((ndcg_at_k(&mixed, 10) - 1.5 / 4.0).abs() < 1e-15);
        assert_eq!(recall_at_k(&mixed, 1), 0.25);
    }

    #[test]
    fn eval_retrieval_requires_enough_beams() {
        let w = gen_retrieval(5, small_config(), 64).unwrap();
        let m = NgramLM::zeros(ModelConfig::new(12, 2, 2, Vocab::new(4, 64))).unwrap();
        let opts = RetrievalEvalOptions {
            k: 10,
            beam_width: 5,
            tokens_per_beam: 5,
            max_users: None,
        };
        assert!(eval_retrieval(&m.view(), &w, &opts).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = gen_retrieval(5, small_config(), 64).unwrap();
        w.save_jsonl(dir.path()).unwrap();
        assert_eq!(RetrievalWorld::load_jsonl(dir.path()).unwrap(), w);
        let t = gen_capability(1, 5, 10, 5).unwrap();
        let p = dir.path().join("capability.jsonl");
        t.save_jsonl(&p).unwrap();
        assert_eq!(CapabilityTask::load_jsonl(&p, 5).unwrap(), t);
    }
}
