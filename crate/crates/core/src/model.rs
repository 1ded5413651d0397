//! A neural n-gram language model over a joint text + SID vocabulary.
//!
//! The last `context` tokens are embedded, concatenated, passed through one
//! ReLU hidden layer and read out by two linear heads: one over the text
//! partition, one over the SID partition. SID ids occupy the tail of the
//! vocabulary. The SID embedding rows and the SID head are excluded from
//! distance and merge.
//!
//! Parameters are stored as `f32`; all arithmetic runs in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GroupSpec, ParamStore};

pub type TokenId = u32;

pub const EMBED_TEXT: &str = "embed_text";
pub const EMBED_SID: &str = "embed_sid";
pub const HIDDEN_W: &str = "hidden_w";
pub const HIDDEN_B: &str = "hidden_b";
pub const OUT_TEXT_W: &str = "out_text_w";
pub const OUT_TEXT_B: &str = "out_text_b";
pub const OUT_SID_W: &str = "out_sid_w";
pub const OUT_SID_B: &str = "out_sid_b";

/// Token layout: five special text tokens, `key_count` key tokens, then the
/// SID tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    pub key_count: u32,
    pub sid_size: u32,
}

impl Vocab {
    pub const PAD: TokenId = 0;
    pub const QUERY: TokenId = 1;
    pub const ANSWER: TokenId = 2;
    pub const START_SID: TokenId = 3;
    pub const END_SID: TokenId = 4;
    const SPECIALS: u32 = 5;

    pub fn new(key_count: u32, sid_size: u32) -> Self {
        Self {
            key_count,
            sid_size,
        }
    }

    pub fn text_size(&self) -> u32 {
        Self::SPECIALS + self.key_count
    }

    pub fn total(&self) -> u32 {
        self.text_size() + self.sid_size
    }

    pub fn key(&self, k: u32) -> TokenId {
        debug_assert!(k < self.key_count);
        Self::SPECIALS + k
    }

    /// Inverse of [`Vocab::key`].
    pub fn key_index(&self, token: TokenId) -> Option<u32> {
        (Self::SPECIALS..self.text_size())
            .contains(&token)
            .then(|| token - Self::SPECIALS)
    }

    pub fn sid(&self, s: u32) -> TokenId {
        debug_assert!(s < self.sid_size);
        self.text_size() + s
    }

    /// Inverse of [`Vocab::sid`].
    pub fn sid_index(&self, token: TokenId) -> Option<u32> {
        (self.text_size()..self.total())
            .contains(&token)
            .then(|| token - self.text_size())
    }

    pub fn is_sid(&self, token: TokenId) -> bool {
        self.sid_index(token).is_some()
    }
}

/// Which output head a prediction is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Text,
    Sid,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub context: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub vocab: Vocab,
    /// Half-width of the uniform initialisation for embeddings and weights.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    0.05
}

impl ModelConfig {
    pub fn new(context: usize, embed_dim: usize, hidden_dim: usize, vocab: Vocab) -> Self {
        Self {
            context,
            embed_dim,
            hidden_dim,
            vocab,
            init_scale: default_init_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidConfig(
                "model dimensions must be positive".to_owned(),
            ));
        }
        if self.vocab.sid_size == 0 {
            return Err(Error::InvalidConfig(
                "sid vocabulary must be non-empty".to_owned(),
            ));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::InvalidConfig(
                "init_scale must be finite and >= 0".to_owned(),
            ));
        }
        Ok(())
    }

    pub fn group_specs(&self) -> Vec<GroupSpec> {
        let (c, e, h) = (self.context, self.embed_dim, self.hidden_dim);
        let text = self.vocab.text_size() as usize;
        let sid = self.vocab.sid_size as usize;
        vec![
            GroupSpec::included(EMBED_TEXT, text * e),
            GroupSpec::excluded(EMBED_SID, sid * e),
            GroupSpec::included(HIDDEN_W, c * e * h),
            GroupSpec::included(HIDDEN_B, h),
            GroupSpec::included(OUT_TEXT_W, h * text),
            GroupSpec::included(OUT_TEXT_B, text),
            GroupSpec::excluded(OUT_SID_W, h * sid),
            GroupSpec::excluded(OUT_SID_B, sid),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.group_specs().iter().map(|g| g.len).sum()
    }
}

/// Flat-vector offsets of each weight block.
#[derive(Debug, Clone, Copy)]
struct Layout {
    context: usize,
    embed: usize,
    hidden: usize,
    text: usize,
    sid: usize,
    embed_off: usize,
    hidden_w: usize,
    hidden_b: usize,
    out_text_w: usize,
    out_text_b: usize,
    out_sid_w: usize,
    out_sid_b: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let (c, e, h) = (cfg.context, cfg.embed_dim, cfg.hidden_dim);
        let text = cfg.vocab.text_size() as usize;
        let sid = cfg.vocab.sid_size as usize;
        let embed_off = 0;
        let hidden_w = embed_off + (text + sid) * e;
        let hidden_b = hidden_w + c * e * h;
        let out_text_w = hidden_b + h;
        let out_text_b = out_text_w + h * text;
        let out_sid_w = out_text_b + text;
        let out_sid_b = out_sid_w + h * sid;
        let total = out_sid_b + sid;
        Self {
            context: c,
            embed: e,
            hidden: h,
            text,
            sid,
            embed_off,
            hidden_w,
            hidden_b,
            out_text_w,
            out_text_b,
            out_sid_w,
            out_sid_b,
            total,
        }
    }

    fn vocab_total(&self) -> usize {
        self.text + self.sid
    }
}

/// One next-token training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub context: Vec<TokenId>,
    pub target: TokenId,
    pub head: Head,
}

/// The last `context` tokens of `tokens`, left-padded with PAD.
pub fn window(tokens: &[TokenId], context: usize) -> Vec<TokenId> {
    let mut out = vec![Vocab::PAD; context.saturating_sub(tokens.len())];
    out.extend_from_slice(&tokens[tokens.len().saturating_sub(context)..]);
    out
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with four interleaved partial sums (fixed order).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

#[derive(Debug, Clone)]
pub struct NgramLM {
    config: ModelConfig,
    params: ParamStore,
}

impl NgramLM {
    /// Seeded uniform initialisation of embeddings and weights; biases zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = config.init_scale as f32;
        for name in [EMBED_TEXT, EMBED_SID, HIDDEN_W, OUT_TEXT_W, OUT_SID_W] {
            for v in model.params.group_values_mut(name).expect("group exists") {
                *v = if scale > 0.0 {
                    rng.random_range(-scale..scale)
                } else {
                    0.0
                };
            }
        }
        Ok(model)
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::zeros(&config.group_specs())?;
        Ok(Self { config, params })
    }

    /// Wraps existing parameters, checking they match the configured layout.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::zeros(config)?;
        crate::params::assert_compatible(&reference.params, &params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Freezes the current parameters into an `f64` evaluation view.
    pub fn view(&self) -> ModelView {
        ModelView::from_values(
            self.config,
            self.params.values().iter().map(|v| *v as f64).collect(),
        )
    }

    pub fn forward(&self, context: &[TokenId], head: Head) -> Result<Vec<f64>> {
        self.view().logits(context, head)
    }

    /// Mean cross-entropy over the batch and its gradient, shaped like the
    /// parameters.
    pub fn loss_and_grad(&self, batch: &[Example]) -> Result<(f64, ParamStore)> {
        let view = self.view();
        let (loss, grad) = view.loss_and_grad(batch)?;
        Ok((
            loss,
            self.params
                .with_values(grad.into_iter().map(|g| g as f32).collect()),
        ))
    }
}

/// Read-only `f64` copy of a model's parameters.
#[derive(Debug, Clone)]
pub struct ModelView {
    config: ModelConfig,
    layout: Layout,
    w: Vec<f64>,
}

struct Activations {
    x: Vec<f64>,
    h: Vec<f64>,
}

impl ModelView {
    /// Evaluation view over explicit `f64` parameter values laid out as the
    /// model's [`ParamStore`]. Used directly by 64-bit gradient checks.
    pub fn from_values(config: ModelConfig, values: Vec<f64>) -> Self {
        let layout = Layout::new(&config);
        assert_eq!(
            values.len(),
            layout.total,
            "parameter vector length must match the model layout"
        );
        Self {
            config,
            layout,
            w: values,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }

    fn check_context(&self, context: &[TokenId]) -> Result<()> {
        if context.len() != self.layout.context {
            return Err(Error::Domain(format!(
                "context has {} tokens, model expects {}",
                context.len(),
                self.layout.context
            )));
        }
        let total = self.layout.vocab_total() as u32;
        if let Some(&bad) = context.iter().find(|t| **t >= total) {
            return Err(Error::TokenOutOfRange { token: bad, total });
        }
        Ok(())
    }

    fn hidden(&self, context: &[TokenId]) -> Activations {
        let l = &self.layout;
        let mut x = Vec::with_capacity(l.context * l.embed);
        for &tok in context {
            let row = l.embed_off + tok as usize * l.embed;
            x.extend_from_slice(&self.w[row..row + l.embed]);
        }
        let mut a = self.w[l.hidden_b..l.hidden_b + l.hidden].to_vec();
        for (xi, row) in x
            .iter()
            .zip(self.w[l.hidden_w..l.hidden_b].chunks_exact(l.hidden))
        {
            axpy(*xi, row, &mut a);
        }
        let h = a.into_iter().map(|v| v.max(0.0)).collect();
        Activations { x, h }
    }

    fn head_block(&self, which: Head) -> (usize, usize, usize) {
        let l = &self.layout;
        match which {
            Head::Text => (l.out_text_w, l.out_text_b, l.text),
            Head::Sid => (l.out_sid_w, l.out_sid_b, l.sid),
            Head::Joint => unreachable!("joint head is assembled from both blocks"),
        }
    }

    fn readout(&self, h: &[f64], which: Head, out: &mut Vec<f64>) {
        let (w_off, b_off, n) = self.head_block(which);
        let start = out.len();
        out.extend_from_slice(&self.w[b_off..b_off + n]);
        let logits = &mut out[start..];
        for (hk, row) in h
            .iter()
            .zip(self.w[w_off..w_off + h.len() * n].chunks_exact(n))
        {
            axpy(*hk, row, logits);
        }
    }

    fn logits_from_hidden(&self, h: &[f64], head: Head) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout.vocab_total());
        match head {
            Head::Text | Head::Sid => self.readout(h, head, &mut out),
            Head::Joint => {
                self.readout(h, Head::Text, &mut out);
                self.readout(h, Head::Sid, &mut out);
            }
        }
        out
    }

    /// Logits over the head's partition. Index `j` of the SID head is token
    /// `text_size + j`; the joint head covers the whole vocabulary in id order.
    pub fn logits(&self, context: &[TokenId], head: Head) -> Result<Vec<f64>> {
        self.check_context(context)?;
        let act = self.hidden(context);
        Ok(self.logits_from_hidden(&act.h, head))
    }

    fn partition_offset(&self, head: Head) -> u32 {
        match head {
            Head::Sid => self.layout.text as u32,
            Head::Text | Head::Joint => 0,
        }
    }

    fn target_index(&self, ex: &Example) -> Result<usize> {
        let off = self.partition_offset(ex.head);
        let size = match ex.head {
            Head::Text => self.layout.text,
            Head::Sid => self.layout.sid,
            Head::Joint => self.layout.vocab_total(),
        } as u32;
        if ex.target < off || ex.target - off >= size {
            return Err(Error::Domain(format!(
                "target {} is outside the {:?} partition",
                ex.target, ex.head
            )));
        }
        Ok((ex.target - off) as usize)
    }

    /// Mean cross-entropy of a batch.
    pub fn loss(&self, batch: &[Example]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut total = 0.0;
        for ex in batch {
            self.check_context(&ex.context)?;
            let t = self.target_index(ex)?;
            let act = self.hidden(&ex.context);
            total -= log_softmax(&self.logits_from_hidden(&act.h, ex.head))[t];
        }
        Ok(total / batch.len() as f64)
    }

    /// Mean cross-entropy and its exact gradient. Examples are reduced in
    /// batch order.
    pub fn loss_and_grad(&self, batch: &[Example]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let l = self.layout;
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0f64; l.total];
        let mut total = 0.0;
        let mut dh = vec![0.0f64; l.hidden];
        for ex in batch {
            self.check_context(&ex.context)?;
            let t = self.target_index(ex)?;
            let act = self.hidden(&ex.context);
            let logits = self.logits_from_hidden(&act.h, ex.head);
            let logp = log_softmax(&logits);
            total -= logp[t];

            // d loss / d logits = softmax - onehot, split back into heads.
            let mut dlogits: Vec<f64> = logp.iter().map(|lp| lp.exp() * scale).collect();
            dlogits[t] -= scale;
            dh.iter_mut().for_each(|v| *v = 0.0);
            let blocks: &[(Head, usize)] = match ex.head {
                Head::Text => &[(Head::Text, 0)],
                Head::Sid => &[(Head::Sid, 0)],
                Head::Joint => &[(Head::Text, 0), (Head::Sid, l.text)],
            };
            for &(which, start) in blocks {
                let (w_off, b_off, n) = self.head_block(which);
                let d = &dlogits[start..start + n];
                axpy(1.0, d, &mut grad[b_off..b_off + n]);
                let rows = act.h.len() * n;
                let g_rows = grad[w_off..w_off + rows].chunks_exact_mut(n);
                let w_rows = self.w[w_off..w_off + rows].chunks_exact(n);
                for (((hk, g_row), w_row), dhk) in
                    act.h.iter().zip(g_rows).zip(w_rows).zip(dh.iter_mut())
                {
                    axpy(*hk, d, g_row);
                    *dhk += dot(w_row, d);
                }
            }

            let da: Vec<f64> = dh
                .iter()
                .zip(&act.h)
                .map(|(g, h)| if *h > 0.0 { *g } else { 0.0 })
                .collect();
            axpy(1.0, &da, &mut grad[l.hidden_b..l.hidden_b + l.hidden]);
            let mut dx = vec![0.0f64; act.x.len()];
            let g_rows = grad[l.hidden_w..l.hidden_b].chunks_exact_mut(l.hidden);
            let w_rows = self.w[l.hidden_w..l.hidden_b].chunks_exact(l.hidden);
            for (((xi, g_row), w_row), dxi) in
                act.x.iter().zip(g_rows).zip(w_rows).zip(dx.iter_mut())
            {
                axpy(*xi, &da, g_row);
                *dxi = dot(w_row, &da);
            }
            for (tok, dx_pos) in ex.context.iter().zip(dx.chunks_exact(l.embed)) {
                let row = l.embed_off + *tok as usize * l.embed;
                axpy(1.0, dx_pos, &mut grad[row..row + l.embed]);
            }
        }
        Ok((total * scale, grad))
    }

    /// Beam search over one partition.
    ///
    /// Every live beam proposes its `expansion` most likely next tokens; the
    /// pooled candidates are ranked by total log-probability (ties broken by
    /// lexicographic token order) and the best `beam_width` survive. Returns
    /// the final beams in that order. `beam_width = 1` is greedy decoding.
    pub fn beam_search(
        &self,
        prompt: &[TokenId],
        opts: &BeamOptions,
        partition: Head,
    ) -> Result<Vec<Beam>> {
        if opts.beam_width == 0 || opts.length == 0 || opts.expansion == 0 {
            return Err(Error::InvalidConfig(
                "beam width, expansion and length must be >= 1".to_owned(),
            ));
        }
        if partition == Head::Joint {
            return Err(Error::InvalidConfig(
                "decoding runs over a single partition".to_owned(),
            ));
        }
        let offset = self.partition_offset(partition);
        let mut beams = vec![Beam {
            tokens: Vec::new(),
            log_prob: 0.0,
        }];
        let mut seq = prompt.to_vec();
        for _ in 0..opts.length {
            let mut candidates = Vec::with_capacity(beams.len() * opts.expansion);
            for beam in &beams {
                seq.truncate(prompt.len());
                seq.extend_from_slice(&beam.tokens);
                let ctx = window(&seq, self.layout.context);
                let logp = log_softmax(&self.logits(&ctx, partition)?);
                let mut order: Vec<usize> = (0..logp.len()).collect();
                order.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
                for &j in order.iter().take(opts.expansion) {
                    let mut tokens = beam.tokens.clone();
                    tokens.push(offset + j as u32);
                    candidates.push(Beam {
                        tokens,
                        log_prob: beam.log_prob + logp[j],
                    });
                }
            }
            candidates.sort_by(Beam::ranking);
            candidates.truncate(opts.beam_width);
            beams = candidates;
        }
        Ok(beams)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamOptions {
    pub beam_width: usize,
    /// Candidates proposed per live beam at each step.
    pub expansion: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
}

impl Beam {
    /// Descending log-probability, then ascending token sequence.
    pub fn ranking(a: &Beam, b: &Beam) -> std::cmp::Ordering {
        b.log_prob
            .total_cmp(&a.log_prob)
            .then_with(|| a.tokens.cmp(&b.tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::new(2, 3, 4, Vocab::new(0, 5))
    }

    #[test]
    fn vocab_layout() {
        let v = Vocab::new(16, 64);
        assert_eq!(v.text_size(), 21);
        assert_eq!(v.total(), 85);
        assert_eq!(v.key_index(v.key(3)), Some(3));
        assert_eq!(v.sid_index(v.sid(63)), Some(63));
        assert!(!v.is_sid(Vocab::END_SID));
        assert_eq!(v.key_index(Vocab::ANSWER), None);
    }

    #[test]
    fn param_count_matches_groups() {
        let cfg = ModelConfig::new(12, 32, 64, Vocab::new(16, 64));
        let m = NgramLM::new(cfg, 1).unwrap();
        assert_eq!(m.params().len(), cfg.param_count());
        assert_eq!(m.params().len(), Layout::new(&cfg).total);
        let excluded: Vec<_> = m
            .params()
            .groups()
            .iter()
            .filter(|g| g.exclude_from_merge)
            .map(|g| g.name.as_str())
            .collect();
        assert_eq!(excluded, vec![EMBED_SID, OUT_SID_W, OUT_SID_B]);
    }

    #[test]
    fn zero_model_is_uniform() {
        let cfg = ModelConfig::new(3, 4, 5, Vocab::new(4, 6));
        let m = NgramLM::zeros(cfg).unwrap();
        let ctx = [Vocab::PAD, Vocab::QUERY, cfg.vocab.key(1)];
        let text = m.forward(&ctx, Head::Text).unwrap();
        let sid = m.forward(&ctx, Head::Sid).unwrap();
        assert_eq!(text.len(), 9);
        assert_eq!(sid.len(), 6);
        assert_eq!(m.forward(&ctx, Head::Joint).unwrap().len(), 15);
        assert!(text.iter().chain(&sid).all(|l| *l == 0.0));
        let batch = vec![Example {
            context: ctx.to_vec(),
            target: cfg.vocab.sid(2),
            head: Head::Sid,
        }];
        let (loss, _) = m.loss_and_grad(&batch).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic_and_checks_tokens() {
        let cfg = ModelConfig::new(3, 4, 5, Vocab::new(4, 6));
        let m = NgramLM::new(cfg, 9).unwrap();
        let ctx = [Vocab::PAD, Vocab::QUERY, cfg.vocab.key(1)];
        assert_eq!(
            m.forward(&ctx, Head::Joint).unwrap(),
            m.forward(&ctx, Head::Joint).unwrap()
        );
        assert!(matches!(
            m.forward(&[0, 1, 99], Head::Text),
            Err(Error::TokenOutOfRange { token: 99, .. })
        ));
        assert!(m.forward(&[0, 1], Head::Text).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let cfg = ModelConfig::new(3, 4, 5, Vocab::new(4, 6));
        let mut m = NgramLM::new(cfg, 3).unwrap();
        for v in m.params_mut().values_mut() {
            *v *= 40.0;
        }
        for head in [Head::Text, Head::Sid, Head::Joint] {
            let p = softmax(&m.forward(&[1, 2, 3], head).unwrap());
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn confident_target_has_near_zero_loss() {
        let cfg = ModelConfig::new(2, 2, 2, Vocab::new(2, 3));
        let mut m = NgramLM::zeros(cfg).unwrap();
        let target = cfg.vocab.key(1);
        m.params_mut().group_values_mut(OUT_TEXT_B).unwrap()[target as usize] = 50.0;
        let batch = vec![Example {
            context: vec![0, 0],
            target,
            head: Head::Text,
        }];
        assert!(m.loss_and_grad(&batch).unwrap().0 <= 1e-6);
    }

    #[test]
    fn empty_batch_and_bad_target_rejected() {
        let m = NgramLM::zeros(tiny()).unwrap();
        assert!(matches!(m.loss_and_grad(&[]), Err(Error::EmptyBatch)));
        let sid_tok = tiny().vocab.sid(0);
        let bad = vec![Example {
            context: vec![0, 0],
            target: sid_tok,
            head: Head::Text,
        }];
        assert!(matches!(m.loss_and_grad(&bad), Err(Error::Domain(_))));
    }

    #[test]
    fn untouched_groups_get_zero_gradient() {
        let cfg = ModelConfig::new(2, 3, 4, Vocab::new(2, 4));
        let m = NgramLM::new(cfg, 5).unwrap();
        let batch = vec![Example {
            context: vec![Vocab::QUERY, cfg.vocab.key(0)],
            target: cfg.vocab.key(1),
            head: Head::Text,
        }];
        let (_, g) = m.loss_and_grad(&batch).unwrap();
        for name in [EMBED_SID, OUT_SID_W, OUT_SID_B] {
            assert!(
                g.group_values(name).unwrap().iter().all(|v| *v == 0.0),
                "{name}"
            );
        }
        assert!(g
            .group_values(OUT_TEXT_B)
            .unwrap()
            .iter()
            .any(|v| *v != 0.0));
    }

    #[test]
    fn window_pads_and_truncates() {
        assert_eq!(window(&[7, 8], 4), vec![0, 0, 7, 8]);
        assert_eq!(window(&[1, 2, 3, 4, 5], 3), vec![3, 4, 5]);
    }

    #[test]
    fn greedy_beam_equals_argmax_rollout() {
        let cfg = ModelConfig::new(3, 4, 6, Vocab::new(2, 5));
        let mut m = NgramLM::new(cfg, 11).unwrap();
        for v in m.params_mut().values_mut() {
            *v *= 30.0;
        }
        let prompt = vec![Vocab::START_SID];
        let opts = BeamOptions {
            beam_width: 1,
            expansion: 5,
            length: 4,
        };
        let beams = m.view().beam_search(&prompt, &opts, Head::Sid).unwrap();
        let mut seq = prompt.clone();
        for _ in 0..4 {
            let logits = m.forward(&window(&seq, 3), Head::Sid).unwrap();
            let best = (0..logits.len())
                .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
                .unwrap();
            seq.push(cfg.vocab.sid(best as u32));
        }
        assert_eq!(beams.len(), 1);
        assert_eq!(beams[0].tokens, seq[1..]);
    }

    #[test]
    fn beam_search_rejects_bad_options() {
        let m = NgramLM::zeros(tiny()).unwrap();
        let v = m.view();
        assert!(v
            .beam_search(
                &[],
                &BeamOptions {
                    beam_width: 0,
                    expansion: 1,
                    length: 1
                },
                Head::Sid
            )
            .is_err());
        assert!(v
            .beam_search(
                &[],
                &BeamOptions {
                    beam_width: 1,
                    expansion: 1,
                    length: 1
                },
                Head::Joint
            )
            .is_err());
    }

    #[test]
    fn zero_model_beams_tie_break_lexicographically() {
        let m = NgramLM::zeros(tiny()).unwrap();
        let beams = m
            .view()
            .beam_search(
                &[],
                &BeamOptions {
                    beam_width: 3,
                    expansion: 5,
                    length: 2,
                },
                Head::Sid,
            )
            .unwrap();
        let s = |i| tiny().vocab.sid(i);
        let got: Vec<_> = beams.iter().map(|b| b.tokens.clone()).collect();
        assert_eq!(
            got,
            vec![vec![s(0), s(0)], vec![s(0), s(1)], vec![s(0), s(2)]]
        );
    }
}
