//! The policy network and its exact gradients.
//!
//! For the token at position `t` the model reads six `d_model`-wide blocks
//! of features built from the prefix `x_0..x_{t-1}`:
//!
//! ```text
//! z = [ mean_j E[x_j],  recency-weighted mean_j E[x_j],
//!       E[x_{t-1}], E[x_{t-2}], E[x_{t-3}],  P[t] ]
//! h1 = tanh(W_in z + b_in)
//! h2 = h1 + tanh(W_ff h1 + b_ff)
//! logits = W_out h2 + b_out
//! ```
//!
//! The recency pool weights `x_j` by `decay^(t-1-j)`. Missing lookback
//! tokens contribute zeros.

use std::fs;
use std::io::Read;
use std::ops::{Deref, Range};
use std::path::Path;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::vocab::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};

const MAGIC: &[u8; 4] = b"SPOL";
const VERSION: u32 = 1;
const FEATURE_BLOCKS: usize = 6;
const LOOKBACK: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub max_len: usize,
    pub recency_decay: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            max_len: 512,
            recency_decay: 0.85,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub tok: Range<usize>,
    pub pos: Range<usize>,
    pub w_in: Range<usize>,
    pub b_in: Range<usize>,
    pub w_ff: Range<usize>,
    pub b_ff: Range<usize>,
    pub w_out: Range<usize>,
    pub b_out: Range<usize>,
}

impl Layout {
    fn new(vocab: usize, cfg: &PolicyConfig) -> Self {
        let d = cfg.d_model;
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Self {
            tok: take(vocab * d),
            pos: take(cfg.max_len * d),
            w_in: take(d * FEATURE_BLOCKS * d),
            b_in: take(d),
            w_ff: take(d * d),
            b_ff: take(d),
            w_out: take(vocab * d),
            b_out: take(vocab),
        }
    }

    fn total(&self) -> usize {
        self.b_out.end
    }

    pub fn tensors(&self) -> [(&'static str, Range<usize>); 8] {
        [
            ("tok_emb", self.tok.clone()),
            ("pos_emb", self.pos.clone()),
            ("w_in", self.w_in.clone()),
            ("b_in", self.b_in.clone()),
            ("w_ff", self.w_ff.clone()),
            ("b_ff", self.b_ff.clone()),
            ("w_out", self.w_out.clone()),
            ("b_out", self.b_out.clone()),
        ]
    }
}

/// All trainable parameters, stored as one flat vector in tensor order
/// (token embeddings, positions, input block, residual block, output).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    cfg: PolicyConfig,
    vocab_size: usize,
    vocab_hash: u64,
    layout: Layout,
    data: Vec<f64>,
}

/// An immutable, shareable copy of a policy.
#[derive(Debug, Clone)]
pub struct Snapshot(Arc<PolicyParams>);

impl Deref for Snapshot {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.0
    }
}

impl PolicyParams {
    /// Randomly initialised hidden layers with a zero output projection, so
    /// every next-token distribution starts uniform.
    pub fn new(cfg: PolicyConfig, vocab: &Vocabulary, seed: u64) -> Self {
        Self::with_output_scale(cfg, vocab, seed, 0.0)
    }

    /// As [`PolicyParams::new`] but with the output projection drawn with
    /// standard deviation `out_scale`.
    pub fn with_output_scale(cfg: PolicyConfig, vocab: &Vocabulary, seed: u64, out_scale: f64) -> Self {
        let layout = Layout::new(vocab.len(), &cfg);
        let mut data = vec![0.0; layout.total()];
        let mut rng = stream_rng(seed, stream::POLICY_INIT);
        let d = cfg.d_model as f64;
        let mut fill = |range: Range<usize>, std: f64| {
            if std > 0.0 {
                let normal = Normal::new(0.0, std).expect("positive std");
                for x in &mut data[range] {
                    *x = normal.sample(&mut rng);
                }
            }
        };
        fill(layout.tok.clone(), 0.5);
        fill(layout.pos.clone(), 0.02);
        fill(layout.w_in.clone(), 1.0 / (FEATURE_BLOCKS as f64 * d).sqrt());
        fill(layout.w_ff.clone(), 1.0 / d.sqrt());
        fill(layout.w_out.clone(), out_scale);
        Self {
            cfg,
            vocab_size: vocab.len(),
            vocab_hash: vocab.hash(),
            layout,
            data,
        }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot(Arc::new(self.clone()))
    }

    pub(crate) fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if self.vocab_hash != vocab.hash() || self.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "policy vocabulary hash {:016x} does not match vocabulary {:016x}",
                self.vocab_hash,
                vocab.hash()
            )));
        }
        Ok(())
    }

    fn emb(&self, token: TokenId) -> &[f64] {
        let d = self.cfg.d_model;
        let start = self.layout.tok.start + token as usize * d;
        &self.data[start..start + d]
    }

    fn pos(&self, t: usize) -> &[f64] {
        let d = self.cfg.d_model;
        let start = self.layout.pos.start + t * d;
        &self.data[start..start + d]
    }

    /// Round every parameter to f32 precision, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for x in &mut self.data {
            *x = *x as f32 as f64;
        }
    }

    /// Checkpoint bytes: magic, version, vocab size, d_model, max_len (u32
    /// LE), recency decay (f64 LE), vocabulary hash (u64 LE), then every
    /// tensor as f32 LE in declared order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.vocab_size as u32,
            self.cfg.d_model as u32,
            self.cfg.max_len as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.cfg.recency_decay.to_le_bytes());
        out.extend_from_slice(&self.vocab_hash.to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        const HEADER: usize = 4 + 16 + 8 + 8;
        if bytes.len() < HEADER || &bytes[..4] != MAGIC {
            return Err(Error::format(origin, "not a policy checkpoint"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != VERSION {
            return Err(Error::format(origin, format!("unsupported version {}", word(0))));
        }
        let cfg = PolicyConfig {
            d_model: word(2) as usize,
            max_len: word(3) as usize,
            recency_decay: f64::from_le_bytes(bytes[20..28].try_into().unwrap()),
        };
        let vocab_size = word(1) as usize;
        let vocab_hash = u64::from_le_bytes(bytes[28..36].try_into().unwrap());
        let layout = Layout::new(vocab_size, &cfg);
        let body = &bytes[HEADER..];
        if body.len() != 4 * layout.total() {
            return Err(Error::format(origin, "payload size does not match header"));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self {
            cfg,
            vocab_size,
            vocab_hash,
            layout,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, path)
    }

    /// SHA-256 of the checkpoint bytes, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

/// Incrementally maintained prefix summary.
#[derive(Debug, Clone)]
pub struct PrefixState {
    sum: Vec<f64>,
    rec: Vec<f64>,
    rec_norm: f64,
    len: usize,
    last: [Option<TokenId>; LOOKBACK],
}

impl PrefixState {
    pub fn new(params: &PolicyParams) -> Self {
        let d = params.cfg.d_model;
        Self {
            sum: vec![0.0; d],
            rec: vec![0.0; d],
            rec_norm: 0.0,
            len: 0,
            last: [None; LOOKBACK],
        }
    }

    pub fn from_tokens(params: &PolicyParams, tokens: &[TokenId]) -> Self {
        let mut s = Self::new(params);
        for &t in tokens {
            s.push(params, t);
        }
        s
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, params: &PolicyParams, token: TokenId) {
        let decay = params.cfg.recency_decay;
        let e = params.emb(token);
        for ((s, r), x) in self.sum.iter_mut().zip(&mut self.rec).zip(e) {
            *s += x;
            *r = decay * *r + x;
        }
        self.rec_norm = decay * self.rec_norm + 1.0;
        self.len += 1;
        self.last.rotate_right(1);
        self.last[0] = Some(token);
    }

    fn features(&self, params: &PolicyParams) -> Vec<f64> {
        let d = params.cfg.d_model;
        let mut z = Vec::with_capacity(FEATURE_BLOCKS * d);
        let n = self.len as f64;
        z.extend(self.sum.iter().map(|s| s / n));
        z.extend(self.rec.iter().map(|r| r / self.rec_norm));
        for slot in self.last {
            match slot {
                Some(t) => z.extend_from_slice(params.emb(t)),
                None => z.extend(std::iter::repeat_n(0.0, d)),
            }
        }
        z.extend_from_slice(params.pos(self.len));
        z
    }
}

/// Activations of one prediction step, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    pub z: Vec<f64>,
    pub h1: Vec<f64>,
    pub t2: Vec<f64>,
    pub h2: Vec<f64>,
    pub log_probs: Vec<f64>,
}

fn matvec(w: &[f64], x: &[f64], bias: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, (row, b)) in out.iter_mut().zip(w.chunks_exact(cols).zip(bias)) {
        *o = b + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn step(params: &PolicyParams, state: &PrefixState) -> StepCache {
    let d = params.cfg.d_model;
    let l = &params.layout;
    let z = state.features(params);
    let mut h1 = vec![0.0; d];
    matvec(&params.data[l.w_in.clone()], &z, &params.data[l.b_in.clone()], &mut h1);
    h1.iter_mut().for_each(|x| *x = x.tanh());
    let mut t2 = vec![0.0; d];
    matvec(&params.data[l.w_ff.clone()], &h1, &params.data[l.b_ff.clone()], &mut t2);
    t2.iter_mut().for_each(|x| *x = x.tanh());
    let h2: Vec<f64> = h1.iter().zip(&t2).map(|(a, b)| a + b).collect();
    let mut logits = vec![0.0; params.vocab_size];
    matvec(&params.data[l.w_out.clone()], &h2, &params.data[l.b_out.clone()], &mut logits);
    StepCache {
        z,
        h1,
        t2,
        h2,
        log_probs: log_softmax(&logits),
    }
}

/// Next-token log-probabilities after the prefix summarised by `state`.
pub fn next_log_probs(params: &PolicyParams, state: &PrefixState) -> Result<Vec<f64>> {
    if state.is_empty() || state.len() >= params.cfg.max_len {
        return Err(Error::Length {
            len: state.len(),
            max_len: params.cfg.max_len,
        });
    }
    Ok(step(params, state).log_probs)
}

/// Next-token logits for a raw prefix.
pub fn forward_logits(params: &PolicyParams, prefix: &[TokenId]) -> Result<Vec<f64>> {
    let state = PrefixState::from_tokens(params, prefix);
    if state.is_empty() || state.len() >= params.cfg.max_len {
        return Err(Error::Length {
            len: prefix.len(),
            max_len: params.cfg.max_len,
        });
    }
    let c = step(params, &state);
    let d = params.cfg.d_model;
    let l = &params.layout;
    let mut logits = vec![0.0; params.vocab_size];
    matvec(&params.data[l.w_out.clone()], &c.h2, &params.data[l.b_out.clone()], &mut logits);
    debug_assert_eq!(c.h2.len(), d);
    Ok(logits)
}

pub(crate) fn check_span(tokens: &[TokenId], span: &Range<usize>, max_len: usize) -> Result<()> {
    if span.start == 0 || span.start > span.end || span.end > tokens.len() {
        return Err(Error::Span {
            start: span.start,
            end: span.end,
            len: tokens.len(),
        });
    }
    if tokens.len() > max_len {
        return Err(Error::Length {
            len: tokens.len(),
            max_len,
        });
    }
    Ok(())
}

/// Teacher-forced activations for every position in `span`.
pub(crate) fn forward_span(
    params: &PolicyParams,
    tokens: &[TokenId],
    span: &Range<usize>,
) -> Result<Vec<StepCache>> {
    check_span(tokens, span, params.cfg.max_len)?;
    let mut state = PrefixState::from_tokens(params, &tokens[..span.start]);
    let mut caches = Vec::with_capacity(span.len());
    for t in span.clone() {
        caches.push(step(params, &state));
        state.push(params, tokens[t]);
    }
    Ok(caches)
}

/// Per-token log-probabilities over a scored span, and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbs {
    pub per_token: Vec<f64>,
    pub sum: f64,
}

/// Exact teacher-forced log-probabilities of `tokens[span]` given
/// everything before each position.
pub fn log_prob(params: &PolicyParams, tokens: &[TokenId], span: Range<usize>) -> Result<LogProbs> {
    let caches = forward_span(params, tokens, &span)?;
    let per_token: Vec<f64> = caches
        .iter()
        .zip(&tokens[span])
        .map(|(c, &t)| c.log_probs[t as usize])
        .collect();
    let sum = per_token.iter().sum();
    Ok(LogProbs { per_token, sum })
}

/// Accumulate into `grad` the gradient of `sum_t weights[t] * log p(x_t)`
/// over `span`, given the caches from [`forward_span`].
pub(crate) fn backward(
    params: &PolicyParams,
    tokens: &[TokenId],
    span: &Range<usize>,
    caches: &[StepCache],
    weights: &[f64],
    grad: &mut [f64],
) {
    let d = params.cfg.d_model;
    let v = params.vocab_size;
    let fw = FEATURE_BLOCKS * d;
    let l = &params.layout;
    let decay = params.cfg.recency_decay;

    // Pool gradients per predicted position, spread over the prefix below.
    let horizon = span.end;
    let mut mean_grad = vec![vec![0.0; d]; horizon + 1];
    let mut rec_grad = vec![vec![0.0; d]; horizon + 1];

    let mut dlogits = vec![0.0; v];
    let mut dh2 = vec![0.0; d];
    let mut da2 = vec![0.0; d];
    let mut dh1 = vec![0.0; d];
    let mut da1 = vec![0.0; d];
    let mut dz = vec![0.0; fw];

    for ((t, cache), &w) in span.clone().zip(caches).zip(weights) {
        if w == 0.0 {
            continue;
        }
        let target = tokens[t] as usize;
        for (k, g) in dlogits.iter_mut().enumerate() {
            *g = -w * cache.log_probs[k].exp();
        }
        dlogits[target] += w;

        dh2.iter_mut().for_each(|x| *x = 0.0);
        for (k, &g) in dlogits.iter().enumerate() {
            grad[l.b_out.start + k] += g;
            let row = l.w_out.start + k * d;
            let w_row = &params.data[row..row + d];
            let g_row = &mut grad[row..row + d];
            for i in 0..d {
                g_row[i] += g * cache.h2[i];
                dh2[i] += g * w_row[i];
            }
        }

        for i in 0..d {
            da2[i] = dh2[i] * (1.0 - cache.t2[i] * cache.t2[i]);
        }
        dh1.copy_from_slice(&dh2);
        for (i, &g) in da2.iter().enumerate() {
            grad[l.b_ff.start + i] += g;
            let row = l.w_ff.start + i * d;
            for j in 0..d {
                grad[row + j] += g * cache.h1[j];
                dh1[j] += g * params.data[row + j];
            }
        }

        for i in 0..d {
            da1[i] = dh1[i] * (1.0 - cache.h1[i] * cache.h1[i]);
        }
        dz.iter_mut().for_each(|x| *x = 0.0);
        for (i, &g) in da1.iter().enumerate() {
            grad[l.b_in.start + i] += g;
            let row = l.w_in.start + i * fw;
            for j in 0..fw {
                grad[row + j] += g * cache.z[j];
                dz[j] += g * params.data[row + j];
            }
        }

        let rec_norm = (1.0 - decay.powi(t as i32)) / (1.0 - decay);
        let block = |b: usize| &dz[b * d..(b + 1) * d];
        for (m, x) in mean_grad[t].iter_mut().zip(block(0)) {
            *m += x / t as f64;
        }
        for (r, x) in rec_grad[t].iter_mut().zip(block(1)) {
            *r += x / rec_norm;
        }
        for k in 0..LOOKBACK {
            if t > k {
                let row = l.tok.start + tokens[t - 1 - k] as usize * d;
                for (g, x) in grad[row..row + d].iter_mut().zip(block(2 + k)) {
                    *g += x;
                }
            }
        }
        let row = l.pos.start + t * d;
        for (g, x) in grad[row..row + d].iter_mut().zip(block(5)) {
            *g += x;
        }
    }

    // Token j feeds the mean pool of every later position t with weight 1/t
    // and the recency pool with weight decay^(t-1-j) / Z_t.
    let mut acc_mean = vec![0.0; d];
    let mut acc_rec = vec![0.0; d];
    for j in (0..horizon).rev() {
        for i in 0..d {
            acc_mean[i] += mean_grad[j + 1][i];
            acc_rec[i] = decay * acc_rec[i] + rec_grad[j + 1][i];
        }
        let row = l.tok.start + tokens[j] as usize * d;
        for i in 0..d {
            grad[row + i] += acc_mean[i] + acc_rec[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_catalog;
    use crate::policy::vocab::build_vocabulary;

    fn setup(out_scale: f64) -> (Vocabulary, PolicyParams) {
        let catalog = generate_catalog(1, 30, 5, 4).unwrap();
        let vocab = build_vocabulary(&catalog, &[4, 3, 2], 2);
        let cfg = PolicyConfig {
            d_model: 8,
            max_len: 64,
            recency_decay: 0.8,
        };
        let params = PolicyParams::with_output_scale(cfg, &vocab, 3, out_scale);
        (vocab, params)
    }

    #[test]
    fn softmax_normalizes_and_is_deterministic() {
        let (vocab, params) = setup(0.3);
        let prefix = vocab.encode("red phone <think> blue");
        let logits = forward_logits(&params, &prefix).unwrap();
        let total: f64 = log_softmax(&logits).iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert_eq!(logits, forward_logits(&params, &prefix).unwrap());
    }

    #[test]
    fn overlength_and_empty_prefixes_error() {
        let (_, params) = setup(0.3);
        assert!(matches!(forward_logits(&params, &[]), Err(Error::Length { .. })));
        assert!(matches!(forward_logits(&params, &[5; 64]), Err(Error::Length { .. })));
        assert!(forward_logits(&params, &[5; 63]).is_ok());
    }

    #[test]
    fn perturbing_a_parameter_moves_some_logit() {
        let (vocab, mut params) = setup(0.3);
        let prefix = vocab.encode("red phone");
        let before = forward_logits(&params, &prefix).unwrap();
        let idx = params.layout().w_in.start + 5;
        params.as_mut_slice()[idx] += 1e-3;
        let after = forward_logits(&params, &prefix).unwrap();
        assert!(before.iter().zip(&after).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn zero_output_projection_is_uniform() {
        let (vocab, params) = setup(0.0);
        let seq = vocab.encode("red phone <think> blue </think>");
        let lp = log_prob(&params, &seq, 2..seq.len()).unwrap();
        let expected = -(vocab.len() as f64).ln();
        for l in &lp.per_token {
            assert!((l - expected).abs() < 1e-6);
        }
        assert!((lp.sum - lp.per_token.iter().sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn log_prob_matches_naive_recomputation() {
        let (vocab, params) = setup(0.5);
        let seq = vocab.encode("adult female north red phone <think> blue phone </think> <a_1><b_2>");
        let lp = log_prob(&params, &seq, 4..seq.len()).unwrap();
        let mut naive = 0.0;
        for t in 4..seq.len() {
            let logits = forward_logits(&params, &seq[..t]).unwrap();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            naive += (logits[seq[t] as usize].exp() / z).ln();
        }
        assert!((naive - lp.sum).abs() < 1e-9);
    }

    #[test]
    fn span_errors() {
        let (vocab, params) = setup(0.1);
        let seq = vocab.encode("red phone blue");
        assert!(matches!(log_prob(&params, &seq, 0..2), Err(Error::Span { .. })));
        assert!(matches!(log_prob(&params, &seq, 1..9), Err(Error::Span { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (_, mut params) = setup(0.2);
        params.round_to_f32();
        let bytes = params.to_bytes();
        let back = PolicyParams::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, params);
        assert_eq!(back.content_hash(), params.content_hash());
        assert!(PolicyParams::from_bytes(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }
}
