//! Gradients, optimizers and supervised fine-tuning.

use std::ops::Range;

use rand::seq::index::sample;
use rayon::prelude::*;

use super::model::{backward, forward_span, PolicyParams};
use super::vocab::TokenId;
use crate::error::{Error, Result};
use crate::rng::{indexed_rng, stream};

/// Examples per parallel work unit. Fixed so the summation order, and so the
/// result, does not depend on the thread count.
const CHUNK: usize = 4;

/// One supervised example: the loss covers `target` given `input`.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub input: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl SftExample {
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut t = self.input.clone();
        t.extend_from_slice(&self.target);
        t
    }

    pub fn span(&self) -> Range<usize> {
        self.input.len()..self.input.len() + self.target.len()
    }
}

/// A sequence with per-position weights on the log-probability of each
/// token in `span`.
pub(crate) struct WeightedSeq {
    pub tokens: Vec<TokenId>,
    pub span: Range<usize>,
    pub weights: Vec<f64>,
}

/// Gradient of `sum_seq sum_t w_t log p(x_t)`.
pub(crate) fn weighted_logprob_grad(params: &PolicyParams, seqs: &[WeightedSeq]) -> Result<Vec<f64>> {
    let n = params.num_params();
    let parts: Vec<Result<Vec<f64>>> = seqs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; n];
            for s in chunk {
                let caches = forward_span(params, &s.tokens, &s.span)?;
                backward(params, &s.tokens, &s.span, &caches, &s.weights, &mut grad);
            }
            Ok(grad)
        })
        .collect();
    let mut total = vec![0.0; n];
    for part in parts {
        for (t, g) in total.iter_mut().zip(part?) {
            *t += g;
        }
    }
    Ok(total)
}

/// Mean token cross-entropy over all target tokens of the batch and its
/// gradient.
pub fn sft_loss_and_grad(params: &PolicyParams, batch: &[SftExample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let count: usize = batch.iter().map(|e| e.target.len()).sum();
    if count == 0 {
        return Ok((0.0, vec![0.0; params.num_params()]));
    }
    let w = -1.0 / count as f64;
    let seqs: Vec<WeightedSeq> = batch
        .iter()
        .map(|e| WeightedSeq {
            tokens: e.tokens(),
            span: e.span(),
            weights: vec![w; e.target.len()],
        })
        .collect();
    let losses: Vec<Result<f64>> = seqs
        .par_iter()
        .map(|s| {
            let caches = forward_span(params, &s.tokens, &s.span)?;
            Ok(caches
                .iter()
                .zip(&s.tokens[s.span.clone()])
                .map(|(c, &t)| -c.log_probs[t as usize])
                .sum())
        })
        .collect();
    let mut loss = 0.0;
    for l in losses {
        loss += l?;
    }
    let grad = weighted_logprob_grad(params, &seqs)?;
    Ok((loss / count as f64, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// First-order optimizer state. Minimizes: `step` moves against `grad`.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    max_grad_norm: Option<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, max_grad_norm: Option<f64>) -> Self {
        Self {
            kind,
            max_grad_norm,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn adam() -> Self {
        Self::new(
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            Some(5.0),
        )
    }

    pub fn sgd() -> Self {
        Self::new(OptimizerKind::Sgd, None)
    }

    pub fn step(&mut self, params: &mut PolicyParams, grad: &[f64], lr: f64) {
        let scale = match self.max_grad_norm {
            Some(max) => {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let data = params.as_mut_slice();
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in data.iter_mut().zip(grad) {
                    *p -= lr * scale * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.m.len() != data.len() {
                    self.m = vec![0.0; data.len()];
                    self.v = vec![0.0; data.len()];
                }
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for ((p, g), (m, v)) in data
                    .iter_mut()
                    .zip(grad)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    let g = g * scale;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// One optimizer step on the batch's mean target-token cross-entropy.
/// Returns the loss before the step.
pub fn sft_step(
    params: &mut PolicyParams,
    optimizer: &mut Optimizer,
    batch: &[SftExample],
    lr: f64,
) -> Result<f64> {
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument("learning rate must be non-negative".into()));
    }
    let (loss, grad) = sft_loss_and_grad(params, batch)?;
    if lr > 0.0 {
        optimizer.step(params, &grad, lr);
    }
    Ok(loss)
}

fn active_indices(params: &PolicyParams, example: &SftExample) -> Vec<usize> {
    let d = params.config().d_model;
    let layout = params.layout();
    let tokens = example.tokens();
    let mut rows: Vec<usize> = tokens[..tokens.len().saturating_sub(1)]
        .iter()
        .map(|&t| t as usize)
        .collect();
    rows.sort_unstable();
    rows.dedup();
    let mut out: Vec<usize> = rows
        .iter()
        .flat_map(|r| layout.tok.start + r * d..layout.tok.start + (r + 1) * d)
        .collect();
    let span = example.span();
    out.extend(layout.pos.start + span.start * d..layout.pos.start + span.end * d);
    for (name, range) in layout.tensors() {
        if name != "tok_emb" && name != "pos_emb" {
            out.extend(range);
        }
    }
    out
}

/// Compare the analytic SFT-loss gradient against central finite
/// differences at `n_probe` randomly chosen parameters that the example can
/// influence. Returns the largest relative error
/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(
    params: &PolicyParams,
    example: &SftExample,
    epsilon: f64,
    n_probe: usize,
    seed: u64,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let batch = std::slice::from_ref(example);
    let (_, grad) = sft_loss_and_grad(params, batch)?;
    let active = active_indices(params, example);
    let mut rng = indexed_rng(seed, stream::SHUFFLE, 0);
    let picks = sample(&mut rng, active.len(), n_probe.min(active.len()));
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for p in picks.iter() {
        let i = active[p];
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + epsilon;
        let (up, _) = sft_loss_and_grad(&probe, batch)?;
        probe.as_mut_slice()[i] = orig - epsilon;
        let (down, _) = sft_loss_and_grad(&probe, batch)?;
        probe.as_mut_slice()[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let analytic = grad[i];
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_catalog;
    use crate::policy::model::{log_prob, PolicyConfig};
    use crate::policy::vocab::{build_vocabulary, Vocabulary};

    fn setup(out_scale: f64) -> (Vocabulary, PolicyParams) {
        let catalog = generate_catalog(4, 30, 5, 4).unwrap();
        let vocab = build_vocabulary(&catalog, &[4, 3, 3], 1);
        let cfg = PolicyConfig {
            d_model: 12,
            max_len: 96,
            recency_decay: 0.8,
        };
        (vocab.clone(), PolicyParams::with_output_scale(cfg, &vocab, 9, out_scale))
    }

    fn example(vocab: &Vocabulary) -> SftExample {
        SftExample {
            input: vocab.encode("young female north red phone cheap"),
            target: vocab.encode("<think> red phone </think><a_1><b_2><c_0><d_1>"),
        }
    }

    #[test]
    fn uniform_init_loss_is_log_vocab() {
        let (vocab, mut params) = setup(0.0);
        let mut opt = Optimizer::adam();
        let loss = sft_step(&mut params, &mut opt, &[example(&vocab)], 0.0).unwrap();
        assert!((loss - (vocab.len() as f64).ln()).abs() < 1e-3);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let (vocab, params) = setup(0.2);
        let mut live = params.clone();
        sft_step(&mut live, &mut Optimizer::sgd(), &[example(&vocab)], 0.0).unwrap();
        assert_eq!(live, params);
    }

    #[test]
    fn empty_batch_errors() {
        let (_, mut params) = setup(0.2);
        assert!(matches!(
            sft_step(&mut params, &mut Optimizer::adam(), &[], 0.1),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn overfits_one_example() {
        let (vocab, mut params) = setup(0.0);
        let ex = example(&vocab);
        let mut opt = Optimizer::adam();
        let first = sft_step(&mut params, &mut opt, &[ex.clone()], 0.01).unwrap();
        let mut last = first;
        for _ in 0..199 {
            last = sft_step(&mut params, &mut opt, &[ex.clone()], 0.01).unwrap();
        }
        assert!(last < 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (vocab, params) = setup(0.3);
        let err = gradient_check(&params, &example(&vocab), 1e-3, 60, 1).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn coarser_epsilon_is_less_accurate() {
        let (vocab, params) = setup(0.3);
        let ex = example(&vocab);
        let coarse = gradient_check(&params, &ex, 1e-2, 60, 2).unwrap();
        let fine = gradient_check(&params, &ex, 1e-3, 60, 2).unwrap();
        assert!(fine < coarse, "{fine} vs {coarse}");
    }

    #[test]
    fn empty_target_has_zero_gradient() {
        let (vocab, params) = setup(0.3);
        let ex = SftExample {
            input: vocab.encode("red phone"),
            target: Vec::new(),
        };
        let (loss, grad) = sft_loss_and_grad(&params, &[ex]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn snapshot_is_isolated_from_training() {
        let (vocab, mut params) = setup(0.2);
        let ex = example(&vocab);
        let snap = params.snapshot();
        let tokens = ex.tokens();
        let before = log_prob(&snap, &tokens, ex.span()).unwrap();
        assert_eq!(before, log_prob(&params, &tokens, ex.span()).unwrap());
        sft_step(&mut params, &mut Optimizer::adam(), &[ex.clone()], 0.05).unwrap();
        assert_eq!(before, log_prob(&snap, &tokens, ex.span()).unwrap());
        assert_eq!(params.snapshot().to_bytes(), params.snapshot().to_bytes());
    }
}
