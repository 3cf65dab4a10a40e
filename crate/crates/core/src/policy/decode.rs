//! Sampling reasoning trajectories and beam search over SID tokens.

use std::cmp::Ordering;
use std::ops::Range;

use rand::Rng as _;

use super::model::{next_log_probs, PolicyParams, PrefixState};
use super::vocab::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::{indexed_rng, stream};
use crate::sidcodec::{PrefixTrie, SemanticId, SID_LEN};

/// A context followed by whatever the policy generated after it.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    pub context_len: usize,
    /// Log-probabilities of the generated tokens `tokens[context_len..]`,
    /// when they were produced by a policy.
    pub logprobs: Vec<f64>,
    pub sid: Option<Range<usize>>,
}

impl TokenSequence {
    pub fn from_context(context: Vec<TokenId>) -> Self {
        Self {
            context_len: context.len(),
            tokens: context,
            logprobs: Vec::new(),
            sid: None,
        }
    }

    pub fn context(&self) -> &[TokenId] {
        &self.tokens[..self.context_len]
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.context_len..]
    }

    /// Everything after the context: the span scored during training.
    pub fn scored_span(&self) -> Range<usize> {
        self.context_len..self.tokens.len()
    }

    /// Positions of the first `<think>` and the first `</think>` after the
    /// context.
    pub fn markers(&self, vocab: &Vocabulary) -> (Option<usize>, Option<usize>) {
        let find = |t: TokenId| {
            self.generated()
                .iter()
                .position(|&x| x == t)
                .map(|p| p + self.context_len)
        };
        (find(vocab.think()), find(vocab.end_think()))
    }

    /// Tokens strictly between the think markers, if they are well ordered.
    pub fn reasoning_span(&self, vocab: &Vocabulary) -> Option<Range<usize>> {
        match self.markers(vocab) {
            (Some(open), Some(close)) if open < close => Some(open + 1..close),
            _ => None,
        }
    }

    pub fn sid_tokens(&self) -> Option<&[TokenId]> {
        self.sid.clone().map(|r| &self.tokens[r])
    }

    /// A copy with the given SID tokens appended.
    pub fn with_sid(&self, sid_tokens: &[TokenId]) -> Self {
        let mut out = self.clone();
        let start = out.tokens.len();
        out.tokens.extend_from_slice(sid_tokens);
        out.sid = Some(start..out.tokens.len());
        out.logprobs.clear();
        out
    }
}

fn sample_index(log_probs: &[f64], temperature: f64, u: f64) -> usize {
    let max = log_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_probs
        .iter()
        .map(|l| ((l - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    let target = u * total;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if acc > target {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn generate(
    params: &PolicyParams,
    vocab: &Vocabulary,
    context: &[TokenId],
    max_reason_len: usize,
    mut pick: impl FnMut(&[f64]) -> usize,
) -> Result<TokenSequence> {
    let mut seq = TokenSequence::from_context(context.to_vec());
    let mut state = PrefixState::from_tokens(params, context);
    let think = vocab.think();
    let lp = next_log_probs(params, &state)?;
    seq.logprobs.push(lp[think as usize]);
    seq.tokens.push(think);
    state.push(params, think);
    for _ in 0..=max_reason_len {
        if state.len() >= params.config().max_len {
            break;
        }
        let lp = next_log_probs(params, &state)?;
        let next = pick(&lp) as TokenId;
        seq.logprobs.push(lp[next as usize]);
        seq.tokens.push(next);
        state.push(params, next);
        if next == vocab.end_think() {
            break;
        }
    }
    Ok(seq)
}

/// Sample a reasoning trajectory after `context`.
///
/// The first generated token is always `<think>`; sampling then runs over
/// the whole vocabulary until `</think>` is drawn or `max_reason_len`
/// reasoning tokens have been produced. Recorded log-probabilities are the
/// policy's own (temperature 1).
pub fn sample_trajectory(
    params: &PolicyParams,
    vocab: &Vocabulary,
    context: &[TokenId],
    temperature: f64,
    max_reason_len: usize,
    seed: u64,
) -> Result<TokenSequence> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let mut rng = indexed_rng(seed, stream::ROLLOUT, 0);
    generate(params, vocab, context, max_reason_len, |lp| {
        sample_index(lp, temperature, rng.random::<f64>())
    })
}

/// Greedy (argmax) reasoning trajectory; ties go to the smaller token id.
pub fn greedy_trajectory(
    params: &PolicyParams,
    vocab: &Vocabulary,
    context: &[TokenId],
    max_reason_len: usize,
) -> Result<TokenSequence> {
    generate(params, vocab, context, max_reason_len, argmax)
}

/// Which SID tokens a beam may take at each step.
#[derive(Debug, Clone, Copy)]
pub enum SidConstraint<'a> {
    /// Any token of the current layer's family.
    LayerGrammar,
    /// Only continuations of assigned SIDs.
    Trie(&'a PrefixTrie),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub sid: SemanticId,
    pub tokens: [TokenId; SID_LEN],
    pub logprob: f64,
    /// 1-based position in the returned list.
    pub rank: usize,
}

struct Partial {
    codes: Vec<u32>,
    tokens: Vec<TokenId>,
    logprob: f64,
    state: PrefixState,
}

fn better(a: (f64, &[TokenId]), b: (f64, &[TokenId])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Beam search over the four SID positions after `prefix`.
///
/// Scores are raw cumulative log-probabilities under the full-vocabulary
/// softmax. Returns up to `width` complete hypotheses, best first; equal
/// scores are ordered by smaller token ids.
pub fn beam_search_sids(
    params: &PolicyParams,
    vocab: &Vocabulary,
    prefix: &[TokenId],
    width: usize,
    constraint: SidConstraint<'_>,
) -> Result<Vec<BeamHypothesis>> {
    if width == 0 {
        return Err(Error::InvalidArgument("beam width must be at least 1".into()));
    }
    let mut beams = vec![Partial {
        codes: Vec::new(),
        tokens: Vec::new(),
        logprob: 0.0,
        state: PrefixState::from_tokens(params, prefix),
    }];
    for layer in 0..SID_LEN {
        let mut candidates: Vec<(usize, u32, TokenId, f64)> = Vec::new();
        for (b, beam) in beams.iter().enumerate() {
            let lp = next_log_probs(params, &beam.state)?;
            let codes: Vec<u32> = match constraint {
                SidConstraint::LayerGrammar => (0..vocab.sid_sizes()[layer]).collect(),
                SidConstraint::Trie(trie) => {
                    let next = trie.valid_continuations(&beam.codes);
                    if next.is_empty() {
                        return Err(Error::Invariant(format!(
                            "trie prefix {:?} has no continuation",
                            beam.codes
                        )));
                    }
                    next
                }
            };
            for code in codes {
                let token = vocab.sid_token(layer, code).ok_or_else(|| {
                    Error::Invariant(format!("code {code} outside layer {layer} vocabulary"))
                })?;
                candidates.push((b, code, token, beam.logprob + lp[token as usize]));
            }
        }
        let key = |c: &(usize, u32, TokenId, f64)| {
            let mut t = beams[c.0].tokens.clone();
            t.push(c.2);
            (c.3, t)
        };
        let mut keyed: Vec<_> = candidates.iter().map(|c| (key(c), *c)).collect();
        keyed.sort_by(|a, b| better((a.0 .0, &a.0 .1), (b.0 .0, &b.0 .1)));
        keyed.truncate(width);
        beams = keyed
            .into_iter()
            .map(|((logprob, tokens), (b, code, token, _))| {
                let parent = &beams[b];
                let mut codes = parent.codes.clone();
                codes.push(code);
                let mut state = parent.state.clone();
                if layer + 1 < SID_LEN {
                    state.push(params, token);
                }
                Partial {
                    codes,
                    tokens,
                    logprob,
                    state,
                }
            })
            .collect();
    }
    Ok(beams
        .into_iter()
        .enumerate()
        .map(|(i, b)| BeamHypothesis {
            sid: SemanticId(b.codes.try_into().expect("four codes")),
            tokens: b.tokens.try_into().expect("four tokens"),
            logprob: b.logprob,
            rank: i + 1,
        })
        .collect())
}
