//! A compact autoregressive policy over text, think-marker and SID tokens.

mod decode;
mod model;
mod train;
mod vocab;

pub use decode::{
    beam_search_sids, greedy_trajectory, sample_trajectory, BeamHypothesis, SidConstraint,
    TokenSequence,
};
pub use model::{
    forward_logits, log_prob, log_softmax, next_log_probs, LogProbs, PolicyConfig, PolicyParams,
    PrefixState, Snapshot,
};
pub use train::{
    gradient_check, sft_loss_and_grad, sft_step, Optimizer, OptimizerKind, SftExample,
};
pub use vocab::{build_vocabulary, words, TokenFamily, TokenId, Vocabulary, END_THINK, EOS, THINK, UNK};

pub(crate) use model::forward_span;
pub(crate) use train::{weighted_logprob_grad, WeightedSeq};
