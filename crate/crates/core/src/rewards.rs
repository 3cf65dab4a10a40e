//! Format and outcome rewards for a reasoning-then-SID generation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{TokenSequence, Vocabulary};
use crate::sidcodec::{SemanticId, SidAssignment, QUANT_LAYERS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Per-layer weights for partial SID matches.
    pub w: [f64; QUANT_LAYERS],
    /// Reasoning length (tokens) that earns the full length reward.
    pub max_len: usize,
    /// Only credit a layer when every coarser layer also matches.
    pub prefix_gated: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            w: [0.5, 0.3, 0.2],
            max_len: 256,
            prefix_gated: false,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("reward weights must be finite and non-negative".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("reward max_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub structure: f64,
    pub length: f64,
    pub sid_acc: f64,
    pub sid_val: f64,
    pub total: f64,
}

/// 0 when `<think>` and `</think>` both follow the context in that order,
/// otherwise -1.
pub fn r_structure(seq: &TokenSequence, vocab: &Vocabulary) -> f64 {
    if seq.reasoning_span(vocab).is_some() {
        0.0
    } else {
        -1.0
    }
}

/// `min(1, n / max_len)` for `n` tokens strictly inside the think markers.
pub fn r_length(seq: &TokenSequence, vocab: &Vocabulary, max_len: usize) -> f64 {
    match seq.reasoning_span(vocab) {
        Some(span) => (span.len() as f64 / max_len.max(1) as f64).min(1.0),
        None => 0.0,
    }
}

/// Weighted count of matching quantization codes; the dedup code is ignored.
pub fn r_sid_acc(pred: &SemanticId, target: &SemanticId, w: &[f64; QUANT_LAYERS], prefix_gated: bool) -> f64 {
    let mut total = 0.0;
    for l in 0..QUANT_LAYERS {
        if pred.0[l] == target.0[l] {
            total += w[l];
        } else if prefix_gated {
            break;
        }
    }
    total
}

/// 1 when the tokens form a SID assigned to some item.
pub fn r_sid_val(sid_tokens: &[u32], vocab: &Vocabulary, assignment: &SidAssignment) -> f64 {
    match vocab.sid_from_tokens(sid_tokens) {
        Some(sid) if assignment.decode(&sid).is_some() => 1.0,
        _ => 0.0,
    }
}

/// All four components and their sum for a completed sequence.
///
/// The predicted SID is read from `seq.sid`; a missing or malformed SID span
/// earns no accuracy or validity credit.
pub fn total_reward(
    seq: &TokenSequence,
    target: &SemanticId,
    vocab: &Vocabulary,
    assignment: &SidAssignment,
    config: &RewardConfig,
) -> RewardBreakdown {
    let structure = r_structure(seq, vocab);
    let length = r_length(seq, vocab, config.max_len);
    let sid_tokens = seq.sid_tokens().unwrap_or(&[]);
    let (sid_acc, sid_val) = match vocab.sid_from_tokens(sid_tokens) {
        Some(pred) => (
            r_sid_acc(&pred, target, &config.w, config.prefix_gated),
            r_sid_val(sid_tokens, vocab, assignment),
        ),
        None => (0.0, 0.0),
    };
    RewardBreakdown {
        structure,
        length,
        sid_acc,
        sid_val,
        total: structure + length + sid_acc + sid_val,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_catalog;
    use crate::policy::build_vocabulary;

    fn fixture() -> (Vocabulary, SidAssignment) {
        let catalog = generate_catalog(3, 20, 4, 3).unwrap();
        let vocab = build_vocabulary(&catalog, &[4, 4, 4], 1);
        let assignment = SidAssignment::from_pairs([
            (0, SemanticId([1, 2, 3, 0])),
            (1, SemanticId([1, 0, 0, 0])),
        ])
        .unwrap();
        (vocab, assignment)
    }

    fn seq(vocab: &Vocabulary, generated: &str) -> TokenSequence {
        let mut s = TokenSequence::from_context(vocab.encode("red phone"));
        let gen = vocab.encode(generated);
        let sid_start = gen.iter().position(|&t| vocab.sid_code(t).is_some());
        s.tokens.extend(&gen);
        if let Some(p) = sid_start {
            s.sid = Some(s.context_len + p..s.tokens.len());
        }
        s
    }

    #[test]
    fn structure_cases() {
        let (v, _) = fixture();
        assert_eq!(r_structure(&seq(&v, "<think> red </think><a_1><b_2><c_3><d_0>"), &v), 0.0);
        assert_eq!(r_structure(&seq(&v, "<think> red <a_1><b_2><c_3><d_0>"), &v), -1.0);
        assert_eq!(r_structure(&seq(&v, "</think> red <think><a_1>"), &v), -1.0);
    }

    #[test]
    fn length_cases() {
        let (v, _) = fixture();
        let s = seq(&v, "<think> red blue red blue </think>");
        assert_eq!(r_length(&s, &v, 4), 1.0);
        assert_eq!(r_length(&s, &v, 8), 0.5);
        assert_eq!(r_length(&s, &v, 2), 1.0);
        assert_eq!(r_length(&seq(&v, "red blue"), &v, 2), 0.0);
    }

    #[test]
    fn accuracy_cases() {
        let w = [0.5, 0.3, 0.2];
        let t = SemanticId([1, 2, 3, 0]);
        assert!((r_sid_acc(&t, &t, &w, false) - 1.0).abs() < 1e-12);
        assert!((r_sid_acc(&SemanticId([1, 0, 0, 0]), &t, &w, false) - 0.5).abs() < 1e-12);
        assert!((r_sid_acc(&SemanticId([1, 2, 0, 5]), &t, &w, false) - 0.8).abs() < 1e-12);
        assert!((r_sid_acc(&SemanticId([0, 2, 3, 0]), &t, &w, false) - 0.5).abs() < 1e-12);
        assert_eq!(r_sid_acc(&SemanticId([0, 2, 3, 0]), &t, &w, true), 0.0);
    }

    #[test]
    fn validity_cases() {
        let (v, a) = fixture();
        assert_eq!(r_sid_val(&v.encode("<a_1><b_2><c_3><d_0>"), &v, &a), 1.0);
        assert_eq!(r_sid_val(&v.encode("<a_1><b_2><c_3><d_1>"), &v, &a), 0.0);
        assert_eq!(r_sid_val(&v.encode("<a_1><b_2><c_3>"), &v, &a), 0.0);
    }

    #[test]
    fn totals() {
        let (v, a) = fixture();
        let cfg = RewardConfig {
            max_len: 2,
            ..RewardConfig::default()
        };
        let target = SemanticId([1, 2, 3, 0]);
        let perfect = total_reward(&seq(&v, "<think> red blue </think><a_1><b_2><c_3><d_0>"), &target, &v, &a, &cfg);
        assert!((perfect.total - 3.0).abs() < 1e-12);
        let worst = total_reward(&seq(&v, "red <a_3><b_3><c_2><d_1>"), &target, &v, &a, &cfg);
        assert!((worst.total + 1.0).abs() < 1e-12);
        let mid_cfg = RewardConfig {
            max_len: 4,
            ..RewardConfig::default()
        };
        let mid = total_reward(&seq(&v, "<think> red blue </think><a_1><b_0><c_0><d_0>"), &target, &v, &a, &mid_cfg);
        assert!((mid.total - 2.0).abs() < 1e-12, "{mid:?}");
    }
}
