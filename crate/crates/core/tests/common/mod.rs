#![allow(dead_code)]

use sidsearch::corpus::generate_catalog;
use sidsearch::policy::{
    build_vocabulary, log_prob, BeamHypothesis, PolicyConfig, PolicyParams, TokenId, TokenSequence,
    Vocabulary,
};
use sidsearch::rewards::RewardBreakdown;
use sidsearch::rgrpo::{
    compute_advantages, rank_aware_reward, select_optimal, LogBase, Mode, RolloutGroup, Trajectory,
};
use sidsearch::sidcodec::SemanticId;

pub fn toy(seed: u64) -> (Vocabulary, PolicyParams) {
    toy_scaled(seed, 0.5)
}

pub fn toy_scaled(seed: u64, out_scale: f64) -> (Vocabulary, PolicyParams) {
    let catalog = generate_catalog(3, 30, 5, 4).unwrap();
    let vocab = build_vocabulary(&catalog, &[4, 3, 3], 1);
    let cfg = PolicyConfig {
        d_model: 8,
        max_len: 64,
        recency_decay: 0.8,
    };
    (vocab.clone(), PolicyParams::with_output_scale(cfg, &vocab, seed, out_scale))
}

/// `<think> word </think>` after `ctx`, with one beam per SID in `sids`
/// scored by `totals`.
pub fn trajectory(vocab: &Vocabulary, ctx: &[TokenId], word: &str, sids: &[[u32; 4]], totals: &[f64], mode: Mode) -> Trajectory {
    let mut sequence = TokenSequence::from_context(ctx.to_vec());
    sequence.tokens.push(vocab.think());
    sequence.tokens.extend(vocab.encode(word));
    sequence.tokens.push(vocab.end_think());
    let beams: Vec<BeamHypothesis> = sids
        .iter()
        .enumerate()
        .map(|(n, codes)| {
            let sid = SemanticId(*codes);
            BeamHypothesis {
                sid,
                tokens: vocab.sid_tokens(&sid).unwrap(),
                logprob: -(n as f64),
                rank: n + 1,
            }
        })
        .collect();
    let rewards = totals
        .iter()
        .map(|&t| RewardBreakdown {
            structure: 0.0,
            length: 0.0,
            sid_acc: t,
            sid_val: 0.0,
            total: t,
        })
        .collect();
    let (optimal, r_star) = match mode {
        Mode::RankAware => (select_optimal(totals), rank_aware_reward(totals, LogBase::Natural)),
        Mode::Top1 => (0, totals[0]),
    };
    Trajectory {
        sequence,
        beams,
        rewards,
        optimal,
        r_star,
    }
}

pub fn group(ctx: &[TokenId], trajectories: Vec<Trajectory>) -> RolloutGroup {
    let r: Vec<f64> = trajectories.iter().map(|t| t.r_star).collect();
    RolloutGroup {
        context: ctx.to_vec(),
        target: SemanticId([0, 0, 0, 0]),
        advantages: compute_advantages(&r),
        trajectories,
    }
}

pub fn seq_logprob(p: &PolicyParams, t: &Trajectory) -> f64 {
    let seq = t.optimal_rollout();
    log_prob(p, &seq.tokens, seq.scored_span()).unwrap().sum
}

pub fn sign_group(vocab: &Vocabulary) -> RolloutGroup {
    let ctx = vocab.encode("young female north red phone");
    let t = |w: &str, sid: [u32; 4], r: f64| trajectory(vocab, &ctx, w, &[sid], &[r], Mode::RankAware);
    group(
        &ctx,
        vec![
            t("red", [0, 1, 2, 0], 3.0),
            t("phone", [1, 0, 0, 0], 1.0),
            t("cheap", [2, 2, 1, 0], 2.0),
            t("blue", [3, 1, 0, 0], 0.0),
        ],
    )
}
