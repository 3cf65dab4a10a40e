//! Group-relative policy optimization with two-stage rollouts.
//!
//! For each context the policy samples `G` reasoning trajectories; each one
//! is then expanded by a width-`K` beam over SID tokens, giving `G * K`
//! scored rollouts. In rank-aware mode a trajectory's reward is the
//! rank-discounted mean of its beam rewards, and the policy gradient flows
//! through the trajectory together with its highest-reward beam. Plain mode
//! uses the top beam's reward and tokens instead.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{
    beam_search_sids, forward_span, log_prob, sample_trajectory, weighted_logprob_grad,
    BeamHypothesis, Optimizer, PolicyParams, SidConstraint, TokenId, TokenSequence, Vocabulary,
    WeightedSeq,
};
use crate::rewards::{total_reward, RewardBreakdown, RewardConfig};
use crate::rng::{derive_seed, indexed_rng, stream};
use crate::sidcodec::{SemanticId, SidAssignment};

/// Base of the logarithm in the rank discount `1 / (1 + log n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    Natural,
    Two,
}

impl LogBase {
    fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Two => x.log2(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Rank-aware reward over the beam and optimal-rollout selection.
    RankAware,
    /// Top-1 beam reward and rollout only.
    Top1,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::RankAware => "rgrpo",
            Mode::Top1 => "grpo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RgrpoConfig {
    pub group_size: usize,
    pub beam_width: usize,
    pub epsilon: f64,
    pub beta: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub log_base: LogBase,
    pub mode: Mode,
    /// Reasoning tokens sampled per trajectory before giving up.
    pub max_reason_len: usize,
    /// Contexts whose rollout groups are pooled into one update.
    pub contexts_per_step: usize,
    /// Passes over the RL dataset per stage.
    pub epochs: usize,
}

impl Default for RgrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            beam_width: 5,
            epsilon: 0.2,
            beta: 0.01,
            temperature: 1.0,
            learning_rate: 1e-4,
            log_base: LogBase::Natural,
            mode: Mode::RankAware,
            max_reason_len: 32,
            contexts_per_step: 4,
            epochs: 1,
        }
    }
}

impl RgrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if self.beam_width < 1 {
            return bad("beam_width must be at least 1");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.contexts_per_step == 0 {
            return bad("contexts_per_step must be at least 1");
        }
        Ok(())
    }
}

/// A context token sequence and the SID of the item it should retrieve.
#[derive(Debug, Clone, PartialEq)]
pub struct RlExample {
    pub context: Vec<TokenId>,
    pub target: SemanticId,
}

/// One sampled trajectory with its ranked beam and the beam rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sequence: TokenSequence,
    pub beams: Vec<BeamHypothesis>,
    pub rewards: Vec<RewardBreakdown>,
    /// Index into `beams` of the rollout the gradient flows through.
    pub optimal: usize,
    /// Aggregated reward of the trajectory.
    pub r_star: f64,
}

impl Trajectory {
    /// Trajectory tokens followed by the optimal beam's SID tokens.
    pub fn optimal_rollout(&self) -> TokenSequence {
        self.sequence.with_sid(&self.beams[self.optimal].tokens)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub context: Vec<TokenId>,
    pub target: SemanticId,
    pub trajectories: Vec<Trajectory>,
    pub advantages: Vec<f64>,
}

/// Index of the highest reward; ties keep the better (smaller) rank.
pub fn select_optimal(rewards: &[f64]) -> usize {
    let mut best = 0;
    for (i, r) in rewards.iter().enumerate() {
        if *r > rewards[best] {
            best = i;
        }
    }
    best
}

/// `sum_n r_n / (1 + log n) / W` with `W = sum_n 1 / (1 + log n)` over the
/// realized ranks `n = 1..=rewards.len()`.
pub fn rank_aware_reward(rewards: &[f64], base: LogBase) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, r) in rewards.iter().enumerate() {
        let w = 1.0 / (1.0 + base.log((i + 1) as f64));
        num += w * r;
        den += w;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Standardize with the population mean and standard deviation; all zeros
/// when the deviation is below `1e-8`.
pub fn compute_advantages(r_star: &[f64]) -> Vec<f64> {
    let n = r_star.len() as f64;
    let mean = r_star.iter().sum::<f64>() / n;
    let std = (r_star.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    if !(std >= 1e-8) {
        return vec![0.0; r_star.len()];
    }
    r_star.iter().map(|r| (r - mean) / std).collect()
}

fn population_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt()
}

/// Per-token `ratio - ln(ratio) - 1` with `ratio = M_ref(x_t) / M(x_t)` at
/// the realized tokens of `span`.
pub fn kl_penalty(
    policy: &PolicyParams,
    reference: &PolicyParams,
    tokens: &[TokenId],
    span: std::ops::Range<usize>,
) -> Result<Vec<f64>> {
    check_compatible(policy, reference)?;
    let lp = log_prob(policy, tokens, span.clone())?;
    let lr = log_prob(reference, tokens, span)?;
    Ok(lp
        .per_token
        .iter()
        .zip(&lr.per_token)
        .map(|(p, r)| k3(r - p))
        .collect())
}

fn k3(log_ratio: f64) -> f64 {
    (log_ratio.exp() - log_ratio - 1.0).max(0.0)
}

fn check_compatible(a: &PolicyParams, b: &PolicyParams) -> Result<()> {
    if a.vocab_hash() != b.vocab_hash() || a.num_params() != b.num_params() {
        return Err(Error::Config(format!(
            "policy snapshots disagree: vocabulary {:016x} vs {:016x}",
            a.vocab_hash(),
            b.vocab_hash()
        )));
    }
    Ok(())
}

/// Sample `G` trajectories, expand each with a layer-grammar beam of width
/// `K`, and score every rollout. Optimal rollouts, aggregated rewards and
/// advantages follow the configured mode.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    snapshot: &PolicyParams,
    vocab: &Vocabulary,
    example: &RlExample,
    assignment: &SidAssignment,
    rewards: &RewardConfig,
    config: &RgrpoConfig,
    seed: u64,
) -> Result<RolloutGroup> {
    snapshot.check_vocab(vocab)?;
    let trajectories: Vec<Result<Trajectory>> = (0..config.group_size)
        .into_par_iter()
        .map(|i| {
            let sequence = sample_trajectory(
                snapshot,
                vocab,
                &example.context,
                config.temperature,
                config.max_reason_len,
                derive_seed(seed, i as u64),
            )?;
            let beams = beam_search_sids(
                snapshot,
                vocab,
                &sequence.tokens,
                config.beam_width,
                SidConstraint::LayerGrammar,
            )?;
            let scored: Vec<RewardBreakdown> = beams
                .iter()
                .map(|b| {
                    let full = sequence.with_sid(&b.tokens);
                    total_reward(&full, &example.target, vocab, assignment, rewards)
                })
                .collect();
            let totals: Vec<f64> = scored.iter().map(|r| r.total).collect();
            let (optimal, r_star) = match config.mode {
                Mode::RankAware => (
                    select_optimal(&totals),
                    rank_aware_reward(&totals, config.log_base),
                ),
                Mode::Top1 => (0, totals[0]),
            };
            Ok(Trajectory {
                sequence,
                beams,
                rewards: scored,
                optimal,
                r_star,
            })
        })
        .collect();
    let trajectories = trajectories.into_iter().collect::<Result<Vec<_>>>()?;
    let r_star: Vec<f64> = trajectories.iter().map(|t| t.r_star).collect();
    Ok(RolloutGroup {
        context: example.context.clone(),
        target: example.target,
        advantages: compute_advantages(&r_star),
        trajectories,
    })
}

/// Per-update training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub step: usize,
    pub mode: String,
    pub mean_reward: f64,
    pub mean_r_star: f64,
    pub clip_frac: f64,
    pub kl: f64,
    pub advantage_std: f64,
    pub mean_ratio: f64,
}

/// One ascent step on the clipped surrogate minus the KL penalty, averaged
/// over the groups; each rollout's token terms are averaged over its scored
/// span (reasoning and SID tokens). Ratios are taken against `old`. When no
/// token carries any gradient the parameters are left untouched.
#[allow(clippy::too_many_arguments)]
pub fn rgrpo_update(
    policy: &mut PolicyParams,
    optimizer: &mut Optimizer,
    old: &PolicyParams,
    reference: &PolicyParams,
    groups: &[RolloutGroup],
    config: &RgrpoConfig,
    step: usize,
) -> Result<UpdateStats> {
    check_compatible(policy, old)?;
    check_compatible(policy, reference)?;
    if groups.is_empty() {
        return Err(Error::EmptyBatch);
    }
    struct Item {
        tokens: Vec<TokenId>,
        span: std::ops::Range<usize>,
        advantage: f64,
        scale: f64,
    }
    let mut items = Vec::new();
    for g in groups {
        let n = g.trajectories.len() as f64;
        for (t, &a) in g.trajectories.iter().zip(&g.advantages) {
            let seq = t.optimal_rollout();
            let span = seq.scored_span();
            let scale = 1.0 / (groups.len() as f64 * n * span.len() as f64);
            items.push(Item {
                tokens: seq.tokens,
                span,
                advantage: a,
                scale,
            });
        }
    }
    let per_item: Vec<Result<(WeightedSeq, usize, f64, f64)>> = items
        .into_par_iter()
        .map(|it| {
            let caches = forward_span(policy, &it.tokens, &it.span)?;
            let lp_old = log_prob(old, &it.tokens, it.span.clone())?.per_token;
            let lp_ref = log_prob(reference, &it.tokens, it.span.clone())?.per_token;
            let mut weights = Vec::with_capacity(it.span.len());
            let (mut clipped, mut kl, mut ratio_sum) = (0usize, 0.0, 0.0);
            for (k, t) in it.span.clone().enumerate() {
                let lp = caches[k].log_probs[it.tokens[t] as usize];
                let ratio = (lp - lp_old[k]).exp();
                ratio_sum += ratio;
                let a = it.advantage;
                let is_clipped = (a > 0.0 && ratio > 1.0 + config.epsilon)
                    || (a < 0.0 && ratio < 1.0 - config.epsilon);
                let surrogate = if is_clipped {
                    clipped += 1;
                    0.0
                } else {
                    ratio * a
                };
                let log_ref_ratio = lp_ref[k] - lp;
                kl += k3(log_ref_ratio);
                let kl_grad = 1.0 - log_ref_ratio.exp();
                // Loss = -objective, so the log-prob weight is negated.
                weights.push(-it.scale * (surrogate - config.beta * kl_grad));
            }
            Ok((
                WeightedSeq {
                    tokens: it.tokens,
                    span: it.span,
                    weights,
                },
                clipped,
                kl,
                ratio_sum,
            ))
        })
        .collect();
    let mut seqs = Vec::new();
    let (mut clipped, mut kl, mut ratio_sum, mut token_count) = (0usize, 0.0, 0.0, 0usize);
    for r in per_item {
        let (s, c, k, rs) = r?;
        clipped += c;
        kl += k;
        ratio_sum += rs;
        token_count += s.span.len();
        seqs.push(s);
    }
    if seqs.iter().any(|s| s.weights.iter().any(|w| *w != 0.0)) {
        let grad = weighted_logprob_grad(policy, &seqs)?;
        optimizer.step(policy, &grad, config.learning_rate);
    }

    let all_rewards: Vec<f64> = groups
        .iter()
        .flat_map(|g| g.trajectories.iter().flat_map(|t| t.rewards.iter().map(|r| r.total)))
        .collect();
    let r_star: Vec<f64> = groups
        .iter()
        .flat_map(|g| g.trajectories.iter().map(|t| t.r_star))
        .collect();
    let group_std = groups
        .iter()
        .map(|g| population_std(&g.trajectories.iter().map(|t| t.r_star).collect::<Vec<_>>()))
        .sum::<f64>()
        / groups.len() as f64;
    let tokens = token_count.max(1) as f64;
    Ok(UpdateStats {
        step,
        mode: config.mode.name().to_string(),
        mean_reward: all_rewards.iter().sum::<f64>() / all_rewards.len().max(1) as f64,
        mean_r_star: r_star.iter().sum::<f64>() / r_star.len().max(1) as f64,
        clip_frac: clipped as f64 / tokens,
        kl: kl / tokens,
        advantage_std: group_std,
        mean_ratio: ratio_sum / tokens,
    })
}

/// The plain group-relative ablation: identical machinery with each
/// trajectory rewarded and updated by its top-1 rollout only.
pub fn grpo_update(
    policy: &mut PolicyParams,
    optimizer: &mut Optimizer,
    old: &PolicyParams,
    reference: &PolicyParams,
    groups: &[RolloutGroup],
    config: &RgrpoConfig,
    step: usize,
) -> Result<UpdateStats> {
    let top1: Vec<RolloutGroup> = groups.iter().map(as_top1).collect();
    let cfg = RgrpoConfig {
        mode: Mode::Top1,
        ..config.clone()
    };
    rgrpo_update(policy, optimizer, old, reference, &top1, &cfg, step)
}

fn as_top1(group: &RolloutGroup) -> RolloutGroup {
    let mut g = group.clone();
    for t in &mut g.trajectories {
        t.optimal = 0;
        t.r_star = t.rewards[0].total;
    }
    let r: Vec<f64> = g.trajectories.iter().map(|t| t.r_star).collect();
    g.advantages = compute_advantages(&r);
    g
}

/// Run RL over `examples` for the configured number of epochs.
///
/// The reference policy is the policy at entry. Each step snapshots the
/// live policy as the rollout policy, rolls out `contexts_per_step`
/// examples and applies one update. Returns per-step statistics.
#[allow(clippy::too_many_arguments)]
pub fn train(
    policy: &mut PolicyParams,
    vocab: &Vocabulary,
    examples: &[RlExample],
    assignment: &SidAssignment,
    rewards: &RewardConfig,
    config: &RgrpoConfig,
    seed: u64,
    log: Option<&Path>,
) -> Result<Vec<UpdateStats>> {
    config.validate()?;
    rewards.validate()?;
    let reference = policy.snapshot();
    let mut optimizer = Optimizer::adam();
    let mut stats = Vec::new();
    let mut writer = match log {
        Some(p) => {
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent)?;
            }
            Some(std::io::BufWriter::new(std::fs::File::create(p)?))
        }
        None => None,
    };
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut rng = indexed_rng(seed, stream::SHUFFLE, epoch as u64);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(config.contexts_per_step) {
            let old = policy.snapshot();
            let groups = chunk
                .iter()
                .map(|&i| {
                    let s = derive_seed(seed, ((epoch as u64) << 32) | i as u64);
                    rollout(&old, vocab, &examples[i], assignment, rewards, config, s)
                })
                .collect::<Result<Vec<_>>>()?;
            let s = match config.mode {
                Mode::RankAware => {
                    rgrpo_update(policy, &mut optimizer, &old, &reference, &groups, config, step)?
                }
                Mode::Top1 => {
                    grpo_update(policy, &mut optimizer, &old, &reference, &groups, config, step)?
                }
            };
            if let Some(w) = writer.as_mut() {
                serde_json::to_writer(&mut *w, &s)?;
                w.write_all(b"\n")?;
            }
            stats.push(s);
            step += 1;
        }
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    Ok(stats)
}
