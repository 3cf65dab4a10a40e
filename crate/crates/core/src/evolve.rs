//! Alignment pre-training and the alternating RL/SFT self-evolution loop.
//!
//! Iteration `i` starts from the supervised checkpoint `sft_i`:
//!
//! 1. sample RL contexts from the training examples `sft_i` gets wrong,
//! 2. train `rl_i` from `sft_i` on them with the group-relative optimizer,
//! 3. collect every training example `rl_i` gets right, with its generated
//!    reasoning trajectory,
//! 4. fine-tune `rl_i` on those to obtain `sft_{i+1}`.
//!
//! "Right" means the top-1 item of greedy reasoning plus a width-1
//! trie-constrained beam equals the target.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{price_bands, serialize_item_context, Catalog, LabeledExample};
use crate::error::{Error, Result};
use crate::evalkit::{
    emit_report, evaluate, two_step_inference, EncodedExample, MetricsReport, SearchSpace,
    DEFAULT_NS,
};
use crate::policy::{
    sft_step, words, Optimizer, PolicyParams, SftExample, TokenId, TokenSequence, Vocabulary,
};
use crate::rewards::RewardConfig;
use crate::rgrpo::{self, Mode, RgrpoConfig, RlExample};
use crate::rng::{derive_seed, indexed_rng, stream};
use crate::sidcodec::SidAssignment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            learning_rate: 3e-3,
        }
    }
}

impl SftConfig {
    fn validate(&self, name: &str) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "{name}: batch_size and learning_rate must be positive"
            )));
        }
        Ok(())
    }
}

/// How a training example is judged solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correctness {
    Top1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolveConfig {
    pub n_iterations: usize,
    pub rl_sample_size: usize,
    /// Templated traces used for `sft_0`, sampled from the training set
    /// (clamped to its size).
    pub bootstrap_size: usize,
    pub correctness: Correctness,
    /// Alignment pre-training (item <-> SID and context -> SID).
    pub align: SftConfig,
    /// Fine-tuning on templated reasoning traces, producing `sft_0`.
    pub bootstrap: SftConfig,
    /// Fine-tuning on self-generated correct trajectories.
    pub sft: SftConfig,
    /// Skip every RL stage (iterative-SFT ablation).
    pub sft_only: bool,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            n_iterations: 3,
            rl_sample_size: 512,
            bootstrap_size: 512,
            correctness: Correctness::Top1,
            align: SftConfig::default(),
            bootstrap: SftConfig::default(),
            sft: SftConfig {
                epochs: 1,
                batch_size: 32,
                learning_rate: 1e-3,
            },
            sft_only: false,
        }
    }
}

impl EvolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rl_sample_size == 0 || self.bootstrap_size == 0 {
            return Err(Error::Config("rl_sample_size and bootstrap_size must be at least 1".into()));
        }
        self.align.validate("align")?;
        self.bootstrap.validate("bootstrap")?;
        self.sft.validate("sft")
    }
}

/// Shuffled mini-batch SFT for `cfg.epochs` epochs with a fresh optimizer.
/// Returns the mean batch loss of each epoch.
pub fn sft_train(
    params: &mut PolicyParams,
    examples: &[SftExample],
    cfg: &SftConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Ok(Vec::new());
    }
    let mut optimizer = Optimizer::adam();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut indexed_rng(seed, stream::SHUFFLE, epoch as u64));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SftExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            total += sft_step(params, &mut optimizer, &batch, cfg.learning_rate)?;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("sft epoch {epoch}: loss {mean:.4}");
        losses.push(mean);
    }
    Ok(losses)
}

/// Two examples per item: item context -> SID tokens, and SID tokens ->
/// item context followed by end-of-sequence.
pub fn build_alignment_examples(
    catalog: &Catalog,
    assignment: &SidAssignment,
    vocab: &Vocabulary,
) -> Result<Vec<SftExample>> {
    let mut out = Vec::with_capacity(2 * catalog.len());
    for item in catalog.items() {
        let sid = assignment.sid_of(item.item_id).ok_or_else(|| {
            Error::InvalidArgument(format!("item {} has no semantic id", item.item_id))
        })?;
        let sid_tokens = vocab
            .sid_tokens(&sid)
            .ok_or_else(|| Error::InvalidArgument(format!("SID {sid} outside the vocabulary")))?
            .to_vec();
        let ctx = vocab.encode(&serialize_item_context(item));
        out.push(SftExample {
            input: ctx.clone(),
            target: sid_tokens.clone(),
        });
        let mut target = ctx;
        target.push(vocab.eos());
        out.push(SftExample {
            input: sid_tokens,
            target,
        });
    }
    Ok(out)
}

fn sid_target(vocab: &Vocabulary, e: &EncodedExample) -> Vec<TokenId> {
    vocab
        .sid_tokens(&e.target_sid)
        .expect("assigned SIDs fit the vocabulary")
        .to_vec()
}

/// Serialized user context -> target SID tokens, without reasoning.
pub fn build_context2sid_examples(train: &[EncodedExample], vocab: &Vocabulary) -> Vec<SftExample> {
    train
        .iter()
        .map(|e| SftExample {
            input: e.context.clone(),
            target: sid_target(vocab, e),
        })
        .collect()
}

/// SFT over the union of the alignment and context-to-SID tasks. Returns
/// per-epoch losses.
pub fn align_pretrain(
    params: &mut PolicyParams,
    alignment: &[SftExample],
    context2sid: &[SftExample],
    cfg: &SftConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut all = alignment.to_vec();
    all.extend_from_slice(context2sid);
    sft_train(params, &all, cfg, seed)
}

const PRICE_WORDS: [&str; 3] = ["budget", "mid", "premium"];

fn majority(counts: &BTreeMap<u32, usize>) -> Option<u32> {
    counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(k, _)| *k)
}

/// Reasoning text for one example: the dominant category and brand of the
/// user's clicked history, the current query words and a price band.
///
/// The band comes from a price word in the query when present, otherwise
/// from the majority category-relative price band of clicked items.
pub fn trace_text(example: &LabeledExample, catalog: &Catalog, bands: &std::collections::HashMap<u32, u8>, max_reason_len: usize) -> String {
    let mut cats = BTreeMap::new();
    let mut brands = BTreeMap::new();
    let mut band_counts = BTreeMap::new();
    for event in &example.context.history {
        for id in &event.clicked_items {
            if let Some(item) = catalog.get(*id) {
                *cats.entry(item.category_id).or_default() += 1;
                *brands.entry(item.brand_id).or_default() += 1;
                if let Some(b) = bands.get(id) {
                    *band_counts.entry(*b as u32).or_default() += 1;
                }
            }
        }
    }
    let mut body: Vec<String> = vec!["history".into()];
    match (majority(&cats), majority(&brands)) {
        (Some(c), Some(b)) => {
            body.push(catalog.categories()[c as usize].clone());
            body.push(catalog.brands()[b as usize].clone());
        }
        _ => body.push("none".into()),
    }
    let query = words(&example.context.current_query.query_text);
    let band = if query.iter().any(|w| w == "cheap") {
        0
    } else if query.iter().any(|w| w == "luxury") {
        2
    } else {
        majority(&band_counts).unwrap_or(1) as usize
    };
    body.push("query".into());
    let tail = ["price".to_string(), PRICE_WORDS[band].to_string()];
    let room = max_reason_len.saturating_sub(body.len() + tail.len());
    body.extend(query.into_iter().take(room));
    body.extend(tail);
    body.truncate(max_reason_len);
    format!("<think> {} </think>", body.join(" "))
}

/// Context -> templated reasoning followed by the target SID.
pub fn bootstrap_traces(
    train: &[LabeledExample],
    encoded: &[EncodedExample],
    catalog: &Catalog,
    vocab: &Vocabulary,
    max_reason_len: usize,
) -> Vec<SftExample> {
    let bands = price_bands(catalog);
    train
        .iter()
        .zip(encoded)
        .map(|(raw, e)| {
            let mut target = vocab.encode(&trace_text(raw, catalog, &bands, max_reason_len));
            target.extend(sid_target(vocab, e));
            SftExample {
                input: e.context.clone(),
                target,
            }
        })
        .collect()
}

/// Examples split by whether two-step inference ranks the target first.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Solved examples with the trajectory that solved them.
    pub correct: Vec<(usize, TokenSequence)>,
    pub incorrect: Vec<usize>,
}

pub fn partition_by_correctness(
    params: &PolicyParams,
    space: &SearchSpace,
    examples: &[EncodedExample],
    max_reason_len: usize,
) -> Result<Partition> {
    params.check_vocab(&space.vocab)?;
    let outcomes: Vec<Result<(bool, TokenSequence)>> = examples
        .par_iter()
        .map(|e| {
            let r = two_step_inference(params, space, &e.context, 1, max_reason_len)?;
            Ok((r.items.first() == Some(&e.target_item), r.trajectory))
        })
        .collect();
    let mut part = Partition {
        correct: Vec::new(),
        incorrect: Vec::new(),
    };
    for (i, o) in outcomes.into_iter().enumerate() {
        match o? {
            (true, traj) => part.correct.push((i, traj)),
            (false, _) => part.incorrect.push(i),
        }
    }
    Ok(part)
}

/// Everything an evolution run needs besides the policy.
#[derive(Debug, Clone)]
pub struct EvolveSetup<'a> {
    pub space: &'a SearchSpace,
    pub train: &'a [EncodedExample],
    pub eval: &'a [EncodedExample],
    pub rewards: RewardConfig,
    pub rgrpo: RgrpoConfig,
    pub evolve: EvolveConfig,
    pub seed: u64,
    pub config_hash: String,
    /// Where checkpoints, logs and the curve go; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationState {
    pub iteration: usize,
    /// Indices into the training set.
    pub d_rl: Vec<usize>,
    pub d_sft: Vec<usize>,
    pub rl: PolicyParams,
    pub sft_next: PolicyParams,
    pub rl_metrics: CurvePoint,
    pub sft_metrics: CurvePoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub checkpoint: String,
    pub hr10: f64,
    pub ndcg10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageMeta {
    checkpoint: String,
    parent: Option<String>,
    parent_hash: Option<String>,
    params_hash: String,
    config_hash: String,
    subset: Vec<usize>,
    note: Option<String>,
    metrics: CurvePoint,
}

/// Stage outputs: parameters and the training subset that produced them.
struct Stage {
    params: PolicyParams,
    subset: Vec<usize>,
    note: Option<String>,
}

impl EvolveSetup<'_> {
    fn stage_dir(&self, name: &str) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join("ckpt").join(name))
    }

    fn evaluate(&self, params: &PolicyParams, name: &str) -> Result<MetricsReport> {
        evaluate(
            params,
            self.space,
            self.eval,
            &DEFAULT_NS,
            self.rgrpo.max_reason_len,
            name,
            &self.config_hash,
        )
    }

    fn resume(&self, name: &str, parent_hash: Option<&str>) -> Result<Option<(Stage, CurvePoint)>> {
        let Some(dir) = self.stage_dir(name) else {
            return Ok(None);
        };
        let (meta_path, params_path) = (dir.join("meta.json"), dir.join("params.bin"));
        if !meta_path.exists() || !params_path.exists() {
            return Ok(None);
        }
        let meta: StageMeta = serde_json::from_slice(&fs::read(&meta_path)?)?;
        if meta.config_hash != self.config_hash || meta.parent_hash.as_deref() != parent_hash {
            log::info!("{name}: stale checkpoint, recomputing");
            return Ok(None);
        }
        let params = PolicyParams::load(&params_path)?;
        if params.content_hash() != meta.params_hash {
            return Err(Error::format(params_path, "checkpoint hash does not match its metadata"));
        }
        log::info!("{name}: resumed from checkpoint");
        Ok(Some((
            Stage {
                params,
                subset: meta.subset,
                note: meta.note,
            },
            meta.metrics,
        )))
    }

    /// Run (or resume) one stage, snap it to checkpoint precision, evaluate
    /// and persist it.
    fn stage(
        &self,
        name: &str,
        parent: Option<(&str, &PolicyParams)>,
        compute: impl FnOnce() -> Result<Stage>,
    ) -> Result<(Stage, CurvePoint)> {
        let parent_hash = parent.map(|(_, p)| p.content_hash());
        if let Some(done) = self.resume(name, parent_hash.as_deref())? {
            return Ok(done);
        }
        let mut stage = compute()?;
        stage.params.round_to_f32();
        let report = self.evaluate(&stage.params, name)?;
        let point = CurvePoint {
            checkpoint: name.to_string(),
            hr10: report.hr(10),
            ndcg10: report.ndcg(10),
        };
        log::info!("{name}: hr@10 {:.4} ndcg@10 {:.4}", point.hr10, point.ndcg10);
        if let Some(dir) = self.stage_dir(name) {
            emit_report(&report, &dir.join("report.json"))?;
            stage.params.save(&dir.join("params.bin"))?;
            let meta = StageMeta {
                checkpoint: name.to_string(),
                parent: parent.map(|(n, _)| n.to_string()),
                parent_hash,
                params_hash: stage.params.content_hash(),
                config_hash: self.config_hash.clone(),
                subset: stage.subset.clone(),
                note: stage.note.clone(),
                metrics: point.clone(),
            };
            fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
        }
        Ok((stage, point))
    }

    fn rl_examples(&self, indices: &[usize]) -> Vec<RlExample> {
        indices
            .iter()
            .map(|&i| RlExample {
                context: self.train[i].context.clone(),
                target: self.train[i].target_sid,
            })
            .collect()
    }
}

fn sft_name(i: usize) -> String {
    format!("iter{i}_sft")
}

fn rl_name(i: usize) -> String {
    format!("iter{i}_rl")
}

/// One round: RL on sampled failures of `sft`, then SFT on the successes of
/// the RL policy.
pub fn evolve_iteration(
    sft: &PolicyParams,
    setup: &EvolveSetup<'_>,
    iteration: usize,
) -> Result<IterationState> {
    let space = setup.space;
    let max_reason_len = setup.rgrpo.max_reason_len;
    let iter_seed = derive_seed(setup.seed, 1000 + iteration as u64);
    let sft_label = sft_name(iteration);

    let (rl, rl_metrics) = setup.stage(&rl_name(iteration), Some((&sft_label, sft)), || {
        if setup.evolve.sft_only {
            return Ok(Stage {
                params: sft.clone(),
                subset: Vec::new(),
                note: Some("RL skipped: SFT-only mode".into()),
            });
        }
        let part = partition_by_correctness(sft, space, setup.train, max_reason_len)?;
        if part.incorrect.is_empty() {
            log::warn!("iteration {iteration}: no incorrect training examples, RL skipped");
            return Ok(Stage {
                params: sft.clone(),
                subset: Vec::new(),
                note: Some("RL skipped: no incorrect examples".into()),
            });
        }
        let take = setup.evolve.rl_sample_size.min(part.incorrect.len());
        let mut rng = indexed_rng(iter_seed, stream::RL_SAMPLE, 0);
        let mut d_rl: Vec<usize> = sample(&mut rng, part.incorrect.len(), take)
            .into_iter()
            .map(|k| part.incorrect[k])
            .collect();
        d_rl.sort_unstable();
        let mut params = sft.clone();
        let log = setup
            .stage_dir(&rl_name(iteration))
            .map(|d| d.join("train_log.jsonl"));
        rgrpo::train(
            &mut params,
            &space.vocab,
            &setup.rl_examples(&d_rl),
            &space.assignment,
            &setup.rewards,
            &setup.rgrpo,
            derive_seed(iter_seed, 1),
            log.as_deref(),
        )?;
        Ok(Stage {
            params,
            subset: d_rl,
            note: None,
        })
    })?;

    let rl_label = rl_name(iteration);
    let (next, sft_metrics) = setup.stage(
        &sft_name(iteration + 1),
        Some((&rl_label, &rl.params)),
        || {
            let part = partition_by_correctness(&rl.params, space, setup.train, max_reason_len)?;
            let examples: Vec<SftExample> = part
                .correct
                .iter()
                .map(|(i, traj)| {
                    let mut target = traj.generated().to_vec();
                    target.extend(sid_target(&space.vocab, &setup.train[*i]));
                    SftExample {
                        input: traj.context().to_vec(),
                        target,
                    }
                })
                .collect();
            let mut params = rl.params.clone();
            sft_train(&mut params, &examples, &setup.evolve.sft, derive_seed(iter_seed, 2))?;
            Ok(Stage {
                params,
                subset: part.correct.iter().map(|(i, _)| *i).collect(),
                note: None,
            })
        },
    )?;

    Ok(IterationState {
        iteration,
        d_rl: rl.subset,
        d_sft: next.subset,
        rl: rl.params,
        sft_next: next.params,
        rl_metrics,
        sft_metrics,
    })
}

#[derive(Debug, Clone)]
pub struct EvolutionResult {
    pub final_params: PolicyParams,
    pub sft0: PolicyParams,
    pub curve: Vec<CurvePoint>,
    pub iterations: Vec<IterationState>,
}

/// Sorted indices of the `size` traces used for `sft_0`.
pub fn bootstrap_subset(n_train: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut rng = indexed_rng(seed, stream::BOOTSTRAP, 0);
    let mut idx = sample(&mut rng, n_train, size.min(n_train)).into_vec();
    idx.sort_unstable();
    idx
}

/// Bootstrap SFT on a sampled subset of `traces` (`sft_0`), then
/// `n_iterations` rounds of [`evolve_iteration`]. `traces[i]` belongs to
/// training example `i`. The curve lists `sft_0`, then `rl_i` and
/// `sft_{i+1}` for every round.
pub fn run_self_evolution(
    aligned: &PolicyParams,
    traces: &[SftExample],
    setup: &EvolveSetup<'_>,
) -> Result<EvolutionResult> {
    setup.evolve.validate()?;
    setup.rgrpo.validate()?;
    setup.rewards.validate()?;
    let (sft0, point0) = setup.stage(&sft_name(0), Some(("align", aligned)), || {
        let subset = bootstrap_subset(traces.len(), setup.evolve.bootstrap_size, setup.seed);
        let chosen: Vec<SftExample> = subset.iter().map(|&i| traces[i].clone()).collect();
        let mut params = aligned.clone();
        sft_train(
            &mut params,
            &chosen,
            &setup.evolve.bootstrap,
            derive_seed(setup.seed, 999),
        )?;
        Ok(Stage {
            params,
            subset,
            note: None,
        })
    })?;
    let mut curve = vec![point0];
    let mut current = sft0.params.clone();
    let mut iterations = Vec::with_capacity(setup.evolve.n_iterations);
    for i in 0..setup.evolve.n_iterations {
        let state = evolve_iteration(&current, setup, i)?;
        curve.push(state.rl_metrics.clone());
        curve.push(state.sft_metrics.clone());
        current = state.sft_next.clone();
        iterations.push(state);
    }
    if let Some(dir) = &setup.out_dir {
        write_curve(&dir.join("curve.csv"), &curve)?;
    }
    Ok(EvolutionResult {
        final_params: current,
        sft0: sft0.params,
        curve,
        iterations,
    })
}

/// NDCG@10 and HR@10 of both RL modes trained from the same start on the
/// same sampled failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub rank_aware_ndcg10: f64,
    pub top1_ndcg10: f64,
    pub rank_aware_hr10: f64,
    pub top1_hr10: f64,
}

pub const ABLATION_HEADER: &str = "seed,rgrpo_ndcg@10,grpo_ndcg@10,rgrpo_hr@10,grpo_hr@10";

/// Paired comparison of rank-aware and top-1 RL: for each seed, sample the
/// RL set from the failures of `start`, train one RL stage per mode with
/// that seed and evaluate both.
pub fn rl_ablation(
    start: &PolicyParams,
    setup: &EvolveSetup<'_>,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let max_reason_len = setup.rgrpo.max_reason_len;
    let part = partition_by_correctness(start, setup.space, setup.train, max_reason_len)?;
    if part.incorrect.is_empty() {
        return Err(Error::Evaluation("no incorrect training examples to run RL on".into()));
    }
    let take = setup.evolve.rl_sample_size.min(part.incorrect.len());
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = indexed_rng(seed, stream::RL_SAMPLE, 0);
        let mut d_rl: Vec<usize> = sample(&mut rng, part.incorrect.len(), take)
            .into_iter()
            .map(|k| part.incorrect[k])
            .collect();
        d_rl.sort_unstable();
        let examples = setup.rl_examples(&d_rl);
        let mut scores = Vec::with_capacity(2);
        for mode in [Mode::RankAware, Mode::Top1] {
            let cfg = RgrpoConfig {
                mode,
                ..setup.rgrpo.clone()
            };
            let mut params = start.clone();
            let log = setup
                .out_dir
                .as_ref()
                .map(|d| d.join(format!("seed{seed}_{}_log.jsonl", mode.name())));
            rgrpo::train(
                &mut params,
                &setup.space.vocab,
                &examples,
                &setup.space.assignment,
                &setup.rewards,
                &cfg,
                derive_seed(seed, 7),
                log.as_deref(),
            )?;
            params.round_to_f32();
            let report = setup.evaluate(&params, &format!("seed{seed}_{}", mode.name()))?;
            log::info!(
                "ablation seed {seed} {}: ndcg@10 {:.4}",
                mode.name(),
                report.ndcg(10)
            );
            scores.push((report.ndcg(10), report.hr(10)));
        }
        rows.push(AblationRow {
            seed,
            rank_aware_ndcg10: scores[0].0,
            top1_ndcg10: scores[1].0,
            rank_aware_hr10: scores[0].1,
            top1_hr10: scores[1].1,
        });
    }
    Ok(rows)
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = format!("{ABLATION_HEADER}\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.seed, r.rank_aware_ndcg10, r.top1_ndcg10, r.rank_aware_hr10, r.top1_hr10
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

pub const CURVE_HEADER: &str = "checkpoint,hr@10,ndcg@10";

pub fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = format!("{CURVE_HEADER}\n");
    for p in curve {
        text.push_str(&format!("{},{},{}\n", p.checkpoint, p.hr10, p.ndcg10));
    }
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_catalog, generate_sessions};
    use crate::policy::build_vocabulary;
    use crate::sidcodec::SemanticId;

    #[test]
    fn alignment_has_two_examples_per_item() {
        let catalog = generate_catalog(1, 10, 3, 2).unwrap();
        let assignment = SidAssignment::from_pairs(
            catalog
                .items()
                .iter()
                .map(|i| (i.item_id, SemanticId([i.item_id % 3, 0, 0, i.item_id / 3]))),
        )
        .unwrap();
        let vocab = build_vocabulary(&catalog, &[3, 1, 1], assignment.max_dedup());
        let ex = build_alignment_examples(&catalog, &assignment, &vocab).unwrap();
        assert_eq!(ex.len(), 20);
        let item = &catalog.items()[4];
        let sid = vocab.sid_tokens(&assignment.sid_of(item.item_id).unwrap()).unwrap().to_vec();
        let ctx = vocab.encode(&serialize_item_context(item));
        assert!(ex.iter().any(|e| e.input == ctx && e.target == sid));
        let back = ex.iter().find(|e| e.input == sid).unwrap();
        assert_eq!(&back.target[..back.target.len() - 1], &ctx[..]);
        assert_eq!(*back.target.last().unwrap(), vocab.eos());
    }

    #[test]
    fn traces_are_well_formed_and_bounded() {
        let catalog = generate_catalog(2, 40, 5, 4).unwrap();
        let sessions = generate_sessions(&catalog, 2, 30, 10, 0.0).unwrap();
        let bands = price_bands(&catalog);
        for e in &sessions {
            let text = trace_text(e, &catalog, &bands, 12);
            assert!(text.starts_with("<think> history "));
            assert!(text.ends_with(" </think>"));
            let inner = text.trim_start_matches("<think> ").trim_end_matches(" </think>");
            assert!(inner.split(' ').count() <= 12);
            if e.context.history.iter().all(|h| h.clicked_items.is_empty()) {
                assert!(inner.starts_with("history none"));
            }
        }
    }
}
