//! Two-step inference and ranking metrics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{serialize_user_context, Catalog, ItemId, LabeledExample, UserId};
use crate::error::{Error, Result};
use crate::policy::{
    beam_search_sids, greedy_trajectory, words, PolicyParams, SidConstraint, TokenId,
    TokenSequence, Vocabulary,
};
use crate::sidcodec::{build_trie, PrefixTrie, SemanticId, SidAssignment};

pub const DEFAULT_NS: [usize; 3] = [1, 5, 10];
pub const CSV_HEADER: &str = "checkpoint,config_hash,group,n,hr@10,ndcg@10";
const GROUP_LABELS: [&str; 3] = ["low", "mid", "high"];

/// The item space decoding runs in: vocabulary, SID assignment and trie.
#[derive(Debug, Clone)]
pub struct SearchSpace {
    pub vocab: Vocabulary,
    pub assignment: SidAssignment,
    pub trie: PrefixTrie,
}

impl SearchSpace {
    pub fn new(vocab: Vocabulary, assignment: SidAssignment) -> Result<Self> {
        let trie = build_trie(&assignment)?;
        Ok(Self {
            vocab,
            assignment,
            trie,
        })
    }

    pub fn encode_context(&self, example: &LabeledExample) -> Vec<TokenId> {
        self.vocab.encode(&serialize_user_context(&example.context))
    }

    pub fn target_sid(&self, example: &LabeledExample) -> Result<SemanticId> {
        self.assignment.sid_of(example.target_item).ok_or_else(|| {
            Error::InvalidArgument(format!("item {} has no semantic id", example.target_item))
        })
    }
}

/// An example in token form, ready for decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub user_id: UserId,
    pub history_len: usize,
    pub context: Vec<TokenId>,
    pub target_item: ItemId,
    pub target_sid: SemanticId,
}

pub fn encode_examples(space: &SearchSpace, examples: &[LabeledExample]) -> Result<Vec<EncodedExample>> {
    examples
        .par_iter()
        .map(|e| {
            Ok(EncodedExample {
                user_id: e.context.user_id,
                history_len: e.context.history.len(),
                context: space.encode_context(e),
                target_item: e.target_item,
                target_sid: space.target_sid(e)?,
            })
        })
        .collect()
}

/// Result of two-step inference: the reasoning trajectory and the ranked
/// items it led to.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub trajectory: TokenSequence,
    pub items: Vec<ItemId>,
    pub sids: Vec<SemanticId>,
}

/// Greedy reasoning trajectory, then a trie-constrained beam of width `n`
/// over (context + trajectory); beams are decoded to items.
pub fn two_step_inference(
    params: &PolicyParams,
    space: &SearchSpace,
    context: &[TokenId],
    n: usize,
    max_reason_len: usize,
) -> Result<Inference> {
    let trajectory = greedy_trajectory(params, &space.vocab, context, max_reason_len)?;
    let beams = beam_search_sids(
        params,
        &space.vocab,
        &trajectory.tokens,
        n,
        SidConstraint::Trie(&space.trie),
    )?;
    let mut items = Vec::with_capacity(beams.len());
    let mut sids = Vec::with_capacity(beams.len());
    for b in beams {
        let item = space
            .assignment
            .decode(&b.sid)
            .ok_or_else(|| Error::Invariant(format!("trie produced unassigned SID {}", b.sid)))?;
        items.push(item);
        sids.push(b.sid);
    }
    Ok(Inference {
        trajectory,
        items,
        sids,
    })
}

fn rank_of(ranked: &[ItemId], target: ItemId, n: usize) -> Option<usize> {
    ranked.iter().take(n).position(|&i| i == target).map(|p| p + 1)
}

pub fn hit_rate_at(ranked: &[ItemId], target: ItemId, n: usize) -> f64 {
    if rank_of(ranked, target, n).is_some() {
        1.0
    } else {
        0.0
    }
}

/// `1 / log2(rank + 1)` when the target is within the top `n`, else 0.
pub fn ndcg_at(ranked: &[ItemId], target: ItemId, n: usize) -> f64 {
    match rank_of(ranked, target, n) {
        Some(r) => 1.0 / ((r + 1) as f64).log2(),
        None => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub label: String,
    pub n: usize,
    pub hr10: f64,
    pub ndcg10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub checkpoint: String,
    pub config_hash: String,
    pub n_examples: usize,
    pub metrics: Metrics,
    pub groups: Vec<GroupMetrics>,
}

impl MetricsReport {
    pub fn hr(&self, n: usize) -> f64 {
        self.metrics.hr.get(&n).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg(&self, n: usize) -> f64 {
        self.metrics.ndcg.get(&n).copied().unwrap_or(f64::NAN)
    }

    /// One CSV row per group plus the overall row, under [`CSV_HEADER`].
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        let mut row = |group: &str, n: usize, hr: f64, ndcg: f64| {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                self.checkpoint, self.config_hash, group, n, hr, ndcg
            );
        };
        row("overall", self.n_examples, self.hr(10), self.ndcg(10));
        for g in &self.groups {
            row(&g.label, g.n, g.hr10, g.ndcg10);
        }
        out
    }
}

/// A tercile of users by history length.
#[derive(Debug, Clone, PartialEq)]
pub struct UserGroup {
    pub label: &'static str,
    pub min_history: usize,
    pub max_history: usize,
    /// Indices into the grouped example list.
    pub members: Vec<usize>,
}

/// Split examples into three near-equal groups by history length.
///
/// Examples are ordered by (history length, user id) and cut into
/// consecutive thirds whose sizes differ by at most one.
pub fn group_by_history_length(examples: &[EncodedExample]) -> Result<Vec<UserGroup>> {
    let users: HashSet<UserId> = examples.iter().map(|e| e.user_id).collect();
    if users.len() < 3 {
        return Err(Error::Grouping(format!(
            "need at least 3 users, found {}",
            users.len()
        )));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| (examples[i].history_len, examples[i].user_id, i));
    let n = order.len();
    let mut groups = Vec::with_capacity(3);
    let mut start = 0;
    for (g, label) in GROUP_LABELS.iter().enumerate() {
        let size = n / 3 + usize::from(g < n % 3);
        let members: Vec<usize> = order[start..start + size].to_vec();
        start += size;
        let hist = |i: &usize| examples[*i].history_len;
        groups.push(UserGroup {
            label,
            min_history: members.iter().map(hist).min().unwrap_or(0),
            max_history: members.iter().map(hist).max().unwrap_or(0),
            members,
        });
    }
    Ok(groups)
}

/// Metrics of precomputed rankings. `groups` adds a per-group breakdown at
/// N = 10.
pub fn score_rankings(
    rankings: &[Vec<ItemId>],
    examples: &[EncodedExample],
    ns: &[usize],
    checkpoint: &str,
    config_hash: &str,
) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::Evaluation("empty evaluation set".into()));
    }
    if ns.is_empty() || ns.contains(&0) {
        return Err(Error::Evaluation("cutoffs must be at least 1".into()));
    }
    let mean = |f: &dyn Fn(&[ItemId], ItemId) -> f64, members: &mut dyn Iterator<Item = usize>| {
        let mut total = 0.0;
        let mut k = 0usize;
        for i in members {
            total += f(&rankings[i], examples[i].target_item);
            k += 1;
        }
        (total / k.max(1) as f64, k)
    };
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &n in ns {
        hr.insert(n, mean(&|r, t| hit_rate_at(r, t, n), &mut (0..examples.len())).0);
        ndcg.insert(n, mean(&|r, t| ndcg_at(r, t, n), &mut (0..examples.len())).0);
    }
    let groups = match group_by_history_length(examples) {
        Ok(groups) => groups
            .into_iter()
            .map(|g| {
                let (hr10, n) = mean(&|r, t| hit_rate_at(r, t, 10), &mut g.members.iter().copied());
                let (ndcg10, _) = mean(&|r, t| ndcg_at(r, t, 10), &mut g.members.iter().copied());
                GroupMetrics {
                    label: g.label.to_string(),
                    n,
                    hr10,
                    ndcg10,
                }
            })
            .collect(),
        Err(_) => Vec::new(),
    };
    Ok(MetricsReport {
        checkpoint: checkpoint.to_string(),
        config_hash: config_hash.to_string(),
        n_examples: examples.len(),
        metrics: Metrics { hr, ndcg },
        groups,
    })
}

/// Rankings of every example under two-step inference with beam width
/// `max(ns)`.
pub fn rank_examples(
    params: &PolicyParams,
    space: &SearchSpace,
    examples: &[EncodedExample],
    width: usize,
    max_reason_len: usize,
) -> Result<Vec<Vec<ItemId>>> {
    params.check_vocab(&space.vocab)?;
    examples
        .par_iter()
        .map(|e| two_step_inference(params, space, &e.context, width, max_reason_len).map(|r| r.items))
        .collect()
}

/// Mean HR@N and NDCG@N of the policy over `examples`.
pub fn evaluate(
    params: &PolicyParams,
    space: &SearchSpace,
    examples: &[EncodedExample],
    ns: &[usize],
    max_reason_len: usize,
    checkpoint: &str,
    config_hash: &str,
) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::Evaluation("empty evaluation set".into()));
    }
    let width = ns.iter().copied().max().unwrap_or(1);
    let rankings = rank_examples(params, space, examples, width, max_reason_len)?;
    score_rankings(&rankings, examples, ns, checkpoint, config_hash)
}

/// All catalog items by descending target frequency in `train`, then by
/// ascending item id.
pub fn popularity_baseline(train: &[LabeledExample], catalog: &Catalog) -> Vec<ItemId> {
    let mut freq: HashMap<ItemId, usize> = HashMap::new();
    for e in train {
        *freq.entry(e.target_item).or_default() += 1;
    }
    let mut items: Vec<ItemId> = catalog.items().iter().map(|i| i.item_id).collect();
    items.sort_by_key(|i| (std::cmp::Reverse(freq.get(i).copied().unwrap_or(0)), *i));
    items
}

/// Items by the number of distinct current-query words found in their
/// title, ties broken by the popularity order.
pub fn lexical_baseline(query: &str, catalog: &Catalog, popularity: &[ItemId]) -> Vec<ItemId> {
    let q: HashSet<String> = words(query).into_iter().collect();
    let mut scored: Vec<(usize, usize, ItemId)> = popularity
        .iter()
        .enumerate()
        .filter_map(|(pop_rank, &id)| {
            let item = catalog.get(id)?;
            let title: HashSet<String> = words(&item.title).into_iter().collect();
            Some((title.intersection(&q).count(), pop_rank, id))
        })
        .collect();
    scored.sort_by_key(|&(overlap, pop_rank, _)| (std::cmp::Reverse(overlap), pop_rank));
    scored.into_iter().map(|(_, _, id)| id).collect()
}

/// Write the report as pretty JSON at `path` and its CSV rows next to it
/// (same stem, `.csv`). Returns both paths.
pub fn emit_report(report: &MetricsReport, path: &Path) -> Result<(PathBuf, PathBuf)> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    fs::write(path, json)?;
    let csv_path = path.with_extension("csv");
    fs::write(&csv_path, format!("{CSV_HEADER}\n{}", report.csv_rows()))?;
    Ok((path.to_path_buf(), csv_path))
}
