//! Command pipeline over one output directory.
//!
//! ```text
//! gen-data -> build-sids -> align -> evolve -> evaluate -> report
//!                                          \-> ablate-rl -/
//! ```
//!
//! Each stage writes into its own subdirectory together with a `stamp.json`
//! naming the config hash it ran under. A stage refuses to start when an
//! input is missing or was stamped by a different configuration.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{generate_catalog, generate_sessions, read_corpus, split_dataset, write_corpus, Catalog, LabeledExample};
use crate::embedder::embed_catalog;
use crate::error::{Error, Result};
use crate::evalkit::{
    emit_report, encode_examples, evaluate, lexical_baseline, popularity_baseline, score_rankings,
    EncodedExample, MetricsReport, SearchSpace,
};
use crate::evolve::{
    align_pretrain, bootstrap_traces, build_alignment_examples, build_context2sid_examples,
    rl_ablation, run_self_evolution, write_ablation, AblationRow, CurvePoint,
    EvolveSetup,
};
use crate::policy::{build_vocabulary, PolicyParams, Vocabulary};
use crate::rng::derive_seed;
use crate::sidcodec::{assign_sids, build_codebook, SidAssignment, QUANT_LAYERS};

#[derive(Debug, Parser)]
#[command(name = "sidsearch", version, about = "Generative item search over semantic IDs")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--override corpus.noise=0.1`.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory shared by all stages.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate the catalog and the train/eval sessions.
    GenData,
    /// Embed items, fit the residual codebook, assign SIDs, build the vocabulary.
    BuildSids,
    /// Alignment pre-training from a fresh policy.
    Align,
    /// Bootstrap SFT and the alternating RL/SFT loop (resumes).
    Evolve,
    /// Evaluate a checkpoint and the baselines on the eval split.
    Evaluate {
        /// Policy checkpoint; defaults to the final evolved policy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Paired rank-aware vs top-1 RL comparison from the first SFT checkpoint.
    AblateRl,
    /// Summarize all stage outputs.
    Report,
}

#[derive(Debug, Serialize, Deserialize)]
struct Stamp {
    stage: String,
    config_hash: String,
}

/// Paths of every artifact in an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn catalog(&self) -> PathBuf {
        self.data().join("catalog.jsonl")
    }
    pub fn train(&self) -> PathBuf {
        self.data().join("train.jsonl")
    }
    pub fn eval(&self) -> PathBuf {
        self.data().join("eval.jsonl")
    }
    pub fn sids(&self) -> PathBuf {
        self.root.join("sids")
    }
    pub fn codebook(&self) -> PathBuf {
        self.sids().join("codebook.bin")
    }
    pub fn assignment(&self) -> PathBuf {
        self.sids().join("sids.jsonl")
    }
    pub fn vocab(&self) -> PathBuf {
        self.sids().join("vocab.jsonl")
    }
    pub fn align(&self) -> PathBuf {
        self.root.join("align")
    }
    pub fn aligned_params(&self) -> PathBuf {
        self.align().join("params.bin")
    }
    pub fn evolve(&self) -> PathBuf {
        self.root.join("evolve")
    }
    pub fn first_sft(&self) -> PathBuf {
        self.evolve().join("ckpt").join("iter0_sft").join("params.bin")
    }
    pub fn final_params(&self) -> PathBuf {
        self.evolve().join("final.bin")
    }
    pub fn curve(&self) -> PathBuf {
        self.evolve().join("curve.csv")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn report(&self) -> PathBuf {
        self.eval_dir().join("report.json")
    }
    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation")
    }
    pub fn ablation_table(&self) -> PathBuf {
        self.ablation().join("table.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
}

fn write_stamp(dir: &Path, stage: &str, hash: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let stamp = Stamp {
        stage: stage.to_string(),
        config_hash: hash.to_string(),
    };
    fs::write(dir.join("stamp.json"), serde_json::to_string_pretty(&stamp)? + "\n")?;
    Ok(())
}

/// Check that `files` exist and that `dir` was stamped under `hash`.
fn require(dir: &Path, files: &[PathBuf], stage: &'static str, hash: &str) -> Result<()> {
    for f in files {
        if !f.exists() {
            return Err(Error::MissingDependency {
                path: f.clone(),
                stage,
            });
        }
    }
    let stamp_path = dir.join("stamp.json");
    if !stamp_path.exists() {
        return Err(Error::MissingDependency {
            path: stamp_path,
            stage,
        });
    }
    let stamp: Stamp = serde_json::from_slice(&fs::read(&stamp_path)?)?;
    if stamp.config_hash != hash {
        return Err(Error::HashMismatch {
            path: stamp_path,
            found: stamp.config_hash,
            expected: hash.to_string(),
        });
    }
    Ok(())
}

/// Exclusive hold on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        let path = root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Loaded inputs shared by the training and evaluation stages.
pub struct Workspace {
    pub catalog: Catalog,
    pub train: Vec<LabeledExample>,
    pub eval: Vec<LabeledExample>,
    pub space: SearchSpace,
    pub train_encoded: Vec<EncodedExample>,
    pub eval_encoded: Vec<EncodedExample>,
}

fn data_files(l: &Layout) -> Vec<PathBuf> {
    vec![l.catalog(), l.train(), l.eval()]
}

fn sid_files(l: &Layout) -> Vec<PathBuf> {
    vec![l.codebook(), l.assignment(), l.vocab()]
}

impl Workspace {
    pub fn load(l: &Layout, hash: &str) -> Result<Self> {
        require(&l.data(), &data_files(l), "gen-data", hash)?;
        require(&l.sids(), &sid_files(l), "build-sids", hash)?;
        Self::read(l)
    }

    fn read(l: &Layout) -> Result<Self> {
        let catalog = Catalog::read_jsonl(&l.catalog())?;
        let train = read_corpus(&l.train())?;
        let eval = read_corpus(&l.eval())?;
        let vocab = Vocabulary::read_jsonl(&l.vocab())?;
        let assignment = SidAssignment::read_jsonl(&l.assignment())?;
        let space = SearchSpace::new(vocab, assignment)?;
        let train_encoded = encode_examples(&space, &train)?;
        let eval_encoded = encode_examples(&space, &eval)?;
        Ok(Self {
            catalog,
            train,
            eval,
            space,
            train_encoded,
            eval_encoded,
        })
    }

    fn setup(&self, cfg: &RunConfig, out_dir: Option<PathBuf>) -> EvolveSetup<'_> {
        EvolveSetup {
            space: &self.space,
            train: &self.train_encoded,
            eval: &self.eval_encoded,
            rewards: cfg.rewards.clone(),
            rgrpo: cfg.rgrpo.clone(),
            evolve: cfg.evolve.clone(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            out_dir,
        }
    }
}

pub fn gen_data(cfg: &RunConfig, l: &Layout) -> Result<()> {
    let c = &cfg.corpus;
    let catalog = generate_catalog(cfg.seed, c.n_items, c.n_brands, c.n_categories)?;
    let sessions = generate_sessions(&catalog, cfg.seed, c.n_users, c.history_len, c.noise)?;
    let (train, eval) = split_dataset(&sessions, c.holdout_fraction, cfg.seed)?;
    fs::create_dir_all(l.data())?;
    catalog.write_jsonl(&l.catalog())?;
    write_corpus(&l.train(), &train)?;
    write_corpus(&l.eval(), &eval)?;
    log::info!("{} items, {} train and {} eval examples", catalog.len(), train.len(), eval.len());
    write_stamp(&l.data(), "gen-data", &cfg.hash())
}

pub fn build_sids(cfg: &RunConfig, l: &Layout) -> Result<()> {
    let hash = cfg.hash();
    require(&l.data(), &data_files(l), "gen-data", &hash)?;
    let catalog = Catalog::read_jsonl(&l.catalog())?;
    let embeddings = embed_catalog(&catalog, cfg.embedder.dim, cfg.seed)?;
    let (codebook, _) = build_codebook(
        &embeddings,
        &cfg.sids.layer_sizes,
        cfg.sids.max_iters,
        cfg.sids.tol,
        cfg.seed,
    )?;
    fs::create_dir_all(l.sids())?;
    let ids: Vec<u32> = catalog.items().iter().map(|i| i.item_id).collect();
    let assignment = assign_sids(&codebook, &embeddings, &ids)?;
    let sizes = codebook.layer_sizes();
    let sizes: [usize; QUANT_LAYERS] = [sizes[0], sizes[1], sizes[2]];
    let vocab = build_vocabulary(&catalog, &sizes, assignment.max_dedup());
    embeddings.write(&l.sids().join("embeddings.bin"))?;
    codebook.write(&l.codebook())?;
    assignment.write_jsonl(&l.assignment())?;
    vocab.write_jsonl(&l.vocab())?;
    log::info!(
        "{} SIDs over layers {:?}, dedup depth {}, vocabulary {}",
        assignment.len(),
        sizes,
        assignment.max_dedup() + 1,
        vocab.len()
    );
    write_stamp(&l.sids(), "build-sids", &hash)
}

pub fn align(cfg: &RunConfig, l: &Layout) -> Result<()> {
    let hash = cfg.hash();
    let ws = Workspace::load(l, &hash)?;
    let mut params = PolicyParams::new(cfg.policy.to_config(), &ws.space.vocab, derive_seed(cfg.seed, 1));
    let alignment = build_alignment_examples(&ws.catalog, &ws.space.assignment, &ws.space.vocab)?;
    let c2s = build_context2sid_examples(&ws.train_encoded, &ws.space.vocab);
    let losses = align_pretrain(&mut params, &alignment, &c2s, &cfg.evolve.align, derive_seed(cfg.seed, 2))?;
    params.round_to_f32();
    fs::create_dir_all(l.align())?;
    params.save(&l.aligned_params())?;
    fs::write(l.align().join("losses.json"), serde_json::to_string_pretty(&losses)? + "\n")?;
    write_stamp(&l.align(), "align", &hash)
}

pub fn evolve(cfg: &RunConfig, l: &Layout) -> Result<()> {
    let hash = cfg.hash();
    require(&l.align(), &[l.aligned_params()], "align", &hash)?;
    let ws = Workspace::load(l, &hash)?;
    let aligned = PolicyParams::load(&l.aligned_params())?;
    aligned.check_vocab(&ws.space.vocab)?;
    let traces = bootstrap_traces(
        &ws.train,
        &ws.train_encoded,
        &ws.catalog,
        &ws.space.vocab,
        cfg.rgrpo.max_reason_len,
    );
    let setup = ws.setup(cfg, Some(l.evolve()));
    fs::create_dir_all(l.evolve())?;
    let result = run_self_evolution(&aligned, &traces, &setup)?;
    result.final_params.save(&l.final_params())?;
    write_stamp(&l.evolve(), "evolve", &hash)
}

fn load_checkpoint(l: &Layout, hash: &str, path: Option<&Path>) -> Result<PolicyParams> {
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(Error::MissingDependency {
                    path: p.to_path_buf(),
                    stage: "evolve",
                });
            }
            PolicyParams::load(p)
        }
        None => {
            require(&l.evolve(), &[l.final_params()], "evolve", hash)?;
            PolicyParams::load(&l.final_params())
        }
    }
}

pub fn evaluate_stage(cfg: &RunConfig, l: &Layout, checkpoint: Option<&Path>) -> Result<()> {
    let hash = cfg.hash();
    require(&l.data(), &data_files(l), "gen-data", &hash)?;
    require(&l.sids(), &sid_files(l), "build-sids", &hash)?;
    let params = load_checkpoint(l, &hash, checkpoint)?;
    let ws = Workspace::read(l)?;
    let name = checkpoint
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "final".to_string());
    let report = evaluate(
        &params,
        &ws.space,
        &ws.eval_encoded,
        &cfg.eval.ns,
        cfg.rgrpo.max_reason_len,
        &name,
        &hash,
    )?;
    fs::create_dir_all(l.eval_dir())?;
    emit_report(&report, &l.report())?;
    let popularity = popularity_baseline(&ws.train, &ws.catalog);
    let pop_rankings = vec![popularity.clone(); ws.eval.len()];
    let pop = score_rankings(&pop_rankings, &ws.eval_encoded, &cfg.eval.ns, "popularity", &hash)?;
    emit_report(&pop, &l.eval_dir().join("popularity.json"))?;
    let lex_rankings: Vec<Vec<u32>> = ws
        .eval
        .iter()
        .map(|e| lexical_baseline(&e.context.current_query.query_text, &ws.catalog, &popularity))
        .collect();
    let lex = score_rankings(&lex_rankings, &ws.eval_encoded, &cfg.eval.ns, "lexical", &hash)?;
    emit_report(&lex, &l.eval_dir().join("lexical.json"))?;
    log::info!(
        "hr@10 {:.4} ndcg@10 {:.4} (popularity hr@10 {:.4}, lexical hr@10 {:.4})",
        report.hr(10),
        report.ndcg(10),
        pop.hr(10),
        lex.hr(10)
    );
    write_stamp(&l.eval_dir(), "evaluate", &hash)
}

pub fn ablate_rl(cfg: &RunConfig, l: &Layout) -> Result<()> {
    let hash = cfg.hash();
    require(&l.evolve(), &[l.first_sft()], "evolve", &hash)?;
    let ws = Workspace::load(l, &hash)?;
    let start = PolicyParams::load(&l.first_sft())?;
    let setup = ws.setup(cfg, Some(l.ablation()));
    fs::create_dir_all(l.ablation())?;
    let rows = rl_ablation(&start, &setup, &cfg.eval.ablation_seeds)?;
    write_ablation(&l.ablation_table(), &rows)?;
    write_stamp(&l.ablation(), "ablate-rl", &hash)
}

/// Aggregate view over the final report, baselines, curve and ablation.
#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub final_report: MetricsReport,
    pub popularity: MetricsReport,
    pub lexical: MetricsReport,
    pub curve: Vec<CurvePoint>,
    pub ablation: Option<Vec<AblationRow>>,
}

fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .map(|line| {
            let parts: Vec<&str> = line.split(',').collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format(path, format!("bad number {s:?}")));
            if parts.len() != 3 {
                return Err(Error::format(path, "curve rows need 3 fields"));
            }
            Ok(CurvePoint {
                checkpoint: parts[0].to_string(),
                hr10: num(parts[1])?,
                ndcg10: num(parts[2])?,
            })
        })
        .collect()
}

fn read_ablation(path: &Path) -> Result<Vec<AblationRow>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .map(|line| {
            let p: Vec<&str> = line.split(',').collect();
            let bad = || Error::format(path, format!("bad ablation row {line:?}"));
            if p.len() != 5 {
                return Err(bad());
            }
            let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(AblationRow {
                seed: p[0].parse().map_err(|_| bad())?,
                rank_aware_ndcg10: f(p[1])?,
                top1_ndcg10: f(p[2])?,
                rank_aware_hr10: f(p[3])?,
                top1_hr10: f(p[4])?,
            })
        })
        .collect()
}

pub fn report(cfg: &RunConfig, l: &Layout) -> Result<()> {
    let hash = cfg.hash();
    require(&l.evolve(), &[l.curve()], "evolve", &hash)?;
    require(&l.eval_dir(), &[l.report()], "evaluate", &hash)?;
    let read = |p: PathBuf| -> Result<MetricsReport> { Ok(serde_json::from_slice(&fs::read(p)?)?) };
    let ablation = if l.ablation().join("stamp.json").exists() {
        require(&l.ablation(), &[l.ablation_table()], "ablate-rl", &hash)?;
        Some(read_ablation(&l.ablation_table())?)
    } else {
        None
    };
    let summary = Summary {
        config_hash: hash,
        final_report: read(l.report())?,
        popularity: read(l.eval_dir().join("popularity.json"))?,
        lexical: read(l.eval_dir().join("lexical.json"))?,
        curve: read_curve(&l.curve())?,
        ablation,
    };
    fs::write(l.summary(), serde_json::to_string_pretty(&summary)? + "\n")?;
    let mut md = format!("# Run summary ({})\n\n", summary.config_hash);
    md.push_str("| checkpoint | HR@10 | NDCG@10 |\n|---|---|---|\n");
    for p in &summary.curve {
        md.push_str(&format!("| {} | {:.4} | {:.4} |\n", p.checkpoint, p.hr10, p.ndcg10));
    }
    for r in [&summary.final_report, &summary.popularity, &summary.lexical] {
        md.push_str(&format!("| eval: {} | {:.4} | {:.4} |\n", r.checkpoint, r.hr(10), r.ndcg(10)));
    }
    if let Some(rows) = &summary.ablation {
        md.push_str("\n| seed | rank-aware NDCG@10 | top-1 NDCG@10 |\n|---|---|---|\n");
        for r in rows {
            md.push_str(&format!("| {} | {:.4} | {:.4} |\n", r.seed, r.rank_aware_ndcg10, r.top1_ndcg10));
        }
    }
    fs::write(l.root.join("summary.md"), md)?;
    Ok(())
}

/// Run one command against an output directory.
pub fn execute(command: &Command, cfg: &RunConfig, out: &Path) -> Result<()> {
    let _lock = DirLock::acquire(out)?;
    let l = Layout::new(out);
    match command {
        Command::GenData => gen_data(cfg, &l),
        Command::BuildSids => build_sids(cfg, &l),
        Command::Align => align(cfg, &l),
        Command::Evolve => evolve(cfg, &l),
        Command::Evaluate { checkpoint } => evaluate_stage(cfg, &l, checkpoint.as_deref()),
        Command::AblateRl => ablate_rl(cfg, &l),
        Command::Report => report(cfg, &l),
    }
}

/// Process exit code for a result: 0 success, 1 invalid input or
/// configuration, 2 failure during computation.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_validation() => 1,
        Err(_) => 2,
    }
}

/// Parse arguments, load the config and run. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.config {
        Some(path) => RunConfig::load(path, &cli.overrides),
        None => RunConfig::from_json("{}", &cli.overrides),
    }
    .and_then(|cfg| execute(&cli.command, &cfg, &cli.out));
    if let Err(e) = &result {
        log::error!("{e}");
        eprintln!("error: {e}");
    }
    exit_code(&result)
}
