//! Python bindings: config handling, catalog and SID construction, policy
//! checkpoints, two-step inference, rewards and ranking metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sidsearch::config::RunConfig;
use sidsearch::corpus::{self, Catalog};
use sidsearch::embedder::embed_catalog;
use sidsearch::error::Error;
use sidsearch::evalkit::{self, SearchSpace};
use sidsearch::policy::{build_vocabulary, PolicyParams, Vocabulary};
use sidsearch::rewards;
use sidsearch::rgrpo::{self, LogBase};
use sidsearch::sidcodec::{self, SemanticId, SidAssignment, QUANT_LAYERS};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        e if e.is_validation() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn sid_from(codes: [u32; 4]) -> SemanticId {
    SemanticId(codes)
}

/// A validated run configuration.
#[pyclass(name = "RunConfig", frozen)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (json = "{}", overrides = Vec::new()))]
    fn new(json: &str, overrides: Vec<String>) -> PyResult<Self> {
        let inner = RunConfig::from_json(json, &overrides).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn load(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        let inner = RunConfig::load(&path, &overrides).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn to_json(&self) -> String {
        self.inner.canonical_json()
    }
}

/// A synthetic product catalog.
#[pyclass(name = "Catalog", frozen)]
struct PyCatalog {
    inner: Catalog,
}

#[pymethods]
impl PyCatalog {
    #[staticmethod]
    fn generate(seed: u64, n_items: usize, n_brands: usize, n_categories: usize) -> PyResult<Self> {
        let inner = corpus::generate_catalog(seed, n_items, n_brands, n_categories).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read_jsonl(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Catalog::read_jsonl(&path).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn item_ids(&self) -> Vec<u32> {
        self.inner.items().iter().map(|i| i.item_id).collect()
    }

    /// `(title, brand, category, price)` of an item.
    fn item(&self, item_id: u32) -> PyResult<(String, String, String, f64)> {
        let it = self
            .inner
            .get(item_id)
            .ok_or_else(|| PyValueError::new_err(format!("unknown item {item_id}")))?;
        Ok((it.title.clone(), it.brand.clone(), it.category.clone(), it.price))
    }
}

/// Item SIDs together with the token vocabulary and prefix trie.
#[pyclass(name = "SidIndex", frozen)]
struct PySidIndex {
    space: SearchSpace,
}

#[pymethods]
impl PySidIndex {
    /// Embed the catalog, fit the residual codebook and assign SIDs.
    #[staticmethod]
    #[pyo3(signature = (catalog, layer_sizes, dim = 64, max_iters = 50, tol = 1e-6, seed = 0))]
    fn build(
        catalog: &PyCatalog,
        layer_sizes: [usize; QUANT_LAYERS],
        dim: usize,
        max_iters: usize,
        tol: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let cat = &catalog.inner;
        let emb = embed_catalog(cat, dim, seed).map_err(py_err)?;
        let (codebook, _) = sidcodec::build_codebook(&emb, &layer_sizes, max_iters, tol, seed).map_err(py_err)?;
        let ids: Vec<u32> = cat.items().iter().map(|i| i.item_id).collect();
        let assignment = sidcodec::assign_sids(&codebook, &emb, &ids).map_err(py_err)?;
        let vocab = build_vocabulary(cat, &layer_sizes, assignment.max_dedup());
        Ok(Self {
            space: SearchSpace::new(vocab, assignment).map_err(py_err)?,
        })
    }

    /// Load the vocabulary and SIDs written by `build-sids` into `out/sids`.
    #[staticmethod]
    fn load(sids_dir: PathBuf) -> PyResult<Self> {
        let vocab = Vocabulary::read_jsonl(&sids_dir.join("vocab.jsonl")).map_err(py_err)?;
        let assignment = SidAssignment::read_jsonl(&sids_dir.join("sids.jsonl")).map_err(py_err)?;
        Ok(Self {
            space: SearchSpace::new(vocab, assignment).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.space.assignment.len()
    }

    fn vocab_size(&self) -> usize {
        self.space.vocab.len()
    }

    fn sid_of(&self, item_id: u32) -> Option<[u32; 4]> {
        self.space.assignment.sid_of(item_id).map(|s| s.0)
    }

    fn decode(&self, codes: [u32; 4]) -> Option<u32> {
        self.space.assignment.decode(&sid_from(codes))
    }

    fn sid_text(&self, codes: [u32; 4]) -> String {
        sid_from(codes).to_string()
    }

    fn valid_continuations(&self, prefix: Vec<u32>) -> Vec<u32> {
        self.space.trie.valid_continuations(&prefix)
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.space.vocab.encode(text)
    }

    fn decode_tokens(&self, ids: Vec<u32>) -> String {
        self.space.vocab.decode(&ids)
    }

    /// Greedy reasoning, then trie-constrained beam search over SIDs.
    /// Returns `(reasoning text, ranked item ids)`.
    #[pyo3(signature = (policy, context, n = 10, max_reason_len = 32))]
    fn search(&self, policy: &PyPolicy, context: &str, n: usize, max_reason_len: usize) -> PyResult<(String, Vec<u32>)> {
        let ctx = self.space.vocab.encode(context);
        let out = evalkit::two_step_inference(&policy.inner, &self.space, &ctx, n, max_reason_len).map_err(py_err)?;
        let text = self.space.vocab.decode(out.trajectory.generated());
        Ok((text, out.items))
    }
}

/// Policy parameters.
#[pyclass(name = "Policy")]
struct PyPolicy {
    inner: PolicyParams,
}

#[pymethods]
impl PyPolicy {
    /// Fresh policy with the given config over an index's vocabulary.
    #[staticmethod]
    #[pyo3(signature = (index, config = None, seed = 0))]
    fn init(index: &PySidIndex, config: Option<&PyRunConfig>, seed: u64) -> Self {
        let cfg = config.map(|c| c.inner.policy.to_config()).unwrap_or_default();
        Self {
            inner: PolicyParams::new(cfg, &index.space.vocab, seed),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: PolicyParams::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    /// Sum of log-probabilities of `tokens[start..end]`.
    fn log_prob(&self, tokens: Vec<u32>, start: usize, end: usize) -> PyResult<f64> {
        let lp = sidsearch::policy::log_prob(&self.inner, &tokens, start..end).map_err(py_err)?;
        Ok(lp.sum)
    }
}

fn log_base(name: &str) -> PyResult<LogBase> {
    match name {
        "natural" => Ok(LogBase::Natural),
        "two" => Ok(LogBase::Two),
        _ => Err(PyValueError::new_err("log base must be 'natural' or 'two'")),
    }
}

/// Rank-weighted mean of per-beam rewards.
#[pyfunction]
#[pyo3(signature = (rewards, base = "natural"))]
fn rank_aware_reward(rewards: Vec<f64>, base: &str) -> PyResult<f64> {
    Ok(rgrpo::rank_aware_reward(&rewards, log_base(base)?))
}

/// Group-standardized advantages.
#[pyfunction]
fn compute_advantages(rewards: Vec<f64>) -> Vec<f64> {
    rgrpo::compute_advantages(&rewards)
}

/// Weighted partial-match reward between two SIDs.
#[pyfunction]
#[pyo3(signature = (pred, target, weights = [0.5, 0.3, 0.2], prefix_gated = false))]
fn sid_accuracy(pred: [u32; 4], target: [u32; 4], weights: [f64; QUANT_LAYERS], prefix_gated: bool) -> f64 {
    rewards::r_sid_acc(&sid_from(pred), &sid_from(target), &weights, prefix_gated)
}

#[pyfunction]
fn hit_rate_at(ranked: Vec<u32>, target: u32, n: usize) -> f64 {
    evalkit::hit_rate_at(&ranked, target, n)
}

#[pyfunction]
fn ndcg_at(ranked: Vec<u32>, target: u32, n: usize) -> f64 {
    evalkit::ndcg_at(&ranked, target, n)
}

/// Run the command line with `args` (without the program name); returns
/// the exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("sidsearch".to_string()).chain(args).collect();
    py.detach(|| sidsearch::cli::run(argv))
}

#[pymodule]
fn sidsearch_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyCatalog>()?;
    m.add_class::<PySidIndex>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(rank_aware_reward, m)?)?;
    m.add_function(wrap_pyfunction!(compute_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(sid_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(hit_rate_at, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
