//! The run configuration file.
//!
//! One JSON document holds every knob of a pipeline run. Unknown keys are
//! rejected, missing keys take defaults, and the canonical serialization is
//! hashed so every artifact can record which configuration produced it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evolve::EvolveConfig;
use crate::policy::PolicyConfig;
use crate::rewards::RewardConfig;
use crate::rgrpo::RgrpoConfig;
use crate::sidcodec::{DEFAULT_LAYER_SIZES, DEFAULT_MAX_ITERS, DEFAULT_TOL, QUANT_LAYERS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub n_items: usize,
    pub n_brands: usize,
    pub n_categories: usize,
    pub n_users: usize,
    pub history_len: usize,
    /// Probability that a target ignores the user's intent.
    pub noise: f64,
    pub holdout_fraction: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            n_items: 2000,
            n_brands: 50,
            n_categories: 24,
            n_users: 5000,
            history_len: 10,
            noise: 0.3,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderSection {
    pub dim: usize,
}

impl Default for EmbedderSection {
    fn default() -> Self {
        Self {
            dim: crate::embedder::DEFAULT_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SidSection {
    pub layer_sizes: [usize; QUANT_LAYERS],
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SidSection {
    fn default() -> Self {
        Self {
            layer_sizes: DEFAULT_LAYER_SIZES,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub d_model: usize,
    pub max_len: usize,
    pub recency_decay: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        let p = PolicyConfig::default();
        Self {
            d_model: p.d_model,
            max_len: p.max_len,
            recency_decay: p.recency_decay,
        }
    }
}

impl PolicySection {
    pub fn to_config(&self) -> PolicyConfig {
        PolicyConfig {
            d_model: self.d_model,
            max_len: self.max_len,
            recency_decay: self.recency_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ns: Vec<usize>,
    /// Seeds of the paired rank-aware vs top-1 RL comparison.
    pub ablation_seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ns: crate::evalkit::DEFAULT_NS.to_vec(),
            ablation_seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub embedder: EmbedderSection,
    pub sids: SidSection,
    pub policy: PolicySection,
    pub rewards: RewardConfig,
    pub rgrpo: RgrpoConfig,
    pub evolve: EvolveConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            corpus: CorpusSection::default(),
            embedder: EmbedderSection::default(),
            sids: SidSection::default(),
            policy: PolicySection::default(),
            rewards: RewardConfig::default(),
            rgrpo: RgrpoConfig::default(),
            evolve: EvolveConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Set `path` (dot separated) in a JSON tree to `raw`, parsed as JSON when
/// possible and as a string otherwise.
fn set_path(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut at = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = at
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {path}: {key} is not inside an object")))?;
        if i + 1 == keys.len() {
            if !obj.contains_key(*key) {
                return Err(Error::Config(format!("override {path}: unknown key {key}")));
            }
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        at = obj
            .get_mut(*key)
            .ok_or_else(|| Error::Config(format!("override {path}: unknown key {key}")))?;
    }
    Ok(())
}

impl RunConfig {
    /// Parse JSON text, apply `key=value` overrides and validate.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let parsed: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut tree = serde_json::to_value(&parsed)?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut tree, key.trim(), value.trim())?;
        }
        let cfg: Self = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.n_categories == 0 || c.n_brands == 0 || c.n_items < c.n_categories {
            return Err(Error::Config("corpus needs n_items >= n_categories >= 1 and n_brands >= 1".into()));
        }
        if c.n_users < 2 || !(c.noise >= 0.0 && c.noise <= 1.0) {
            return Err(Error::Config("corpus needs n_users >= 2 and noise in [0, 1]".into()));
        }
        if !(c.holdout_fraction > 0.0 && c.holdout_fraction < 1.0) {
            return Err(Error::Config("holdout_fraction must lie in (0, 1)".into()));
        }
        if self.embedder.dim < 2 {
            return Err(Error::Config("embedder dim must be at least 2".into()));
        }
        if self.sids.layer_sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        let p = &self.policy;
        if p.d_model == 0 || p.max_len < 2 || !(p.recency_decay > 0.0 && p.recency_decay < 1.0) {
            return Err(Error::Config("policy needs d_model >= 1, max_len >= 2, decay in (0, 1)".into()));
        }
        if self.eval.ns.is_empty() || self.eval.ns.contains(&0) {
            return Err(Error::Config("eval cutoffs must be positive".into()));
        }
        self.rewards.validate()?;
        self.rgrpo.validate()?;
        self.evolve.validate()
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.canonical_json().as_bytes())[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_is_stable() {
        let a = RunConfig::default();
        a.validate().unwrap();
        assert_eq!(a.hash(), RunConfig::from_json("{}", &[]).unwrap().hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn overrides_apply_and_change_hash() {
        let base = RunConfig::from_json("{}", &[]).unwrap();
        let cfg = RunConfig::from_json(
            "{}",
            &["corpus.noise=0.1".into(), "rgrpo.mode=grpo".into(), "seed=3".into()],
        );
        assert!(cfg.is_err(), "mode names are snake_case variants");
        let cfg = RunConfig::from_json(
            "{}",
            &["corpus.noise=0.1".into(), "rgrpo.mode=top1".into(), "seed=3".into()],
        )
        .unwrap();
        assert_eq!(cfg.corpus.noise, 0.1);
        assert_eq!(cfg.seed, 3);
        assert_ne!(cfg.hash(), base.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"bogus": 1}"#, &[]), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_json("{}", &["corpus.bogus=1".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"corpus": {"noise": 2.0}}"#, &[]),
            Err(Error::Config(_))
        ));
    }
}
