//! Run configuration: shipped defaults merged field by field with an
//! optional user file.

use std::path::Path;

use anyhow::{bail, Context, Result};
use comet_core::explain::ExplainConfig;
use comet_core::perturb::PerturbConfig;
use serde::{Deserialize, Serialize};

pub const DEFAULTS: &str = include_str!("../config/defaults.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub explain: ExplainSection,
    pub perturb: PerturbConfig,
    pub model: ModelSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainSection {
    pub precision_threshold: f64,
    pub crude_epsilon: f64,
    pub external_epsilon: f64,
    pub beam_width: usize,
    pub lucb_confidence: f64,
    pub lucb_tolerance: f64,
    pub batch_size: usize,
    pub min_samples: usize,
    pub max_samples_per_candidate: usize,
    pub coverage_pool: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub timeout_ms: u64,
    pub cache_capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub seeds: usize,
    pub group_by: String,
}

/// Overlay `top` onto `base`: tables merge key by key, anything else
/// replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl FileConfig {
    pub fn load(user: Option<&Path>) -> Result<Self> {
        let mut table: toml::Table = DEFAULTS.parse().context("shipped defaults")?;
        if let Some(path) = user {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
            let top: toml::Table = text.parse().with_context(|| format!("config {}", path.display()))?;
            merge(&mut table, top);
        }
        let cfg: FileConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        if cfg.eval.seeds == 0 {
            bail!("eval.seeds must be at least 1");
        }
        Ok(cfg)
    }

    /// The explain settings for one model kind and seed, validated.
    pub fn explain(&self, external: bool, seed: u64) -> Result<ExplainConfig> {
        let e = &self.explain;
        let cfg = ExplainConfig {
            precision_threshold: e.precision_threshold,
            epsilon: if external { e.external_epsilon } else { e.crude_epsilon },
            beam_width: e.beam_width,
            lucb_confidence: e.lucb_confidence,
            lucb_tolerance: e.lucb_tolerance,
            batch_size: e.batch_size,
            min_samples: e.min_samples,
            max_samples_per_candidate: e.max_samples_per_candidate,
            coverage_pool: e.coverage_pool,
            master_seed: seed,
            perturb: self.perturb,
        };
        if let Err(msg) = cfg.validate() {
            bail!("invalid configuration: {msg}");
        }
        Ok(cfg)
    }
}
