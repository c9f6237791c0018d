//! Declarative per-run configuration document.
//!
//! A run config is a TOML file selecting the pipeline, preset, seed, and
//! file paths for one reproducible invocation. Parsing is strict: a
//! misspelled or unknown key fails before any computation, so a config
//! checked into a run directory is guaranteed to mean what it says.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UkdError};

pub const MODULES: [&str; 9] = [
    "pretrain", "extract", "probe", "mil", "survival", "retrieve", "stats", "rank", "gen",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Which pipeline this run drives; one of [`MODULES`].
    pub module: Option<String>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub gen: GenSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// File locations. Which keys matter depends on the module; unused keys
/// are legal so one document can describe a multi-stage run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub data: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub matrix: Option<PathBuf>,
    pub teacher_a: Option<PathBuf>,
    pub teacher_b: Option<PathBuf>,
    pub teacher_c: Option<PathBuf>,
}

/// Parameters for the synthetic dataset generators.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    pub kind: Option<String>,
    pub count: Option<usize>,
    pub size: Option<usize>,
    pub dim: Option<usize>,
    pub min_instances: Option<usize>,
    pub max_instances: Option<usize>,
    pub signal_rate: Option<f64>,
    pub classes: Option<usize>,
    pub per_class: Option<usize>,
    pub spread: Option<f64>,
}

/// Overrides for training loops.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: Option<u64>,
    pub batch: Option<usize>,
    pub epochs: Option<usize>,
    pub checkpoint_every: Option<u64>,
}

/// Knobs for the evaluation pipelines.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub alpha: Option<f64>,
    pub replicates: Option<usize>,
    pub ks: Option<Vec<usize>>,
    pub normalization: Option<String>,
    pub query_fraction: Option<f64>,
    pub pair: Option<String>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| UkdError::Config(format!("run config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.module {
            if !MODULES.contains(&m.as_str()) {
                return Err(UkdError::Config(format!(
                    "unknown module '{m}'; expected one of {}",
                    MODULES.join(", ")
                )));
            }
        }
        Ok(())
    }
}
