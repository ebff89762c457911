//! Optional TOML configuration; command-line flags take precedence.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;
use urm_core::eval::{EvalConfig, SyntheticSpec};
use urm_core::trainer::TrainConfig;

/// Top-level keys mirror the flag names.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub catalog: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    #[serde(rename = "objective-registry")]
    pub objective_registry: Option<PathBuf>,
    #[serde(rename = "T")]
    pub steps: Option<usize>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub tau: Option<f64>,
    #[serde(rename = "B")]
    pub bound: Option<f64>,
    #[serde(rename = "init-subset")]
    pub init_subset: Option<usize>,
    pub seed: Option<u64>,
    pub degree: Option<usize>,
    pub mode: Option<String>,
    pub port: Option<u16>,
    #[serde(rename = "report-json")]
    pub report_json: Option<PathBuf>,
    pub train: Option<TrainConfig>,
    pub synthetic: Option<SyntheticSpec>,
    pub eval: Option<EvalConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// Flag value, else config value, else `None`.
pub fn pick<T: Clone>(flag: &Option<T>, file: &Option<T>) -> Option<T> {
    flag.clone().or_else(|| file.clone())
}

/// Flag value, else config value, else an error naming the flag.
pub fn require<T: Clone>(flag: &Option<T>, file: &Option<T>, name: &str) -> Result<T> {
    pick(flag, file).ok_or_else(|| anyhow::anyhow!("missing --{name}"))
}
