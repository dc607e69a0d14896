//! Pipeline configuration and artifact provenance.
//!
//! One TOML file configures every stage: flat key-value entries grouped into
//! sections that mirror the module configs (`[paths]`, `[model]`, `[sft]`,
//! `[dpo]`, `[sampling]`, `[filters]`), with the global seed and the
//! malformed-prediction policy at the top level. Precedence is fixed:
//! built-in defaults, then the config file, then command-line flags; the
//! config hash recorded in artifact metadata is taken after all overrides, so
//! it names the effective configuration of the run.
//!
//! Provenance travels as a sidecar: every artifact `x` the CLI writes gets an
//! `x.meta.json` next to it holding the command, seed and config hash. The
//! sidecar keeps the artifact formats themselves byte-stable and free of
//! metadata framing.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::MalformedPolicy;
use crate::gen::ToyLmConfig;
use crate::hash::Fnv1a;
use crate::optim::{DpoConfig, SftConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Parameter element type for the toy model. Checkpoints record which one
/// they were trained with; loading dispatches on that tag, not on config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarKind {
    #[default]
    F32,
    F64,
}

impl ScalarKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScalarKind::F32 => "f32",
            ScalarKind::F64 => "f64",
        }
    }
}

impl fmt::Display for ScalarKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScalarKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(ScalarKind::F32),
            "f64" => Ok(ScalarKind::F64),
            other => Err(format!("unknown scalar type {other:?}, expected f32 or f64")),
        }
    }
}

/// File and directory layout for pipeline artifacts. Input files must exist
/// when a command starts; output directories are created on demand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub sft_dataset: PathBuf,
    pub dump: PathBuf,
    pub pairs: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus.jsonl"),
            sft_dataset: PathBuf::from("sft_dataset.jsonl"),
            dump: PathBuf::from("dump.jsonl"),
            pairs: PathBuf::from("pairs.jsonl"),
            checkpoints: PathBuf::from("checkpoints"),
            reports: PathBuf::from("reports"),
        }
    }
}

/// Toy model shape plus the scalar type used for fresh models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub scalar: ScalarKind,
    #[serde(flatten)]
    pub shape: ToyLmConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { scalar: ScalarKind::default(), shape: ToyLmConfig::default() }
    }
}

/// Sampling grid for the generate stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub temperatures: Vec<f64>,
    pub per_temp: usize,
    pub max_new_tokens: usize,
    /// Steering-variant sampling (one completion per steering prompt at the
    /// first temperature) instead of the neutral temperature grid.
    pub dual_prompt: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { temperatures: vec![0.7, 1.0], per_temp: 2, max_new_tokens: 64, dual_prompt: false }
    }
}

/// Pair-filter settings for the build-pairs stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub max_ratio: f64,
    pub one_per_input: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { max_ratio: 1.35, one_per_input: true }
    }
}

/// Whole-pipeline configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub malformed_policy: MalformedPolicy,
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub sft: SftConfig,
    pub dpo: DpoConfig,
    pub sampling: SamplingConfig,
    pub filters: FilterConfig,
}

impl PipelineConfig {
    /// Parses a TOML config file and validates it.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)?;
        let config: PipelineConfig = toml::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    /// File config when a path is given, built-in defaults otherwise.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            Some(p) => Self::from_file(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| ConfigError::Invalid(msg);
        self.model.shape.validate().map_err(|e| invalid(e.to_string()))?;
        self.sft.validate().map_err(|e| invalid(e.to_string()))?;
        self.dpo.validate().map_err(|e| invalid(e.to_string()))?;
        if !(self.filters.max_ratio > 1.0) || !self.filters.max_ratio.is_finite() {
            return Err(invalid(format!(
                "filters.max_ratio must be finite and > 1, got {}",
                self.filters.max_ratio
            )));
        }
        if self.sampling.temperatures.is_empty() {
            return Err(invalid("sampling.temperatures must not be empty".into()));
        }
        for &t in &self.sampling.temperatures {
            if !t.is_finite() || t <= 0.0 {
                return Err(invalid(format!("sampling temperature must be finite and > 0, got {t}")));
            }
        }
        if self.sampling.per_temp == 0 {
            return Err(invalid("sampling.per_temp must be positive".into()));
        }
        if self.sampling.max_new_tokens == 0 {
            return Err(invalid("sampling.max_new_tokens must be positive".into()));
        }
        Ok(())
    }

    /// FNV-1a hash of the effective configuration, over its canonical JSON
    /// serialization (struct declaration order, so stable across runs).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Fnv1a::new();
        h.write(json.as_bytes());
        format!("fnv1a:{:016x}", h.finish())
    }
}

/// Provenance sidecar contents for one artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    /// Command-specific mode tag, e.g. the SFT dataset synthesis mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
}

/// Sidecar path: `pairs.jsonl` gets `pairs.jsonl.meta.json`.
pub fn meta_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

pub fn write_meta(artifact: &Path, meta: &ArtifactMeta) -> Result<(), ConfigError> {
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    fs::write(meta_path(artifact), text)?;
    Ok(())
}

pub fn read_meta(artifact: &Path) -> Result<ArtifactMeta, ConfigError> {
    let text = fs::read_to_string(meta_path(artifact))?;
    Ok(serde_json::from_str(&text)?)
}
