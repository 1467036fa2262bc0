//! Run configuration: one TOML document, dotted-key overrides and a stable hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotator::{AnnotatorConfig, CalibrationConfig, TrainConfig};
use crate::dataset::LabelMode;
use crate::eval::EvalConfig;
use crate::losses::LossConfig;
use crate::pipeline::IterationConfig;
use crate::proxy::CropConfig;
use crate::synth::SynthConfig;
use crate::weak_geometry::PriorTable;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse: {0}")]
    Parse(String),
    #[error("override `{0}`: expected key=value")]
    OverrideSyntax(String),
    #[error("override `{key}`: {reason}")]
    Override { key: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorKind {
    #[default]
    Direct,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// KITTI-style root; empty means the synthetic corpus.
    pub root: Option<PathBuf>,
    pub label_mode: LabelMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide. Results never depend on it.
    pub workers: usize,
    pub annotator_kind: AnnotatorKind,
    pub dataset: DatasetConfig,
    pub priors: PriorTable,
    pub loss: LossConfig,
    pub annotator: AnnotatorConfig,
    pub calibration: CalibrationConfig,
    pub train: TrainConfig,
    pub iteration: IterationConfig,
    pub crop: CropConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 2024,
            workers: 0,
            annotator_kind: AnnotatorKind::Direct,
            dataset: DatasetConfig::default(),
            priors: PriorTable::default(),
            loss: LossConfig::default(),
            annotator: AnnotatorConfig::default(),
            calibration: CalibrationConfig::default(),
            train: TrainConfig::default(),
            iteration: IterationConfig::default(),
            crop: CropConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Applies `a.b.c=value` overrides. Values are read as TOML literals, falling back to bare strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut tree = toml::Value::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::OverrideSyntax(o.to_string()))?;
            let key = key.trim();
            let value = parse_literal(raw.trim());
            let mut node = &mut tree;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| ConfigError::Override { key: key.to_string(), reason: format!("`{part}` is not inside a table") })?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        tree.try_into().map_err(|e: toml::de::Error| ConfigError::Override { key: overrides_summary(overrides), reason: e.to_string() })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seed > i64::MAX as u64 {
            return Err(ConfigError::Invalid("seed must fit in a signed 64-bit integer".into()));
        }
        self.priors.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.loss.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.iteration.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let a = &self.annotator;
        if a.max_iters == 0 || !(a.initial_step > 0.0) || a.restarts == 0 || !(a.tol >= 0.0) {
            return Err(ConfigError::Invalid("annotator: max_iters, initial_step and restarts must be positive".into()));
        }
        if self.train.batch_size == 0 || self.train.hidden == 0 || !(self.train.learning_rate > 0.0) {
            return Err(ConfigError::Invalid("train: batch_size, hidden and learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.crop.max_fraction) {
            return Err(ConfigError::Invalid("crop.max_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization, hex encoded. `workers` is left out
    /// because it never changes results.
    pub fn hash(&self) -> String {
        let canonical = Config { workers: 0, ..self.clone() };
        Sha256::digest(canonical.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn overrides_summary<S: AsRef<str>>(overrides: &[S]) -> String {
    overrides.iter().map(|s| s.as_ref().split('=').next().unwrap_or("").to_string()).collect::<Vec<_>>().join(",")
}

fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}")).map(|w| w.v).unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}
