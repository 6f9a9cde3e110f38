use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmetrics::{config_hash, CvProtocol};
use crate::model::ModelConfig;
use crate::schemes::{EarlyStop, SchemeConfig};
use crate::shift::ShiftConfig;
use crate::synthdata::GenConfig;

pub const OUTPUT_DIR_ENV: &str = "WEAKSTRONG_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvSection {
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
}

fn default_folds() -> usize {
    5
}
fn default_holdout() -> f64 {
    0.2
}
fn default_patience() -> usize {
    5
}

impl Default for CvSection {
    fn default() -> Self {
        CvSection {
            folds: default_folds(),
            holdout_fraction: default_holdout(),
        }
    }
}

/// Everything one experiment needs. `seed` is mandatory; `gen.seed`
/// defaults to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    pub output_dir: PathBuf,
    /// Parallel training tasks; 0 means one per core.
    #[serde(default)]
    pub workers: usize,
    /// Pre-generated dataset file; when absent the corpus is generated from `gen`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    pub gen: GenConfig,
    pub scheme: SchemeConfig,
    #[serde(default)]
    pub shift: ShiftConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub cv: CvSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let seed = value.get("seed").cloned();
        if let (Some(seed), Some(toml::Value::Table(gen))) = (seed, value.get_mut("gen")) {
            gen.entry("seed").or_insert(seed);
        }
        let cfg: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the output-directory override from the
    /// environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg =
            Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            cfg.output_dir = PathBuf::from(dir);
        }
        if let Some(ds) = &cfg.dataset {
            if ds.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.dataset = Some(base.join(ds));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let tag = |section: &str, e: Error| match e {
            Error::Config(m) | Error::Parameter(m) | Error::Format(m) => Error::Config(format!("[{section}] {m}")),
            other => other,
        };
        self.gen.validate().map_err(|e| tag("gen", e))?;
        self.scheme.validate().map_err(|e| tag("scheme", e))?;
        self.shift.validate().map_err(|e| tag("shift", e))?;
        self.model.validate().map_err(|e| tag("model", e))?;
        self.protocol().validate().map_err(|e| tag("cv", e))?;
        if self.model.input_dim != self.gen.input_dim {
            return Err(Error::Config(format!(
                "model.input_dim = {} but gen.input_dim = {}",
                self.model.input_dim, self.gen.input_dim
            )));
        }
        Ok(())
    }

    pub fn protocol(&self) -> CvProtocol {
        CvProtocol {
            folds: self.cv.folds,
            holdout_fraction: self.cv.holdout_fraction,
            seed: self.seed,
            workers: self.workers,
        }
    }

    pub fn stop(&self) -> EarlyStop {
        EarlyStop {
            max_epochs: self.epochs,
            patience: self.patience,
        }
    }

    /// Hash of everything that affects results (output location and worker
    /// count excluded).
    pub fn science_hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self).map_err(|e| Error::Format(e.to_string()))?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
            obj.remove("workers");
            obj.remove("dataset");
        }
        config_hash(&v)
    }
}

/// `example.toml`: a complete config with every field spelled out.
pub const EXAMPLE_CONFIG: &str = include_str!("../../example.toml");
