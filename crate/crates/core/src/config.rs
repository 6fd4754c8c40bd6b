//! Run configuration: one JSON document covering training, evaluation and
//! paths. Unknown keys are rejected and `version` is required.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{CvOptions, EvalOptions};
use crate::trainer::{TrainConfig, TrainError};

pub const CONFIG_VERSION: u32 = 1;
pub const SEED_ENV: &str = "HAGE_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {0} not found")]
    NotFound(PathBuf),
    #[error("config file {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("unsupported config version {0} (expected {CONFIG_VERSION})")]
    Version(u32),
    #[error("{SEED_ENV}={0} is not an unsigned 64-bit integer")]
    SeedEnv(String),
    #[error(transparent)]
    Invalid(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Where `eval` and `trace` read a trained model from; defaults to `output_dir`.
    #[serde(default)]
    pub model_dir: Option<PathBuf>,
    #[serde(default = "default_classifier")]
    pub classifier: String,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub cv: CvOptions,
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_classifier() -> String {
    "rules".into()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            data_dir: default_data_dir(),
            output_dir: default_output_dir(),
            model_dir: None,
            classifier: default_classifier(),
            threads: None,
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            cv: CvOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), reason: e.to_string() })?;
        if cfg.version != CONFIG_VERSION {
            return Err(ConfigError::Version(cfg.version));
        }
        Ok(cfg)
    }

    /// Reads and validates a config file, then applies the seed override.
    /// Relative paths inside the file resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(ConfigError::NotFound(path.to_path_buf())),
            Err(e) => return Err(e.into()),
        };
        let mut cfg = Self::from_json(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data_dir, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(m) = cfg.model_dir.as_mut().filter(|m| m.is_relative()) {
            *m = base.join(&*m);
        }
        cfg.apply_seed_env(std::env::var(SEED_ENV).ok().as_deref())?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn apply_seed_env(&mut self, value: Option<&str>) -> Result<(), ConfigError> {
        if let Some(v) = value {
            self.train.seed = v.trim().parse().map_err(|_| ConfigError::SeedEnv(v.to_string()))?;
        }
        Ok(())
    }

    pub fn model_dir(&self) -> &Path {
        self.model_dir.as_deref().unwrap_or(&self.output_dir)
    }

    /// Evaluation options with the training reward settings filled in.
    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions { reward: self.train.reward, ..self.eval.clone() }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
