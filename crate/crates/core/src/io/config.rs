use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::engine::{DirectConfig, TrainConfig, TrainMode};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::regnet::ArchConfig;

/// Deserializes JSON, reporting failures with the path of the offending
/// field (e.g. `loss.beta[1]`).
pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let reason = match inner.classify() {
            serde_json::error::Category::Syntax | serde_json::error::Category::Eof => {
                format!("{inner} (line {}, column {})", inner.line(), inner.column())
            }
            _ => {
                // serde_json appends the location; keep just the message.
                let msg = inner.to_string();
                msg.split(" at line ").next().unwrap_or(&msg).to_string()
            }
        };
        Error::Config {
            path: if path == "." { "<root>".into() } else { path },
            reason,
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub initial_lr: f32,
    pub halve_after_epochs: usize,
    pub extra_epochs: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: TrainMode,
}

fn default_batch() -> usize {
    8
}

fn default_weight_decay() -> f32 {
    5e-4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectSection {
    #[serde(default)]
    pub iterations: Option<Vec<usize>>,
    #[serde(default)]
    pub lr: Option<f32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Checkpoint to resume from.
    pub checkpoint: Option<PathBuf>,
    /// Where to write the per-epoch history CSV.
    pub history: Option<PathBuf>,
}

/// One document holding architecture, loss, training and path settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub arch: ArchConfig,
    /// Seed of the weight initialization.
    #[serde(default)]
    pub model_seed: u64,
    pub loss: LossConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub direct: Option<DirectSection>,
    #[serde(default)]
    pub paths: PathsSection,
}

impl RunConfig {
    /// Parses and validates, including cross-field consistency.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = from_json(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.loss.scale_count() != self.arch.levels {
            return Err(Error::Config {
                path: "loss.alpha".into(),
                reason: format!(
                    "{} weights given but arch.levels is {}",
                    self.loss.scale_count(),
                    self.arch.levels
                ),
            });
        }
        self.train_config().validate(self.arch.levels)?;
        self.direct_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            initial_lr: t.initial_lr,
            halve_after_epochs: t.halve_after_epochs,
            extra_epochs: t.extra_epochs,
            weight_decay: t.weight_decay,
            seed: t.seed,
            mode: t.mode,
            loss: self.loss.clone(),
        }
    }

    pub fn direct_config(&self) -> DirectConfig {
        let mut d = DirectConfig::new(self.loss.clone());
        if let Some(section) = &self.direct {
            if let Some(it) = &section.iterations {
                d.iterations = it.clone();
            }
            if let Some(lr) = section.lr {
                d.lr = lr;
            }
        }
        d
    }
}
