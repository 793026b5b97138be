use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use s3d_core::datagen::DomainSpec;
use s3d_core::trainer::{TrainConfig, TrainError};

/// Everything one experiment needs, as read from `--config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub spec: DomainSpec,
    pub source: String,
    pub target: String,
    pub val_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            spec: DomainSpec::default(),
            source: "source".into(),
            target: "target".into(),
            val_per_class: 10,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config at `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Invalid {
            field: match e.path().to_string() {
                p if p == "." => "<root>".into(),
                p => p,
            },
            reason: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.data.spec.validate().map_err(|e| ConfigError::Invalid {
            field: "data.spec".into(),
            reason: e.to_string(),
        })?;
        for (field, id) in [("data.source", &self.data.source), ("data.target", &self.data.target)] {
            if self.data.spec.domain(id).is_err() {
                return Err(ConfigError::Invalid {
                    field: field.into(),
                    reason: format!("no domain named `{id}` in data.spec.domains"),
                });
            }
        }
        match self.train.validate() {
            Err(TrainError::InvalidConfig { field, reason }) => Err(ConfigError::Invalid {
                field: format!("train.{field}"),
                reason,
            }),
            Err(e) => Err(ConfigError::Invalid {
                field: "train".into(),
                reason: e.to_string(),
            }),
            Ok(()) => Ok(()),
        }
    }
}
