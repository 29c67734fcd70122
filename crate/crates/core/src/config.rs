//! Experiment configuration: one JSON document holding every stage's settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assembly::SchemeKind;
use crate::harness::ShuffleProtocol;
use crate::model::ModelConfig;
use crate::synth::CorpusConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: ShuffleProtocol,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let model = ModelConfig {
            vocab_size: corpus.vocab_size(),
            ..ModelConfig::default()
        };
        Self {
            corpus,
            model,
            train: TrainConfig::default(),
            protocol: ShuffleProtocol::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: field `{field}`: {message}")]
    Parse { file: String, field: String, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

impl ConfigError {
    fn invalid(field: &str, message: impl Into<String>) -> Self {
        Self::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Dotted path of the offending field, when known.
    pub fn field(&self) -> Option<&str> {
        match self {
            Self::Parse { field, .. } | Self::Invalid { field, .. } => Some(field),
            Self::Io { .. } => None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            file: origin.into(),
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Per-section checks followed by the cross-field ones.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.corpus
            .validate()
            .map_err(|e| ConfigError::invalid("corpus", e.0))?;
        self.model
            .validate()
            .map_err(|e| ConfigError::invalid("model", e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::invalid("train", e.to_string()))?;
        self.protocol
            .validate()
            .map_err(|e| ConfigError::invalid("protocol", e.to_string()))?;

        let (c, m) = (&self.corpus, &self.model);
        if c.vocab_size() > m.vocab_size {
            return Err(ConfigError::invalid(
                "corpus.vocab_size/model.vocab_size",
                format!(
                    "corpus vocabulary blocks need {} ids but model.vocab_size is {}",
                    c.vocab_size(),
                    m.vocab_size
                ),
            ));
        }
        let (know_len, dialog_len) = c.max_assembled_lengths();
        match m.scheme.kind {
            SchemeKind::Sequential => {
                if know_len + dialog_len > m.max_dialog_positions {
                    return Err(ConfigError::invalid(
                        "model.max_dialog_positions",
                        format!(
                            "sequential positions need up to {} rows for this corpus, table has {}",
                            know_len + dialog_len,
                            m.max_dialog_positions
                        ),
                    ));
                }
            }
            kind => {
                if dialog_len > m.max_dialog_positions {
                    return Err(ConfigError::invalid(
                        "model.max_dialog_positions",
                        format!("dialogue needs up to {dialog_len} positions, table has {}", m.max_dialog_positions),
                    ));
                }
                let stmt = 1 + CorpusConfig::MAX_STATEMENT_LEN;
                if stmt > m.max_knowledge_positions {
                    return Err(ConfigError::invalid(
                        "model.max_knowledge_positions",
                        format!("statements need {stmt} positions, table has {}", m.max_knowledge_positions),
                    ));
                }
                if kind == SchemeKind::RestartPerSlot && c.k_max > m.n_knowledge_slots {
                    return Err(ConfigError::invalid(
                        "corpus.k_max/model.n_knowledge_slots",
                        format!(
                            "corpus.k_max ({}) exceeds model.n_knowledge_slots ({})",
                            c.k_max, m.n_knowledge_slots
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}
