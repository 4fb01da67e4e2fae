//! Self-describing JSON checkpoint: configuration, vocabulary, parameter
//! tensors, continuous prompt tables and training state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Matrix;
use super::tokenizer::Tokenizer;
use super::transformer::{BackboneSpec, NamedTensor, ParamStore, PROMPT_QUERY, PROMPT_RESPONSE};
use super::{Model, ModelError};
use crate::corpus::{Ablation, DEFAULT_MAX_CONTEXT_TURNS};
use crate::prompts::PromptScheme;
use crate::training::{AdamState, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "unirqr-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub backbone: BackboneSpec,
    pub prompts: PromptScheme,
    pub max_context_turns: usize,
    pub ablation: Ablation,
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTables {
    pub query: Matrix,
    pub response: Matrix,
}

/// Where training stood when the checkpoint was taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingState {
    pub step: u64,
    pub seed: u64,
    /// Epoch and batch position of the next step.
    pub epoch: u64,
    pub batch_in_epoch: usize,
    pub optimizer: Option<AdamState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: CheckpointConfig,
    pub vocabulary: Tokenizer,
    pub params: Vec<NamedTensor>,
    pub prompt_tables: Option<PromptTables>,
    pub training: TrainingState,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint decode: {0}")]
    Decode(#[from] serde_json::Error),
    #[error("unsupported checkpoint format {0:?} (expected {CHECKPOINT_FORMAT:?})")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl Checkpoint {
    pub fn capture(model: &Model, max_context_turns: usize, ablation: Ablation, train: Option<TrainConfig>, training: TrainingState) -> Self {
        let mut params = Vec::new();
        let (mut query, mut response) = (None, None);
        for e in &model.params.entries {
            match e.name.as_str() {
                PROMPT_QUERY => query = Some(e.value.clone()),
                PROMPT_RESPONSE => response = Some(e.value.clone()),
                _ => params.push(e.clone()),
            }
        }
        let prompt_tables = match (query, response) {
            (Some(query), Some(response)) => Some(PromptTables { query, response }),
            _ => None,
        };
        Self {
            format: CHECKPOINT_FORMAT.into(),
            config: CheckpointConfig {
                backbone: model.spec.clone(),
                prompts: model.scheme.clone(),
                max_context_turns,
                ablation,
                train,
            },
            vocabulary: model.tokenizer.clone(),
            params,
            prompt_tables,
            training,
        }
    }

    /// Captures a model with no training history.
    pub fn of_model(model: &Model) -> Self {
        Self::capture(model, DEFAULT_MAX_CONTEXT_TURNS, Ablation::Full, None, TrainingState::default())
    }

    pub fn restore_model(&self) -> Result<Model, CheckpointError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(self.format.clone()));
        }
        let c = &self.config;
        let skeleton = Model::new(c.backbone.clone(), c.prompts.clone(), self.vocabulary.clone(), 0)?;
        let mut entries = self.params.clone();
        if let Some(t) = &self.prompt_tables {
            entries.push(NamedTensor { name: PROMPT_QUERY.into(), value: t.query.clone() });
            entries.push(NamedTensor { name: PROMPT_RESPONSE.into(), value: t.response.clone() });
        }
        Ok(skeleton.with_params(ParamStore { entries })?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, CheckpointError> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(c.format));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        // Write then rename so a crash never leaves a truncated checkpoint.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_json()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let s = fs::read_to_string(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&s)
    }
}
