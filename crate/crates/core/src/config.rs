//! Versioned run configuration (TOML) with corpus, prompts, model, train,
//! retriever and eval sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Ablation, CorpusConfig};
use crate::eval::EvalMode;
use crate::model::{BackboneSpec, DecodingConfig};
use crate::pipeline::{ForceMode, PipelineConfig};
use crate::prompts::PromptScheme;
use crate::retrieval::HttpConfig;
use crate::training::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    #[serde(flatten)]
    pub backbone: BackboneSpec,
    /// Words seen fewer times fall back to character pieces.
    pub vocab_min_count: usize,
    /// Seed for parameter initialisation.
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { backbone: BackboneSpec::default(), vocab_min_count: 1, init_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub config: TrainConfig,
    /// Named loss-weight preset ("dusinc" or "wizint"); overrides `weights`.
    pub preset: Option<String>,
    pub ablation: Ablation,
    pub output_dir: PathBuf,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { config: TrainConfig::default(), preset: None, ablation: Ablation::Full, output_dir: PathBuf::from("runs/default") }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieverSection {
    pub kind: RetrieverKind,
    pub http: HttpConfig,
    pub search_limit: usize,
    pub knowledge_budget: usize,
}

impl Default for RetrieverSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self { kind: RetrieverKind::Mock, http: HttpConfig::default(), search_limit: p.search_limit, knowledge_budget: p.knowledge_budget }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub mode: Option<EvalMode>,
    pub force_mode: ForceMode,
    pub query_decoding: DecodingConfig,
    pub response_decoding: DecodingConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self { mode: None, force_mode: ForceMode::Auto, query_decoding: p.query_decoding, response_decoding: p.response_decoding }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: u32,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub prompts: PromptScheme,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub retriever: RetrieverSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn new(corpus: CorpusConfig) -> Self {
        Self {
            version: CONFIG_VERSION,
            corpus,
            prompts: PromptScheme::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            retriever: RetrieverSection::default(),
            eval: EvalSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Reads a config file; relative corpus and output paths are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            if cfg.corpus.path.is_relative() {
                cfg.corpus.path = base.join(&cfg.corpus.path);
            }
            if cfg.train.output_dir.is_relative() {
                cfg.train.output_dir = base.join(&cfg.train.output_dir);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn resolve(&mut self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::Invalid(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version)));
        }
        if let Some(p) = &self.train.preset {
            self.train.config.weights = match p.as_str() {
                "dusinc" => crate::types::LossWeights::dusinc(),
                "wizint" => crate::types::LossWeights::wizint(),
                other => return Err(ConfigError::Invalid(format!("unknown loss preset {other:?}"))),
            };
        }
        self.prompts.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model.backbone.validate().map_err(ConfigError::Invalid)?;
        self.train.config.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.corpus.max_context_turns == 0 {
            return Err(ConfigError::Invalid("corpus.max_context_turns must be at least 1".into()));
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            max_context_turns: self.corpus.context_turns(),
            query_decoding: self.eval.query_decoding.clone(),
            response_decoding: self.eval.response_decoding.clone(),
            search_limit: self.retriever.search_limit,
            knowledge_budget: self.retriever.knowledge_budget,
        }
    }
}
