//! Application configuration.
//!
//! Values are layered: built-in defaults, then a TOML file, then `PDA_*`
//! environment variables, then command-line overrides. Every key is
//! addressable as a dotted path (`reasoning.top_n`), and its environment
//! variable is the path upper-cased with dots replaced by underscores and a
//! `PDA_` prefix (`PDA_REASONING_TOP_N`). API keys are only ever read from
//! the environment variable named by `llm.api_key_env` /
//! `embedder.api_key_env`.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::AnswerTemplates;
use crate::embedding::{
    CachedEmbedder, Embedder, EmbeddingCache, HashedBowEmbedder, RemoteEmbedder,
    DEFAULT_BOW_DIMENSION,
};
use crate::evaluation::PipelineConfig;
use crate::kg_store::{load_graph, GraphFormat, KnowledgeGraph, StoreError};
use crate::llm_client::transport::RetryPolicy;
use crate::llm_client::{
    LlmClient, RemoteLlm, RemoteLlmConfig, SamplingSettings, ScriptedLlm, DEFAULT_CONCURRENCY,
    DEFAULT_ENDPOINT, DEFAULT_MAX_TOKENS, DEFAULT_MODEL, DEFAULT_TEMPERATURE,
};
use crate::reasoning::ReasoningConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {message}")]
    InvalidValue {
        key: String,
        value: String,
        message: String,
    },
    #[error("no graph file configured (use --graph or the `graph` key)")]
    NoGraph,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0}")]
    Backend(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmBackend {
    Remote,
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderBackend {
    Remote,
    HashedBow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSettings {
    pub backend: LlmBackend,
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub retries: u32,
    pub concurrency: usize,
    pub timeout_secs: u64,
    pub script: Option<PathBuf>,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            backend: LlmBackend::Remote,
            endpoint: DEFAULT_ENDPOINT.into(),
            model: DEFAULT_MODEL.into(),
            api_key_env: "OPENAI_API_KEY".into(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            retries: RetryPolicy::default().max_retries,
            concurrency: DEFAULT_CONCURRENCY,
            timeout_secs: 120,
            script: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderSettings {
    pub backend: EmbedderBackend,
    pub dimension: usize,
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub cache: Option<PathBuf>,
}

impl Default for EmbedderSettings {
    fn default() -> Self {
        Self {
            backend: EmbedderBackend::HashedBow,
            dimension: DEFAULT_BOW_DIMENSION,
            endpoint: "https://api.openai.com/v1/embeddings".into(),
            model: "text-embedding-3-small".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            cache: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub workers: usize,
    pub sample: Option<usize>,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            workers: 4,
            sample: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnswerSettings {
    /// Override for the grounded answer prompt template.
    pub template: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub graph: Vec<PathBuf>,
    pub trace_dir: Option<PathBuf>,
    pub llm: LlmSettings,
    pub embedder: EmbedderSettings,
    pub reasoning: ReasoningConfig,
    pub eval: EvalSettings,
    pub answer: AnswerSettings,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        message: e.to_string(),
    })
}

fn parse_enum<T: for<'de> Deserialize<'de>>(key: &str, value: &str) -> Result<T, ConfigError> {
    serde_json::from_value(serde_json::Value::String(value.into())).map_err(|e| {
        ConfigError::InvalidValue {
            key: key.into(),
            value: value.into(),
            message: e.to_string(),
        }
    })
}

/// Every settable key, in documentation order.
pub const KEYS: &[&str] = &[
    "graph",
    "trace_dir",
    "llm.backend",
    "llm.endpoint",
    "llm.model",
    "llm.api_key_env",
    "llm.temperature",
    "llm.max_tokens",
    "llm.retries",
    "llm.concurrency",
    "llm.timeout_secs",
    "llm.script",
    "embedder.backend",
    "embedder.dimension",
    "embedder.endpoint",
    "embedder.model",
    "embedder.api_key_env",
    "embedder.cache",
    "reasoning.top_n",
    "reasoning.max_iterations",
    "reasoning.expansion_direction",
    "reasoning.empty_subgraph_policy",
    "reasoning.segment_aggregation",
    "eval.workers",
    "eval.sample",
    "eval.seed",
    "answer.template",
];

pub fn env_var_for(key: &str) -> String {
    format!("PDA_{}", key.replace('.', "_").to_uppercase())
}

impl AppConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.message().to_string(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    /// Sets one key from its string form. `graph` takes a comma-separated
    /// list.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let path = || Some(PathBuf::from(value));
        match key {
            "graph" => {
                self.graph = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            "trace_dir" => self.trace_dir = path(),
            "llm.backend" => self.llm.backend = parse_enum(key, value)?,
            "llm.endpoint" => self.llm.endpoint = value.into(),
            "llm.model" => self.llm.model = value.into(),
            "llm.api_key_env" => self.llm.api_key_env = value.into(),
            "llm.temperature" => self.llm.temperature = parse(key, value)?,
            "llm.max_tokens" => self.llm.max_tokens = parse(key, value)?,
            "llm.retries" => self.llm.retries = parse(key, value)?,
            "llm.concurrency" => self.llm.concurrency = parse(key, value)?,
            "llm.timeout_secs" => self.llm.timeout_secs = parse(key, value)?,
            "llm.script" => self.llm.script = path(),
            "embedder.backend" => self.embedder.backend = parse_enum(key, value)?,
            "embedder.dimension" => self.embedder.dimension = parse(key, value)?,
            "embedder.endpoint" => self.embedder.endpoint = value.into(),
            "embedder.model" => self.embedder.model = value.into(),
            "embedder.api_key_env" => self.embedder.api_key_env = value.into(),
            "embedder.cache" => self.embedder.cache = path(),
            "reasoning.top_n" => self.reasoning.top_n = parse(key, value)?,
            "reasoning.max_iterations" => self.reasoning.max_iterations = parse(key, value)?,
            "reasoning.expansion_direction" => {
                self.reasoning.expansion_direction = parse(key, value)?
            }
            "reasoning.empty_subgraph_policy" => {
                self.reasoning.empty_subgraph_policy = parse_enum(key, value)?
            }
            "reasoning.segment_aggregation" => {
                self.reasoning.segment_aggregation = parse_enum(key, value)?
            }
            "eval.workers" => self.eval.workers = parse(key, value)?,
            "eval.sample" => self.eval.sample = Some(parse(key, value)?),
            "eval.seed" => self.eval.seed = parse(key, value)?,
            "answer.template" => self.answer.template = path(),
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Applies `PDA_*` variables found through `lookup`.
    pub fn apply_env<F>(&mut self, lookup: F) -> Result<(), ConfigError>
    where
        F: Fn(&str) -> Option<String>,
    {
        for key in KEYS {
            if let Some(v) = lookup(&env_var_for(key)) {
                self.set(key, &v)?;
            }
        }
        Ok(())
    }

    /// Full layering: defaults < file < environment < overrides.
    pub fn resolve<F>(
        file: Option<&Path>,
        env: F,
        overrides: &[(String, String)],
    ) -> Result<Self, ConfigError>
    where
        F: Fn(&str) -> Option<String>,
    {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply_env(env)?;
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, value: String, message: &str| ConfigError::InvalidValue {
            key: key.into(),
            value,
            message: message.into(),
        };
        if self.reasoning.top_n == 0 {
            return Err(invalid("reasoning.top_n", "0".into(), "must be >= 1"));
        }
        if self.reasoning.max_iterations == 0 {
            return Err(invalid(
                "reasoning.max_iterations",
                "0".into(),
                "must be >= 1",
            ));
        }
        if !(0.0..=2.0).contains(&self.llm.temperature) {
            return Err(invalid(
                "llm.temperature",
                self.llm.temperature.to_string(),
                "must be within [0, 2]",
            ));
        }
        if self.llm.max_tokens == 0 {
            return Err(invalid("llm.max_tokens", "0".into(), "must be >= 1"));
        }
        if self.embedder.dimension == 0 {
            return Err(invalid("embedder.dimension", "0".into(), "must be >= 1"));
        }
        Ok(())
    }

    /// Loads and merges every configured graph file.
    pub fn load_graph(&self) -> Result<KnowledgeGraph, ConfigError> {
        let (first, rest) = self.graph.split_first().ok_or(ConfigError::NoGraph)?;
        let mut kg = load_graph(first, GraphFormat::TsvTriples)?;
        for p in rest {
            kg.merge(load_graph(p, GraphFormat::TsvTriples)?);
        }
        Ok(kg)
    }

    pub fn sampling(&self) -> SamplingSettings {
        SamplingSettings {
            model: self.llm.model.clone(),
            temperature: self.llm.temperature,
            max_tokens: self.llm.max_tokens,
        }
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig, ConfigError> {
        let templates = match &self.answer.template {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.clone(),
                    source,
                })?;
                AnswerTemplates::with_grounded(text).map_err(|e| ConfigError::InvalidValue {
                    key: "answer.template".into(),
                    value: p.display().to_string(),
                    message: e.to_string(),
                })?
            }
            None => AnswerTemplates::default(),
        };
        Ok(PipelineConfig {
            sampling: self.sampling(),
            reasoning: self.reasoning.clone(),
            templates,
        })
    }

    fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.llm.retries,
            ..RetryPolicy::default()
        }
    }

    pub fn build_llm(&self) -> Result<Box<dyn LlmClient>, ConfigError> {
        match self.llm.backend {
            LlmBackend::Scripted => {
                let path = self.llm.script.as_ref().ok_or_else(|| {
                    ConfigError::Backend("llm.backend = scripted needs llm.script".into())
                })?;
                Ok(Box::new(
                    ScriptedLlm::from_path(path)
                        .map_err(|e| ConfigError::Backend(e.to_string()))?,
                ))
            }
            LlmBackend::Remote => {
                let mut rc = RemoteLlmConfig::new(self.llm.endpoint.clone(), String::new());
                rc.retry = self.retry_policy();
                rc.timeout = Duration::from_secs(self.llm.timeout_secs);
                rc.concurrency = self.llm.concurrency;
                Ok(Box::new(
                    RemoteLlm::from_env(rc, &self.llm.api_key_env)
                        .map_err(|e| ConfigError::Backend(e.to_string()))?,
                ))
            }
        }
    }

    pub fn build_embedder(&self) -> Result<Box<dyn Embedder>, ConfigError> {
        let inner: Box<dyn Embedder> = match self.embedder.backend {
            EmbedderBackend::HashedBow => Box::new(HashedBowEmbedder::new(self.embedder.dimension)),
            EmbedderBackend::Remote => {
                let key = std::env::var(&self.embedder.api_key_env).ok();
                Box::new(RemoteEmbedder::new(
                    self.embedder.endpoint.clone(),
                    self.embedder.model.clone(),
                    key,
                    self.retry_policy(),
                    Duration::from_secs(self.llm.timeout_secs),
                ))
            }
        };
        Ok(match &self.embedder.cache {
            Some(p) => Box::new(CachedEmbedder::new(
                inner,
                EmbeddingCache::open(p).map_err(|e| ConfigError::Backend(e.to_string()))?,
            )),
            None => inner,
        })
    }
}
