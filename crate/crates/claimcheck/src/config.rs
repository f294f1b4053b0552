//! TOML experiment configuration for the pipeline.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::aggregator::AggregatorConfig;
use crate::model::Method;
use crate::retriever::{RetrieverBackend, RetrieverConfig};
use crate::verifier::{VerifierBackend, VerifierConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
}

fn default_max_in_flight() -> usize {
    8
}

fn default_retries() -> u32 {
    2
}

fn default_backoff_ms() -> u64 {
    500
}

#[derive(Debug, Clone, Deserialize)]
pub struct DecomposerConfig {
    /// Method name: baseline, factscore, veriscore, wice, exact-n:N,
    /// reflected:BASE. "exact-n" without a count takes it from `exact_n`.
    pub method: String,
    pub model_id: Option<String>,
    pub prompt_dir: Option<PathBuf>,
    pub exact_n: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct GatewaySettings {
    pub endpoint: Option<String>,
    pub key_env: Option<String>,
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        GatewaySettings {
            endpoint: None,
            key_env: None,
            cache_dir: None,
            max_in_flight: default_max_in_flight(),
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PipelineConfig {
    pub decomposer: DecomposerConfig,
    pub retriever: RetrieverConfig,
    pub verifier: VerifierConfig,
    #[serde(default)]
    pub aggregator: AggregatorConfig<f64>,
    #[serde(default)]
    pub gateway: GatewaySettings,
    #[serde(default)]
    pub output: OutputConfig,
}

fn require_path(path: &Option<PathBuf>, what: &str) -> Result<(), ConfigError> {
    match path {
        None => Err(ConfigError::Invalid(format!("{what} is required"))),
        Some(p) if !p.exists() => Err(ConfigError::Invalid(format!(
            "{what} does not exist: {}",
            p.display()
        ))),
        Some(_) => Ok(()),
    }
}

fn require_value<T>(value: &Option<T>, what: &str) -> Result<(), ConfigError> {
    if value.is_none() {
        return Err(ConfigError::Invalid(format!("{what} is required")));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path)?;
        let config: PipelineConfig = toml::from_str(&raw)?;
        config.validate()?;
        Ok(config)
    }

    /// The decomposition method with the exact-n count resolved.
    pub fn resolved_method(&self) -> Result<Method, ConfigError> {
        let raw = self.decomposer.method.trim();
        let spelled = if raw.eq_ignore_ascii_case("exact-n") {
            let n = self.decomposer.exact_n.ok_or_else(|| {
                ConfigError::Invalid("decomposer.exact_n is required for method \"exact-n\"".to_string())
            })?;
            format!("exact-n:{n}")
        } else {
            raw.to_string()
        };
        let method: Method = spelled
            .parse()
            .map_err(|e| ConfigError::Invalid(format!("decomposer.method: {e}")))?;
        if let Method::ExactN(n) = &method {
            if let Some(configured) = self.decomposer.exact_n {
                if configured != *n {
                    return Err(ConfigError::Invalid(format!(
                        "decomposer.method names {n} sub-claims but exact_n = {configured}"
                    )));
                }
            }
            if !(2..=10).contains(n) {
                return Err(ConfigError::Invalid(format!(
                    "exact-n count {n} out of range (expected 2..=10)"
                )));
            }
        }
        if let Method::Reflected(base) = &method {
            if matches!(base.as_ref(), Method::Reflected(_)) {
                return Err(ConfigError::Invalid("reflected methods cannot nest".to_string()));
            }
        }
        Ok(method)
    }

    /// Whether any stage needs the chat gateway's HTTP endpoint.
    pub fn needs_chat_endpoint(&self) -> bool {
        let method_needs = !self.decomposer.method.trim().eq_ignore_ascii_case("baseline");
        method_needs || self.verifier.backend == VerifierBackend::LlmFewShot
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let method = self.resolved_method()?;
        if self.gateway.max_in_flight < 1 {
            return Err(ConfigError::Invalid("gateway.max_in_flight must be >= 1".to_string()));
        }
        if let Some(dir) = &self.decomposer.prompt_dir {
            if !dir.is_dir() {
                return Err(ConfigError::Invalid(format!(
                    "decomposer.prompt_dir does not exist: {}",
                    dir.display()
                )));
            }
        }
        if self.needs_chat_endpoint() && self.gateway.endpoint.is_none() {
            return Err(ConfigError::Invalid(format!(
                "gateway.endpoint is required for method {} / verifier backend",
                method.name()
            )));
        }
        match self.retriever.backend {
            RetrieverBackend::Fixture => {
                require_path(&self.retriever.corpus_path, "retriever.corpus_path")?;
            }
            RetrieverBackend::WebSearch => {
                require_value(&self.retriever.endpoint, "retriever.endpoint")?;
            }
            RetrieverBackend::VectorIndex => {
                require_path(&self.retriever.index_path, "retriever.index_path")?;
                require_path(&self.retriever.corpus_path, "retriever.corpus_path")?;
                require_value(&self.retriever.endpoint, "retriever.endpoint")?;
                require_value(&self.retriever.embed_model, "retriever.embed_model")?;
            }
        }
        if let Some(k) = self.retriever.top_k {
            if k == 0 {
                return Err(ConfigError::Invalid("retriever.top_k must be >= 1".to_string()));
            }
        }
        match self.verifier.backend {
            VerifierBackend::RemoteNli => {
                require_value(&self.verifier.endpoint, "verifier.endpoint")?;
            }
            VerifierBackend::LlmFewShot => {}
            VerifierBackend::FixtureTable => {
                require_path(&self.verifier.fixture_path, "verifier.fixture_path")?;
            }
        }
        self.aggregator
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}
