//! Pipeline configuration: built-in defaults, overridden by a TOML file,
//! overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ragaudit_core::embeddings::EmbeddingBackend;
use ragaudit_core::llmclient::{ChatEndpointConfig, ParseMode};
use ragaudit_core::{EmbeddingProviderConfig, NonCompliancePolicy};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Hash,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LlmKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub provider: EmbeddingKind,
    /// Hash provider only.
    pub dim: usize,
    pub hash_seed: u64,
    pub endpoint_url: Option<String>,
    pub model_name: Option<String>,
    pub batch_size: Option<usize>,
    pub timeout_secs: Option<u64>,
    pub retry: Option<u32>,
    pub parallelism: Option<usize>,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            provider: EmbeddingKind::Hash,
            dim: 256,
            hash_seed: 0,
            endpoint_url: None,
            model_name: None,
            batch_size: None,
            timeout_secs: None,
            retry: None,
            parallelism: None,
        }
    }
}

impl EmbeddingSection {
    pub fn provider_config(&self) -> EmbeddingProviderConfig {
        let mut c = match self.provider {
            EmbeddingKind::Hash => EmbeddingProviderConfig::hash(self.dim, self.hash_seed),
            EmbeddingKind::Remote => EmbeddingProviderConfig::remote_default(),
        };
        if c.backend == EmbeddingBackend::Remote {
            if let Some(m) = &self.model_name {
                c.provider_id = format!("openai:{m}");
                c.model_name = m.clone();
            }
            c.endpoint_url = self.endpoint_url.clone();
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.timeout_secs {
            c.timeout_secs = v;
        }
        if let Some(v) = self.retry {
            c.retry = v;
        }
        if let Some(v) = self.parallelism {
            c.parallelism = v;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    pub provider: LlmKind,
    /// JSON mock script, for the mock provider.
    pub script: Option<PathBuf>,
    pub model_name: String,
    pub endpoint_url: Option<String>,
    pub timeout_secs: u64,
    pub retry: u32,
    pub max_concurrent: usize,
    pub requests_per_minute: u32,
    pub parse_mode: ParseMode,
}

impl Default for LlmSection {
    fn default() -> Self {
        let endpoint = ChatEndpointConfig::default();
        Self {
            provider: LlmKind::Remote,
            script: None,
            model_name: "gpt-4-1106-preview".into(),
            endpoint_url: None,
            timeout_secs: endpoint.timeout_secs,
            retry: endpoint.retry,
            max_concurrent: endpoint.max_concurrent,
            requests_per_minute: endpoint.requests_per_minute,
            parse_mode: ParseMode::Lenient,
        }
    }
}

impl LlmSection {
    pub fn endpoint_config(&self) -> ChatEndpointConfig {
        ChatEndpointConfig {
            provider_id: format!("openai:{}", self.model_name),
            endpoint_url: self.endpoint_url.clone(),
            timeout_secs: self.timeout_secs,
            retry: self.retry,
            max_concurrent: self.max_concurrent,
            requests_per_minute: self.requests_per_minute,
            ..ChatEndpointConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// 0 means one worker per available core.
    pub parallelism: usize,
    pub chunk_size: usize,
    pub k: usize,
    pub trials: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    pub token_budget: usize,
    pub self_exclusion: bool,
    pub policy: NonCompliancePolicy,
    pub log_prompts: Option<PathBuf>,
    pub embedding: EmbeddingSection,
    pub llm: LlmSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            parallelism: 0,
            chunk_size: ragaudit_core::DEFAULT_CHUNK_SIZE,
            k: ragaudit_core::DEFAULT_TOP_K,
            trials: ragaudit_core::DEFAULT_TRIALS,
            temperature: ragaudit_core::DEFAULT_TEMPERATURE,
            max_tokens: ragaudit_core::BINARY_MAX_TOKENS,
            token_budget: ragaudit_core::DEFAULT_TOKEN_BUDGET,
            self_exclusion: true,
            policy: NonCompliancePolicy::Exclude,
            log_prompts: None,
            embedding: EmbeddingSection::default(),
            llm: LlmSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            bail!("chunk_size must be >= 1");
        }
        if self.trials == 0 {
            bail!("trials must be >= 1");
        }
        Ok(())
    }

    pub fn workers(&self) -> usize {
        if self.parallelism > 0 {
            self.parallelism
        } else {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = PipelineConfig::default();
        assert_eq!((c.chunk_size, c.k, c.trials, c.max_tokens, c.token_budget), (1024, 5, 40, 5, 128_000));
        assert_eq!(c.temperature, 0.7);
        assert_eq!(c.policy, NonCompliancePolicy::Exclude);
    }

    #[test]
    fn toml_overrides_defaults() {
        let c: PipelineConfig = toml::from_str(
            r#"
            seed = 42
            trials = 3
            policy = "COUNT_AS_FAILURE"
            [embedding]
            provider = "hash"
            dim = 64
            [llm]
            provider = "mock"
            script = "script.json"
            "#,
        )
        .unwrap();
        assert_eq!((c.seed, c.trials, c.k), (42, 3, 5));
        assert_eq!(c.policy, NonCompliancePolicy::CountAsFailure);
        assert_eq!(c.embedding.provider_config().dim, 64);
        assert_eq!(c.llm.provider, LlmKind::Mock);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(toml::from_str::<PipelineConfig>("chunksize = 3").is_err());
    }

    #[test]
    fn remote_embedding_profile() {
        let s = EmbeddingSection { provider: EmbeddingKind::Remote, ..Default::default() };
        assert_eq!(s.provider_config().dim, 1536);
    }
}
