//! Embedding providers: a remote OpenAI-compatible HTTP provider and a local
//! deterministic feature-hashing embedder.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::digest::{mix64, sha256_hex, stable_hash};
use crate::http::{self, Attempt, HttpTransport, RetryPolicy, UreqTransport};
use crate::jsonl;
use crate::parallel;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbeddingError {
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("embedding provider rejected credentials (status {0})")]
    AuthFailure(u16),
    #[error("expected embedding of dimension {expected}, provider returned {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("text at position {0} is empty after whitespace stripping")]
    EmptyText(usize),
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("invalid provider configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub dim: usize,
    pub provider_id: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, provider_id: impl Into<String>) -> Self {
        Self { dim: values.len(), values, provider_id: provider_id.into() }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * c).collect(), ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingBackend {
    /// OpenAI-compatible `/embeddings` endpoint.
    Remote,
    /// Local feature hashing, see [`hash_embed`].
    Hash { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingProviderConfig {
    pub provider_id: String,
    pub backend: EmbeddingBackend,
    /// Full endpoint URL; when absent the base URL is resolved from
    /// `RAGAUDIT_BASE_URL` and `/embeddings` is appended.
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub dim: usize,
    pub batch_size: usize,
    pub timeout_secs: u64,
    /// Retries after the first attempt.
    pub retry: u32,
    pub retry_base_delay_ms: u64,
    /// Sub-batch requests issued concurrently.
    pub parallelism: usize,
}

impl EmbeddingProviderConfig {
    /// The remote profile: `text-embedding-ada-002`, 1536 dimensions.
    pub fn remote_default() -> Self {
        Self {
            provider_id: "openai:text-embedding-ada-002".into(),
            backend: EmbeddingBackend::Remote,
            endpoint_url: None,
            model_name: "text-embedding-ada-002".into(),
            dim: crate::REMOTE_EMBEDDING_DIM,
            batch_size: 64,
            timeout_secs: 60,
            retry: 2,
            retry_base_delay_ms: 1000,
            parallelism: 4,
        }
    }

    /// Local feature-hashing profile.
    pub fn hash(dim: usize, seed: u64) -> Self {
        Self {
            provider_id: format!("hash-v1:dim={dim}:seed={seed}"),
            backend: EmbeddingBackend::Hash { seed },
            endpoint_url: None,
            model_name: "feature-hash-v1".into(),
            dim,
            batch_size: 256,
            timeout_secs: 0,
            retry: 0,
            retry_base_delay_ms: 0,
            parallelism: 1,
        }
    }

    /// Inverse of [`Self::hash`]'s provider id, so an index can be queried
    /// with the embedder that built it.
    pub fn from_hash_provider_id(id: &str) -> Option<Self> {
        let rest = id.strip_prefix("hash-v1:dim=")?;
        let (dim, seed) = rest.split_once(":seed=")?;
        Some(Self::hash(dim.parse().ok()?, seed.parse().ok()?))
    }

    pub fn validate(&self) -> Result<(), EmbeddingError> {
        if self.dim == 0 {
            return Err(EmbeddingError::InvalidConfig("dim must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(EmbeddingError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy { retries: self.retry, base_delay: Duration::from_millis(self.retry_base_delay_ms) }
    }
}

/// A source of embeddings. `request` is one provider round trip and
/// receives at most `config().batch_size` texts.
pub trait EmbeddingProvider: Send + Sync {
    fn config(&self) -> &EmbeddingProviderConfig;

    fn request(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError>;
}

/// Builds the provider selected by `config.backend`.
pub fn build_provider(config: &EmbeddingProviderConfig) -> Result<Arc<dyn EmbeddingProvider>, EmbeddingError> {
    config.validate()?;
    Ok(match config.backend {
        EmbeddingBackend::Remote => Arc::new(RemoteEmbedder::from_env(config.clone())),
        EmbeddingBackend::Hash { .. } => Arc::new(HashEmbedder::new(config.clone())),
    })
}

/// Embeds one text.
pub fn embed_text(text: &str, provider: &dyn EmbeddingProvider) -> Result<EmbeddingVector, EmbeddingError> {
    let mut out = embed_batch(&[text.to_string()], provider)?;
    Ok(out.pop().expect("one vector per text"))
}

/// Embeds `texts` in order, splitting into requests of at most `batch_size`.
/// Any failed sub-batch fails the whole call.
pub fn embed_batch(texts: &[String], provider: &dyn EmbeddingProvider) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    let config = provider.config();
    config.validate()?;
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(EmbeddingError::EmptyText(i));
    }
    let batches: Vec<&[String]> = texts.chunks(config.batch_size).collect();
    let results = parallel::map_with_threads(&batches, config.parallelism, |batch| {
        let raw = provider.request(batch)?;
        if raw.len() != batch.len() {
            return Err(EmbeddingError::MalformedResponse(format!(
                "{} embeddings for {} inputs",
                raw.len(),
                batch.len()
            )));
        }
        raw.into_iter()
            .map(|values| {
                if values.len() != config.dim {
                    return Err(EmbeddingError::DimensionMismatch { expected: config.dim, actual: values.len() });
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(EmbeddingError::MalformedResponse("non-finite embedding value".into()));
                }
                Ok(EmbeddingVector::new(values, config.provider_id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()
    });
    let mut out = Vec::with_capacity(texts.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Splits text into word tokens (`[A-Za-z0-9_]+`) and single punctuation
/// characters; whitespace separates and is dropped.
pub fn feature_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut word_start = None;
    for (i, c) in text.char_indices() {
        let is_word = c.is_alphanumeric() || c == '_';
        match (is_word, word_start) {
            (true, None) => word_start = Some(i),
            (true, Some(_)) => {}
            (false, start) => {
                if let Some(s) = start {
                    out.push(&text[s..i]);
                    word_start = None;
                }
                if !c.is_whitespace() {
                    out.push(&text[i..i + c.len_utf8()]);
                }
            }
        }
    }
    if let Some(s) = word_start {
        out.push(&text[s..]);
    }
    out
}

/// Signed feature hashing into `dim` buckets, then L2 normalisation.
/// Text without tokens maps to the zero vector.
pub fn hash_embed(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    assert!(dim >= 1, "dim must be positive");
    let mut acc = vec![0.0f64; dim];
    for token in feature_tokens(text) {
        let h = stable_hash(seed, &[token.as_bytes()]);
        let bucket = (h % dim as u64) as usize;
        let sign = if mix64(h) & 1 == 0 { 1.0 } else { -1.0 };
        acc[bucket] += sign;
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        acc.iter_mut().for_each(|v| *v /= norm);
    }
    acc
}

/// Offline provider over [`hash_embed`].
pub struct HashEmbedder {
    config: EmbeddingProviderConfig,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(config: EmbeddingProviderConfig) -> Self {
        let seed = match config.backend {
            EmbeddingBackend::Hash { seed } => seed,
            EmbeddingBackend::Remote => 0,
        };
        Self { config, seed }
    }

    pub fn with_dim(dim: usize, seed: u64) -> Self {
        Self::new(EmbeddingProviderConfig::hash(dim, seed))
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn config(&self) -> &EmbeddingProviderConfig {
        &self.config
    }

    fn request(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        Ok(texts.iter().map(|t| hash_embed(t, self.config.dim, self.seed)).collect())
    }
}

#[derive(Debug, Deserialize)]
struct EmbeddingReply {
    data: Vec<EmbeddingDatum>,
}

#[derive(Debug, Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

/// OpenAI-compatible embedding client.
pub struct RemoteEmbedder {
    config: EmbeddingProviderConfig,
    url: String,
    api_key: Option<String>,
    transport: Box<dyn HttpTransport>,
}

impl RemoteEmbedder {
    /// Uses `ureq`, the configured endpoint (or `RAGAUDIT_BASE_URL`) and the
    /// bearer token from `RAGAUDIT_API_KEY`.
    pub fn from_env(config: EmbeddingProviderConfig) -> Self {
        let url = config
            .endpoint_url
            .clone()
            .unwrap_or_else(|| format!("{}/embeddings", http::resolve_base_url(None)));
        let transport = Box::new(UreqTransport::new(Duration::from_secs(config.timeout_secs.max(1))));
        Self { url, api_key: http::api_key_from_env(), transport, config }
    }

    pub fn with_transport(
        config: EmbeddingProviderConfig,
        url: impl Into<String>,
        api_key: Option<String>,
        transport: Box<dyn HttpTransport>,
    ) -> Self {
        Self { config, url: url.into(), api_key, transport }
    }

    fn parse_reply(&self, body: &str, expected: usize) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let reply: EmbeddingReply =
            serde_json::from_str(body).map_err(|e| EmbeddingError::MalformedResponse(e.to_string()))?;
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; expected];
        for datum in reply.data {
            let slot = slots
                .get_mut(datum.index)
                .ok_or_else(|| EmbeddingError::MalformedResponse(format!("index {} out of range", datum.index)))?;
            if slot.replace(datum.embedding).is_some() {
                return Err(EmbeddingError::MalformedResponse(format!("duplicate index {}", datum.index)));
            }
        }
        slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| EmbeddingError::MalformedResponse(format!("missing index {i}"))))
            .collect()
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn config(&self) -> &EmbeddingProviderConfig {
        &self.config
    }

    fn request(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let body = serde_json::json!({ "model": self.config.model_name, "input": texts });
        self.config.retry_policy().run(|_| {
            let reply = match self.transport.post_json(&self.url, self.api_key.as_deref(), &body) {
                Ok(r) => r,
                Err(e) => return Attempt::Retry(EmbeddingError::ProviderUnavailable(e.0)),
            };
            match reply.status {
                s if (200..300).contains(&s) => match self.parse_reply(&reply.body, texts.len()) {
                    Ok(v) => Attempt::Done(v),
                    Err(e) => Attempt::Fatal(e),
                },
                401 | 403 => Attempt::Fatal(EmbeddingError::AuthFailure(reply.status)),
                429 | 500..=599 => {
                    Attempt::Retry(EmbeddingError::ProviderUnavailable(format!("status {}", reply.status)))
                }
                s => Attempt::Fatal(EmbeddingError::ProviderUnavailable(format!("status {s}: {}", reply.body))),
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheLine {
    text_checksum: String,
    provider_id: String,
    values: Vec<f32>,
}

/// Embedding cache keyed by (provider id, text checksum). Values are stored
/// as `f32`.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    entries: HashMap<(String, String), Vec<f32>>,
}

impl EmbeddingCache {
    /// Loads a cache file; a missing file is an empty cache.
    pub fn load(path: &Path) -> Result<Self, jsonl::JsonlError> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let rows: Vec<CacheLine> = jsonl::read_rows(path)?;
        let entries = rows.into_iter().map(|r| ((r.provider_id, r.text_checksum), r.values)).collect();
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, provider_id: &str, text: &str) -> Option<EmbeddingVector> {
        self.entries
            .get(&(provider_id.to_string(), sha256_hex(text)))
            .map(|v| EmbeddingVector::new(v.iter().map(|x| f64::from(*x)).collect(), provider_id))
    }

    fn insert(&mut self, text: &str, vector: &EmbeddingVector) -> CacheLine {
        let line = CacheLine {
            text_checksum: sha256_hex(text),
            provider_id: vector.provider_id.clone(),
            values: vector.values.iter().map(|v| *v as f32).collect(),
        };
        self.entries.insert((line.provider_id.clone(), line.text_checksum.clone()), line.values.clone());
        line
    }
}

/// Embeds `texts`, reusing cached vectors and appending every newly embedded
/// group to `checkpoint` (if given) before starting the next, so an
/// interrupted run resumes where it stopped.
pub fn embed_batch_cached(
    texts: &[String],
    provider: &dyn EmbeddingProvider,
    cache: &mut EmbeddingCache,
    checkpoint: Option<&Path>,
) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    let config = provider.config();
    let provider_id = config.provider_id.clone();
    let mut missing: Vec<String> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for t in texts {
        if cache.get(&provider_id, t).is_none() && seen.insert(t.as_str()) {
            missing.push(t.clone());
        }
    }
    let group = config.batch_size * config.parallelism.max(1);
    for texts_group in missing.chunks(group.max(1)) {
        let vectors = embed_batch(texts_group, provider)?;
        let lines: Vec<CacheLine> = texts_group.iter().zip(&vectors).map(|(t, v)| cache.insert(t, v)).collect();
        if let Some(path) = checkpoint {
            let append = || -> std::io::Result<()> {
                let file = OpenOptions::new().create(true).append(true).open(path)?;
                let mut out = BufWriter::new(file);
                for line in &lines {
                    jsonl::write_row(&mut out, line)?;
                }
                out.flush()
            };
            append().map_err(|e| EmbeddingError::ProviderUnavailable(format!("checkpoint write failed: {e}")))?;
        }
    }
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.trim().is_empty() {
                return Err(EmbeddingError::EmptyText(i));
            }
            Ok(cache.get(&provider_id, t).expect("embedded above"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use parking_lot::Mutex;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn hash_provider_id_round_trip() {
        let c = EmbeddingProviderConfig::hash(48, 9);
        assert_eq!(EmbeddingProviderConfig::from_hash_provider_id(&c.provider_id), Some(c));
        assert_eq!(EmbeddingProviderConfig::from_hash_provider_id("openai:text-embedding-ada-002"), None);
        assert_eq!(EmbeddingProviderConfig::from_hash_provider_id("hash-v1:dim=x:seed=1"), None);
    }

    #[test]
    fn hash_embed_empty_is_zero() {
        let v = hash_embed("", 64, 1);
        assert_eq!(v.len(), 64);
        assert!(v.iter().all(|x| *x == 0.0));
        assert!(hash_embed("  \n\t", 8, 1).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn hash_embed_unit_norm_and_deterministic() {
        for text in ["a", "contract A { function f() public {} }", "ü ∑ x_y"] {
            let v = hash_embed(text, 128, 7);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-9, "{text}: {norm}");
            assert_eq!(v, hash_embed(text, 128, 7));
        }
    }

    #[test]
    fn hash_embed_overlap_scores_higher() {
        let a = "function withdraw ( ) public { msg . sender . call { value : balance } ( ) ; balance = 0 ; }";
        let a2 = "function withdraw ( ) external { msg . sender . call { value : amount } ( ) ; balance = 0 ; }";
        let b = "event Transfer address indexed from to uint256 tokens emit approve allowance decimals";
        let (va, va2, vb) = (hash_embed(a, 256, 3), hash_embed(a2, 256, 3), hash_embed(b, 256, 3));
        assert!(cosine(&va, &va2) > cosine(&va, &vb));
        assert!(cosine(&va, &va2) > 0.7);
    }

    #[test]
    fn feature_tokens_split() {
        assert_eq!(feature_tokens("a.b(c_1) ;"), ["a", ".", "b", "(", "c_1", ")", ";"]);
    }

    #[test]
    fn embed_batch_order_and_equivalence() {
        let p = HashEmbedder::with_dim(32, 9);
        let texts: Vec<String> = ["alpha beta", "gamma", "delta epsilon zeta"].iter().map(|s| s.to_string()).collect();
        let batch = embed_batch(&texts, &p).unwrap();
        assert_eq!(batch.len(), 3);
        for (t, v) in texts.iter().zip(&batch) {
            assert_eq!(*v, embed_text(t, &p).unwrap());
            assert_eq!(v.dim, 32);
        }
    }

    #[test]
    fn empty_text_rejected() {
        let p = HashEmbedder::with_dim(8, 0);
        let texts = vec!["ok".to_string(), "   ".to_string()];
        assert_eq!(embed_batch(&texts, &p), Err(EmbeddingError::EmptyText(1)));
    }

    /// Scripted transport that records request bodies.
    struct FakeTransport {
        dim: usize,
        requests: Mutex<Vec<serde_json::Value>>,
        statuses: Mutex<Vec<u16>>,
    }

    impl FakeTransport {
        fn new(dim: usize, statuses: Vec<u16>) -> Self {
            Self { dim, requests: Mutex::new(Vec::new()), statuses: Mutex::new(statuses) }
        }
    }

    impl HttpTransport for FakeTransport {
        fn post_json(
            &self,
            _url: &str,
            _bearer: Option<&str>,
            body: &serde_json::Value,
        ) -> Result<http::HttpReply, http::TransportError> {
            self.requests.lock().push(body.clone());
            let status = {
                let mut s = self.statuses.lock();
                if s.is_empty() { 200 } else { s.remove(0) }
            };
            let n = body["input"].as_array().unwrap().len();
            // reversed order to exercise index-based reassembly
            let data: Vec<_> = (0..n)
                .rev()
                .map(|i| serde_json::json!({"index": i, "embedding": vec![i as f64 + 1.0; self.dim]}))
                .collect();
            Ok(http::HttpReply { status, body: serde_json::json!({ "data": data }).to_string() })
        }
    }

    fn remote(dim_expected: usize, transport: impl HttpTransport + 'static, batch_size: usize) -> RemoteEmbedder {
        let mut cfg = EmbeddingProviderConfig::remote_default();
        cfg.dim = dim_expected;
        cfg.batch_size = batch_size;
        cfg.parallelism = 1;
        cfg.retry_base_delay_ms = 0;
        RemoteEmbedder::with_transport(cfg, "http://fake/embeddings", Some("k".into()), Box::new(transport))
    }

    #[test]
    fn remote_request_count_and_wire_shape() {
        let fake = Arc::new(FakeTransport::new(1536, vec![]));
        let p = remote(1536, fake.clone(), 4);
        let texts: Vec<String> = (0..10).map(|i| format!("text {i}")).collect();
        let out = embed_batch(&texts, &p).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.iter().all(|v| v.dim == 1536));
        // item 5 is index 1 inside the second batch
        assert_eq!(out[5].values[0], 2.0);
        let requests = fake.requests.lock().clone();
        assert_eq!(requests.len(), 3);
        assert_eq!(requests[0]["model"], "text-embedding-ada-002");
        assert_eq!(requests[2]["input"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn remote_dimension_mismatch() {
        let p = remote(1536, FakeTransport::new(1000, vec![]), 8);
        let err = embed_text("x", &p).unwrap_err();
        assert_eq!(err, EmbeddingError::DimensionMismatch { expected: 1536, actual: 1000 });
    }

    #[test]
    fn remote_retries_then_unavailable() {
        let p = remote(4, FakeTransport::new(4, vec![503, 503, 503, 503]), 8);
        assert!(matches!(embed_text("x", &p), Err(EmbeddingError::ProviderUnavailable(_))));
        let p = remote(4, FakeTransport::new(4, vec![503, 429]), 8);
        assert!(embed_text("x", &p).is_ok());
        let p = remote(4, FakeTransport::new(4, vec![401]), 8);
        assert_eq!(embed_text("x", &p), Err(EmbeddingError::AuthFailure(401)));
    }

    #[test]
    fn cache_checkpoint_resumes() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("cache.jsonl");
        let p = HashEmbedder::with_dim(16, 2);
        let texts: Vec<String> = (0..5).map(|i| format!("chunk number {i}")).collect();
        let mut cache = EmbeddingCache::load(&path).unwrap();
        let first = embed_batch_cached(&texts, &p, &mut cache, Some(&path)).unwrap();
        let reloaded = EmbeddingCache::load(&path).unwrap();
        assert_eq!(reloaded.len(), 5);
        let mut reloaded = reloaded;
        let second = embed_batch_cached(&texts, &p, &mut reloaded, Some(&path)).unwrap();
        assert_eq!(first, second);
        // nothing new appended
        assert_eq!(jsonl::read_lines(&path).unwrap().len(), 5);
    }
}
