//! Retrieval-augmented smart-contract audit pipeline.
//!
//! The crate is organised as the stages of the pipeline:
//!
//! - [`corpus`]: ingest `.sol` trees into a manifest, attach labels, split
//!   into index/holdout sets, load vulnerability catalogs.
//! - [`chunker`]: reversible tokenizer and fixed token-count chunking.
//! - [`embeddings`]: embedding providers (remote HTTP and local feature hashing).
//! - [`vectorstore`]: exact cosine top-k index with a checksummed file format.
//! - [`promptkit`]: guided/blind prompt rendering and token-budget fitting.
//! - [`llmclient`]: chat-completion transport, scripted mock and verdict parsing.
//! - [`audit`]: single-trial orchestration and repeated-trial batches.
//! - [`eval`]: judging, aggregation and report emission.
//!
//! Data-parallel loops (ingest, index scans, embedding sub-batches, trial
//! batches) go through [`parallel`], which uses rayon when the `parallel`
//! feature is enabled and plain iterators otherwise. Results are identical in
//! both builds.

pub mod audit;
pub mod chunker;
pub mod corpus;
pub mod digest;
pub mod embeddings;
pub mod eval;
pub mod http;
pub mod jsonl;
pub mod llmclient;
pub mod parallel;
pub mod promptkit;
pub mod vectorstore;

pub use audit::{AuditJob, AuditMode, AuditServices, AuditSettings, TrialRecord};
pub use chunker::{Chunk, CharMergeTokenizer, TokenSequence, Tokenizer};
pub use corpus::{ContractDocument, CorpusManifest, Split, VulnerabilityType};
pub use embeddings::{EmbeddingProvider, EmbeddingProviderConfig, EmbeddingVector, HashEmbedder};
pub use eval::{ContractResult, EvaluationSummary, Expectation, NonCompliancePolicy};
pub use llmclient::{ChatProvider, ChatRequest, ChatResponse, Decision, MockChat, MockScript, Verdict};
pub use promptkit::{AssembledPrompt, TemplateId};
pub use vectorstore::{RetrievalHit, VectorIndex, VectorRecord};

/// Chunk size used when none is configured.
pub const DEFAULT_CHUNK_SIZE: usize = 1024;
/// Retrieval depth used when none is configured.
pub const DEFAULT_TOP_K: usize = 5;
/// Repetitions per audited contract.
pub const DEFAULT_TRIALS: u32 = 40;
/// Sampling temperature for every chat request.
pub const DEFAULT_TEMPERATURE: f64 = 0.7;
/// Completion cap in binary (YES/NO) audit mode.
pub const BINARY_MAX_TOKENS: u32 = 5;
/// Completion cap for open-ended analysis.
pub const OPEN_MAX_TOKENS: u32 = 4095;
/// Prompt token budget (model context window).
pub const DEFAULT_TOKEN_BUDGET: usize = 128_000;
/// Embedding width of the remote provider profile.
pub const REMOTE_EMBEDDING_DIM: usize = 1536;
/// Default holdout fraction for the index/holdout split.
pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.25;
