//! Trial orchestration: retrieve context for the audited contract, render the
//! prompt, fit it to the token budget, query the model and parse the verdict.
//!
//! Batches run trials concurrently but their output is sorted and every
//! seeded stream is keyed by `(seed, contract_id, trial_index)`, so results
//! do not depend on scheduling.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::chunker::{chunk_document, truncate_tokens, Tokenizer};
use crate::corpus::{ContractDocument, VulnerabilityType};
use crate::digest::sha256_hex;
use crate::embeddings::{embed_batch, embed_batch_cached, embed_text, EmbeddingCache, EmbeddingError, EmbeddingProvider};
use crate::jsonl;
use crate::llmclient::{parse_verdict_with, CallKey, ChatProvider, ChatRequest, LlmError, ParseMode, Verdict};
use crate::parallel;
use crate::promptkit::{
    fit_to_budget, render_blind, render_guided, AssembledPrompt, BlindPromptInputs, GuidedPromptInputs, PromptError,
    TemplateId,
};
use crate::vectorstore::{IndexError, Metadata, RecordFilter, RetrievalHit, VectorIndex, VectorRecord, VectorSearch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AuditMode {
    Guided,
    Blind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditJob {
    pub contract: ContractDocument,
    pub mode: AuditMode,
    /// Required for guided jobs, absent for blind ones.
    pub vulnerability: Option<VulnerabilityType>,
    pub k: usize,
    pub trials: u32,
    pub seed: u64,
}

impl AuditJob {
    pub fn guided(contract: ContractDocument, vulnerability: VulnerabilityType, seed: u64) -> Self {
        Self {
            contract,
            mode: AuditMode::Guided,
            vulnerability: Some(vulnerability),
            k: crate::DEFAULT_TOP_K,
            trials: crate::DEFAULT_TRIALS,
            seed,
        }
    }

    pub fn blind(contract: ContractDocument, seed: u64) -> Self {
        Self {
            contract,
            mode: AuditMode::Blind,
            vulnerability: None,
            k: crate::DEFAULT_TOP_K,
            trials: crate::DEFAULT_TRIALS,
            seed,
        }
    }

    pub fn with_trials(mut self, trials: u32) -> Self {
        self.trials = trials;
        self
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn validate(&self) -> Result<(), AuditError> {
        match (self.mode, &self.vulnerability) {
            (AuditMode::Guided, None) => Err(AuditError::InvalidJob("guided job without a vulnerability".into())),
            (AuditMode::Blind, Some(_)) => Err(AuditError::InvalidJob("blind job with a vulnerability".into())),
            _ if self.trials == 0 => Err(AuditError::InvalidJob("trials must be >= 1".into())),
            _ => Ok(()),
        }
    }

    pub fn vulnerability_name(&self) -> Option<&str> {
        self.vulnerability.as_ref().map(|v| v.name.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("invalid audit job: {0}")]
    InvalidJob(String),
    #[error("embedding failed: {0}")]
    Embedding(#[from] EmbeddingError),
    #[error("index query failed: {0}")]
    Index(#[from] IndexError),
    #[error("prompt rendering failed: {0}")]
    Prompt(#[from] PromptError),
    #[error("model call failed: {0}")]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStage {
    Validate,
    Retrieve,
    Render,
    Budget,
    Complete,
}

/// A trial that did not produce a verdict.
#[derive(Debug, thiserror::Error)]
#[error("trial failed at {stage:?}: {source}")]
pub struct TrialFailed {
    pub stage: TrialStage,
    #[source]
    pub source: AuditError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialError {
    pub stage: TrialStage,
    pub message: String,
}

impl From<TrialFailed> for TrialError {
    fn from(f: TrialFailed) -> Self {
        Self { stage: f.stage, message: f.source.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub contract_id: String,
    pub mode: AuditMode,
    pub vulnerability_name: Option<String>,
    pub trial_index: u32,
    /// Absent when the trial failed; see `error`.
    pub verdict: Option<Verdict>,
    pub error: Option<TrialError>,
    pub retrieved_ids: Vec<String>,
    /// SHA-256 of the prompt text actually sent.
    pub prompt_checksum: Option<String>,
    pub template_id: Option<TemplateId>,
    pub prompt_tokens: usize,
    pub truncated: bool,
    pub timestamp: DateTime<Utc>,
}

impl TrialRecord {
    fn failed(job: &AuditJob, trial_index: u32, error: TrialError) -> Self {
        Self {
            contract_id: job.contract.id.clone(),
            mode: job.mode,
            vulnerability_name: job.vulnerability_name().map(str::to_string),
            trial_index,
            verdict: None,
            error: Some(error),
            retrieved_ids: Vec::new(),
            prompt_checksum: None,
            template_id: None,
            prompt_tokens: 0,
            truncated: false,
            timestamp: Utc::now(),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.verdict.is_none()
    }

    fn sort_key(&self) -> (&str, Option<&str>, u32, AuditMode) {
        (&self.contract_id, self.vulnerability_name.as_deref(), self.trial_index, self.mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSettings {
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub token_budget: usize,
    /// Drop retrieved chunks that come from the audited contract itself.
    pub self_exclusion: bool,
    pub parse_mode: ParseMode,
    /// Longest query (in tokens) sent to the embedder; longer contracts are
    /// queried by their first chunk.
    pub query_token_limit: usize,
    pub query_chunk_size: usize,
    /// When set, every assembled prompt is written under this directory.
    pub prompt_log_dir: Option<PathBuf>,
}

impl Default for AuditSettings {
    fn default() -> Self {
        Self {
            model_name: "gpt-4-1106-preview".into(),
            temperature: crate::DEFAULT_TEMPERATURE,
            max_tokens: crate::BINARY_MAX_TOKENS,
            token_budget: crate::DEFAULT_TOKEN_BUDGET,
            self_exclusion: true,
            parse_mode: ParseMode::Lenient,
            query_token_limit: 8191,
            query_chunk_size: crate::DEFAULT_CHUNK_SIZE,
            prompt_log_dir: None,
        }
    }
}

/// Everything a trial needs. All services are shared read-only across
/// worker threads.
#[derive(Clone, Copy)]
pub struct AuditServices<'a> {
    pub index: &'a dyn VectorSearch,
    pub embedder: &'a dyn EmbeddingProvider,
    pub llm: &'a dyn ChatProvider,
    pub tokenizer: &'a dyn Tokenizer,
    pub settings: &'a AuditSettings,
}

/// Text embedded to query the index: the contract source alone, or its first
/// `query_chunk_size` tokens when the source exceeds `query_token_limit`.
pub fn retrieval_query_text(contract: &ContractDocument, services: &AuditServices<'_>) -> String {
    let s = services.settings;
    if services.tokenizer.count(&contract.source_text) <= s.query_token_limit {
        contract.source_text.clone()
    } else {
        truncate_tokens(&contract.source_text, s.query_chunk_size, services.tokenizer)
    }
}

/// Top-`k` context for `contract`. The query never includes vulnerability
/// metadata.
pub fn retrieve_context(
    contract: &ContractDocument,
    k: usize,
    services: &AuditServices<'_>,
) -> Result<Vec<RetrievalHit>, AuditError> {
    if k == 0 || services.index.stats().count == 0 {
        return Ok(Vec::new());
    }
    let query = embed_text(&retrieval_query_text(contract, services), services.embedder)?;
    let own_id = contract.id.as_str();
    let not_self = |_: &str, meta: &Metadata| meta.get("contract_id").and_then(|v| v.as_str()) != Some(own_id);
    let filter: Option<RecordFilter<'_>> =
        if services.settings.self_exclusion { Some(&not_self) } else { None };
    Ok(services.index.query_filtered(&query, k, filter)?)
}

/// Renders the (unfitted) prompt for `job` given retrieved `hits`.
pub fn render_prompt(
    job: &AuditJob,
    hits: &[RetrievalHit],
    tokenizer: &dyn Tokenizer,
) -> Result<AssembledPrompt, AuditError> {
    let context_hits = hits.to_vec();
    let question = job.contract.source_text.clone();
    let prompt = match (&job.mode, &job.vulnerability) {
        (AuditMode::Guided, Some(v)) => render_guided(
            &GuidedPromptInputs {
                context_hits,
                question,
                vulnerability_type: v.name.clone(),
                vulnerability_description: v.description.clone(),
            },
            tokenizer,
        )?,
        (AuditMode::Blind, _) => render_blind(&BlindPromptInputs { context_hits, question }, tokenizer)?,
        (AuditMode::Guided, None) => return Err(AuditError::InvalidJob("guided job without a vulnerability".into())),
    };
    Ok(prompt)
}

fn stage<T>(stage: TrialStage, r: Result<T, impl Into<AuditError>>) -> Result<T, TrialFailed> {
    r.map_err(|e| TrialFailed { stage, source: e.into() })
}

fn log_prompt(dir: &Path, job: &AuditJob, trial_index: u32, text: &str) {
    let mut path = dir.join(&job.contract.id);
    if let Some(v) = job.vulnerability_name() {
        path = path.join(v.replace(['/', '\\'], "_"));
    }
    let result = fs::create_dir_all(&path).and_then(|_| fs::write(path.join(format!("{trial_index}.txt")), text));
    if let Err(e) = result {
        log::warn!("could not log prompt for {} trial {trial_index}: {e}", job.contract.id);
    }
}

/// Retrieval and prompt shared by every trial of a job: both depend only on
/// the job, so they are computed once.
#[derive(Debug, Clone)]
pub struct PreparedJob {
    pub hits: Vec<RetrievalHit>,
    /// Full render before budget fitting.
    pub rendered: AssembledPrompt,
    /// What is sent: `rendered` fitted to the token budget.
    pub prompt: AssembledPrompt,
    pub prompt_checksum: String,
}

/// validate → retrieve → render → fit.
pub fn prepare_job(job: &AuditJob, services: &AuditServices<'_>) -> Result<PreparedJob, TrialFailed> {
    stage(TrialStage::Validate, job.validate())?;
    let hits = stage(TrialStage::Retrieve, retrieve_context(&job.contract, job.k, services))?;
    let rendered = stage(TrialStage::Render, render_prompt(job, &hits, services.tokenizer))?;
    let prompt =
        stage(TrialStage::Budget, fit_to_budget(&rendered, services.settings.token_budget, services.tokenizer))?;
    let prompt_checksum = prompt.checksum();
    Ok(PreparedJob { hits, rendered, prompt, prompt_checksum })
}

/// complete → parse for one trial of a prepared job. A context overflow
/// reported by the model is retried once with a 5% tighter budget.
pub fn run_prepared_trial(
    job: &AuditJob,
    trial_index: u32,
    prepared: &PreparedJob,
    services: &AuditServices<'_>,
) -> Result<TrialRecord, TrialFailed> {
    let s = services.settings;
    let mut call = CallKey::new(job.contract.id.clone(), trial_index, job.seed);
    let request = |p: &AssembledPrompt| ChatRequest {
        model_name: s.model_name.clone(),
        temperature: s.temperature,
        max_tokens: s.max_tokens,
        prompt_text: p.text.clone(),
    };
    let mut refitted = None;
    let response = match services.llm.complete(&request(&prepared.prompt), &call) {
        Err(LlmError::ContextOverflow(_)) => {
            let tighter = (s.token_budget.min(prepared.prompt.token_count) as f64 * 0.95).floor() as usize;
            let prompt = stage(TrialStage::Budget, fit_to_budget(&prepared.rendered, tighter, services.tokenizer))?;
            call.attempt = 1;
            let response = services.llm.complete(&request(&prompt), &call);
            refitted = Some(prompt);
            response
        }
        other => other,
    };
    let response = stage(TrialStage::Complete, response)?;
    let (prompt, checksum) = match &refitted {
        Some(p) => (p, p.checksum()),
        None => (&prepared.prompt, prepared.prompt_checksum.clone()),
    };

    if let Some(dir) = &s.prompt_log_dir {
        log_prompt(dir, job, trial_index, &prompt.text);
    }
    Ok(TrialRecord {
        contract_id: job.contract.id.clone(),
        mode: job.mode,
        vulnerability_name: job.vulnerability_name().map(str::to_string),
        trial_index,
        verdict: Some(parse_verdict_with(&response.text, s.parse_mode)),
        error: None,
        retrieved_ids: prepared.hits.iter().map(|h| h.id.clone()).collect(),
        prompt_checksum: Some(checksum),
        template_id: Some(prompt.template_id),
        prompt_tokens: prompt.token_count,
        truncated: prompt.truncated,
        timestamp: Utc::now(),
    })
}

/// retrieve → render → fit → complete → parse for one trial.
pub fn run_trial(job: &AuditJob, trial_index: u32, services: &AuditServices<'_>) -> Result<TrialRecord, TrialFailed> {
    run_prepared_trial(job, trial_index, &prepare_job(job, services)?, services)
}

/// Runs every `(job, trial_index)` pair with up to `parallelism` workers.
///
/// Jobs are prepared once, then trials run. Failed trials are kept as
/// records with `error` set. Output is sorted by
/// `(contract_id, vulnerability_name, trial_index)`.
pub fn run_batch(jobs: &[AuditJob], services: &AuditServices<'_>, parallelism: usize) -> Vec<TrialRecord> {
    let prepared: Vec<Result<PreparedJob, TrialError>> =
        parallel::map_with_threads(jobs, parallelism, |job| prepare_job(job, services).map_err(TrialError::from));
    let work: Vec<(usize, u32)> =
        jobs.iter().enumerate().flat_map(|(j, job)| (0..job.trials).map(move |t| (j, t))).collect();
    let mut records = parallel::map_with_threads(&work, parallelism, |&(j, t)| {
        let job = &jobs[j];
        let result = match &prepared[j] {
            Ok(p) => run_prepared_trial(job, t, p, services).map_err(TrialError::from),
            Err(e) => Err(e.clone()),
        };
        result.unwrap_or_else(|e| {
            log::debug!("{} trial {t}: {}", job.contract.id, e.message);
            TrialRecord::failed(job, t, e)
        })
    });
    records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    records
}

/// SHA-256 over the records in order, excluding wall-clock timestamps.
pub fn trial_log_digest(records: &[TrialRecord]) -> String {
    let mut buf = Vec::new();
    for r in records {
        let mut v = serde_json::to_value(r).expect("record serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timestamp");
        }
        buf.extend_from_slice(v.to_string().as_bytes());
        buf.push(b'\n');
    }
    sha256_hex(&buf)
}

pub fn write_trial_log(path: &Path, records: &[TrialRecord]) -> Result<(), jsonl::JsonlError> {
    jsonl::write_rows(path, records)
}

pub fn read_trial_log(path: &Path) -> Result<Vec<TrialRecord>, jsonl::JsonlError> {
    jsonl::read_rows(path)
}

/// Appends records to an open writer as JSON Lines.
pub fn append_trial_records<W: Write>(out: W, records: &[TrialRecord]) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    for r in records {
        jsonl::write_row(&mut out, r)?;
    }
    out.flush()
}

/// Chunks, embeds and indexes `docs` (normally the INDEX split).
///
/// Whitespace-only chunks carry no retrievable content and are skipped.
/// When `cache` is given, embeddings are reused from it and new ones are
/// appended to `checkpoint`.
pub fn build_index(
    docs: &[&ContractDocument],
    chunk_size: usize,
    tokenizer: &dyn Tokenizer,
    embedder: &dyn EmbeddingProvider,
    cache: Option<(&mut EmbeddingCache, Option<&Path>)>,
) -> Result<VectorIndex, AuditError> {
    let per_doc = parallel::map(docs, |d| chunk_document(d, chunk_size, tokenizer));
    let mut chunks = Vec::new();
    let mut labels = Vec::new();
    for (doc, doc_chunks) in docs.iter().zip(per_doc) {
        for c in doc_chunks.into_iter().filter(|c| !c.text.trim().is_empty()) {
            chunks.push(c);
            labels.push(&doc.labels);
        }
    }
    let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
    let vectors = match cache {
        Some((cache, checkpoint)) => embed_batch_cached(&texts, embedder, cache, checkpoint)?,
        None => embed_batch(&texts, embedder)?,
    };
    let config = embedder.config();
    let mut index = VectorIndex::new(config.dim, config.provider_id.clone());
    let records = chunks
        .into_iter()
        .zip(vectors)
        .zip(labels)
        .map(|((c, vector), labels)| {
            let mut metadata = Metadata::new();
            metadata.insert("contract_id".into(), c.contract_id.clone().into());
            metadata.insert("seq_index".into(), c.seq_index.into());
            metadata.insert("labels".into(), labels.iter().cloned().collect::<Vec<_>>().into());
            metadata.insert("text".into(), c.text.into());
            VectorRecord { id: c.chunk_id, vector, metadata }
        })
        .collect();
    index.upsert(records)?;
    Ok(index)
}
