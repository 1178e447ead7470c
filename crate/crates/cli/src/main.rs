mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use ragaudit_core::audit::{self, AuditServices};
use ragaudit_core::corpus::{load_catalog, scan_corpus, split_corpus};
use ragaudit_core::embeddings::{build_provider, EmbeddingCache, EmbeddingProvider};
use ragaudit_core::eval::{self, ReportFormat};
use ragaudit_core::llmclient::{ChatProvider, MockChat, MockScript, RemoteChat};
use ragaudit_core::vectorstore::VectorSearch;
use ragaudit_core::{
    AuditJob, AuditSettings, CharMergeTokenizer, ContractDocument, CorpusManifest, EmbeddingProviderConfig,
    Expectation, NonCompliancePolicy, Split, VectorIndex,
};

use config::{EmbeddingKind, LlmKind, PipelineConfig};

#[derive(Parser, Debug)]
#[command(name = "ragaudit", version, about = "Retrieval-augmented smart contract audit pipeline")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Write every assembled prompt under this directory.
    #[arg(long, global = true, value_name = "DIR")]
    log_prompts: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan a directory of .sol files into a corpus manifest.
    Ingest(IngestArgs),
    /// Chunk, embed and index the INDEX split of a manifest.
    Index(IndexArgs),
    /// Run repeated audit trials and write a trial log.
    Audit(AuditArgs),
    /// Judge a trial log and write the report and chart data.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    dir: PathBuf,
    /// JSON object mapping document id to vulnerability-type names.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Assign this fraction of documents to HOLDOUT, the rest to INDEX.
    #[arg(long)]
    holdout_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    provider: Option<EmbeddingKind>,
    /// Hash provider width.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    chunk_size: Option<usize>,
    /// Embedding checkpoint; defaults to `<out>.embcache.jsonl`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Guided,
    Blind,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("target").required(true).args(["contract", "manifest"]))]
struct AuditArgs {
    /// A single .sol file.
    #[arg(long)]
    contract: Option<PathBuf>,
    /// Audit the HOLDOUT documents of a manifest (all documents if unsplit).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Vulnerability type name; repeatable, or `all` for the whole catalog.
    #[arg(long = "vuln-type")]
    vuln_types: Vec<String>,
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    trials: Option<u32>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    llm: Option<LlmKind>,
    /// JSON mock script for `--llm mock`.
    #[arg(long)]
    mock_script: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Exclude,
    CountAsFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Trial log written by `audit`.
    #[arg(long)]
    trials: PathBuf,
    /// JSON Lines expectations; every contract expects YES when omitted.
    #[arg(long)]
    expectations: Option<PathBuf>,
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the extension of `--out`.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Chart data CSV; defaults to `<out stem>.chart.csv`.
    #[arg(long)]
    chart: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn usage_error(message: &str) -> ! {
    Cli::command().error(clap::error::ErrorKind::MissingRequiredArgument, message).exit()
}

fn run(cli: Cli) -> Result<()> {
    let mut config = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(p) = cli.parallelism {
        config.parallelism = p;
    }
    if cli.log_prompts.is_some() {
        config.log_prompts = cli.log_prompts;
    }
    match cli.command {
        Command::Ingest(args) => cmd_ingest(&config, args),
        Command::Index(args) => cmd_index(config, args),
        Command::Audit(args) => cmd_audit(config, args),
        Command::Evaluate(args) => cmd_evaluate(config, args),
    }
}

fn cmd_ingest(config: &PipelineConfig, args: IngestArgs) -> Result<()> {
    let mut manifest = scan_corpus(&args.dir, args.labels.as_deref())?;
    if let Some(fraction) = args.holdout_fraction {
        manifest = split_corpus(&manifest, fraction, config.seed, false)?;
    }
    manifest.write_jsonl(&args.out)?;
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    let holdout = manifest.with_split(Split::Holdout).count();
    println!(
        "ingested {} documents ({} holdout) into {}",
        manifest.len(),
        holdout,
        args.out.display()
    );
    Ok(())
}

fn cmd_index(mut config: PipelineConfig, args: IndexArgs) -> Result<()> {
    if let Some(p) = args.provider {
        config.embedding.provider = p;
    }
    if let Some(d) = args.dim {
        config.embedding.dim = d;
    }
    if let Some(c) = args.chunk_size {
        config.chunk_size = c;
    }
    config.validate()?;
    let manifest = CorpusManifest::read_jsonl(&args.manifest)?;
    let docs: Vec<&ContractDocument> = manifest.documents.iter().filter(|d| d.split != Split::Holdout).collect();
    let provider = build_provider(&config.embedding.provider_config())?;

    let checkpoint = args.checkpoint.unwrap_or_else(|| suffixed(&args.out, ".embcache.jsonl"));
    let mut cache = if checkpoint.exists() {
        EmbeddingCache::load(&checkpoint).context("loading embedding checkpoint")?
    } else {
        EmbeddingCache::default()
    };
    let resumed = cache.len();
    let tokenizer = CharMergeTokenizer::new();
    let index = audit::build_index(
        &docs,
        config.chunk_size,
        &tokenizer,
        provider.as_ref(),
        Some((&mut cache, Some(checkpoint.as_path()))),
    )
    .with_context(|| format!("indexing (progress kept in {})", checkpoint.display()))?;
    index.persist(&args.out)?;
    let _ = fs::remove_file(&checkpoint);

    let stats = index.stats();
    if resumed > 0 {
        println!("resumed with {resumed} cached embeddings");
    }
    println!(
        "indexed {} documents: count={} dim={} provider={}",
        docs.len(),
        stats.count,
        stats.dim,
        stats.provider_id
    );
    Ok(())
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// The embedder an index was built with, recovered from its provider id.
fn query_embedder(config: &PipelineConfig, index: &VectorIndex) -> Result<Arc<dyn EmbeddingProvider>> {
    let provider_id = index.stats().provider_id;
    let embedding = match EmbeddingProviderConfig::from_hash_provider_id(&provider_id) {
        Some(c) => c,
        None => {
            let c = config.embedding.provider_config();
            if c.provider_id != provider_id {
                bail!("index was built with {provider_id}, configured provider is {}", c.provider_id);
            }
            c
        }
    };
    Ok(build_provider(&embedding)?)
}

fn chat_provider(config: &PipelineConfig) -> Result<Box<dyn ChatProvider>> {
    Ok(match config.llm.provider {
        LlmKind::Mock => {
            let Some(path) = &config.llm.script else {
                usage_error("--llm mock requires --mock-script (or llm.script in the config)")
            };
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let script: MockScript =
                serde_json::from_str(&text).with_context(|| format!("parsing mock script {}", path.display()))?;
            Box::new(MockChat::new(script))
        }
        LlmKind::Remote => Box::new(RemoteChat::from_env(config.llm.endpoint_config())),
    })
}

fn audit_targets(args: &AuditArgs) -> Result<Vec<ContractDocument>> {
    if let Some(path) = &args.contract {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let id = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![ContractDocument::from_source(id, text)]);
    }
    let path = args.manifest.as_ref().expect("clap enforces a target");
    let manifest = CorpusManifest::read_jsonl(path)?;
    let has_holdout = manifest.with_split(Split::Holdout).next().is_some();
    Ok(manifest
        .documents
        .into_iter()
        .filter(|d| !has_holdout || d.split == Split::Holdout)
        .collect())
}

fn cmd_audit(mut config: PipelineConfig, args: AuditArgs) -> Result<()> {
    let vulnerabilities = match args.mode {
        ModeArg::Blind => {
            if !args.vuln_types.is_empty() {
                usage_error("--vuln-type is only valid with --mode guided");
            }
            vec![None]
        }
        ModeArg::Guided => {
            if args.vuln_types.is_empty() {
                usage_error("--mode guided requires --vuln-type");
            }
            let Some(catalog_path) = &args.catalog else { usage_error("--mode guided requires --catalog") };
            let catalog = load_catalog(catalog_path)?;
            if args.vuln_types.iter().any(|v| v == "all") {
                catalog.into_iter().map(Some).collect()
            } else {
                args.vuln_types
                    .iter()
                    .map(|name| {
                        catalog
                            .iter()
                            .find(|v| &v.name == name)
                            .cloned()
                            .map(Some)
                            .with_context(|| format!("vulnerability type {name:?} not in catalog"))
                    })
                    .collect::<Result<_>>()?
            }
        }
    };
    if let Some(t) = args.trials {
        config.trials = t;
    }
    if let Some(k) = args.k {
        config.k = k;
    }
    if let Some(l) = args.llm {
        config.llm.provider = l;
    }
    if args.mock_script.is_some() {
        config.llm.script = args.mock_script.clone();
    }
    config.validate()?;

    let index = VectorIndex::load(&args.index)?;
    let embedder = query_embedder(&config, &index)?;
    let llm = chat_provider(&config)?;
    let tokenizer = CharMergeTokenizer::new();
    let settings = AuditSettings {
        model_name: config.llm.model_name.clone(),
        temperature: config.temperature,
        max_tokens: config.max_tokens,
        token_budget: config.token_budget,
        self_exclusion: config.self_exclusion,
        parse_mode: config.llm.parse_mode,
        prompt_log_dir: config.log_prompts.clone(),
        ..AuditSettings::default()
    };
    let services = AuditServices {
        index: &index,
        embedder: embedder.as_ref(),
        llm: llm.as_ref(),
        tokenizer: &tokenizer,
        settings: &settings,
    };

    let contracts = audit_targets(&args)?;
    let mut jobs = Vec::with_capacity(contracts.len() * vulnerabilities.len());
    for c in &contracts {
        for v in &vulnerabilities {
            let job = match v {
                Some(v) => AuditJob::guided(c.clone(), v.clone(), config.seed),
                None => AuditJob::blind(c.clone(), config.seed),
            };
            jobs.push(job.with_trials(config.trials).with_k(config.k));
        }
    }
    let records = audit::run_batch(&jobs, &services, config.workers());
    audit::write_trial_log(&args.out, &records)?;

    let failed = records.iter().filter(|r| r.is_failed()).count();
    println!(
        "{} trials over {} contracts written to {} ({} failed)",
        records.len(),
        contracts.len(),
        args.out.display(),
        failed
    );
    if failed == records.len() && !records.is_empty() {
        let first = records[0].error.as_ref().map(|e| e.message.as_str()).unwrap_or("");
        bail!("every trial failed; first error: {first}");
    }
    Ok(())
}

fn cmd_evaluate(mut config: PipelineConfig, args: EvaluateArgs) -> Result<()> {
    if let Some(p) = args.policy {
        config.policy = match p {
            PolicyArg::Exclude => NonCompliancePolicy::Exclude,
            PolicyArg::CountAsFailure => NonCompliancePolicy::CountAsFailure,
        };
    }
    let trials = audit::read_trial_log(&args.trials)?;
    let expectations = match &args.expectations {
        Some(path) => eval::load_expectations(path)?,
        None => {
            let mut ids: Vec<&str> = trials.iter().map(|t| t.contract_id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            ids.into_iter().map(Expectation::yes).collect()
        }
    };
    let summary = eval::aggregate(&trials, &expectations, config.policy)?;
    let format = match args.format {
        Some(FormatArg::Json) => ReportFormat::Json,
        Some(FormatArg::Csv) => ReportFormat::Csv,
        None => ReportFormat::from_path(&args.out),
    };
    eval::emit_report(&summary, format, &args.out)?;

    let chart_path = args.chart.unwrap_or_else(|| args.out.with_extension("chart.csv"));
    write_chart(&summary, &chart_path)?;

    print!("{}", eval::format_totals_table(&summary));
    let check = eval::chart_cross_check(&summary);
    println!(
        "chart cross-check: rounded percentages imply {:.1} successes vs {} counted (gap {:+.1})",
        check.implied_successes,
        check.total_successes,
        check.gap()
    );
    Ok(())
}

fn write_chart(summary: &ragaudit_core::EvaluationSummary, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing chart data {}", path.display()))?;
    w.write_record(["ordinal", "contract_id", "vulnerability", "success_percentage"])?;
    for (ordinal, pct) in eval::emit_rate_chart_data(summary) {
        let r = &summary.per_contract[ordinal - 1];
        w.write_record([
            ordinal.to_string(),
            r.contract_id.clone(),
            r.vulnerability_name.clone().unwrap_or_default(),
            format!("{pct:.1}"),
        ])?;
    }
    w.flush()?;
    Ok(())
}
