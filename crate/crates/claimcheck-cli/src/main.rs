//! CLI entry point. Exit codes: 0 success, 2 configuration or usage errors,
//! 3 data errors (missing/corrupt datasets, prediction files, IO).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use futures::StreamExt;

use claimcheck::complexity::{
    build_combinations, combination_entry, heatmap, render_heatmap_csv, sample_combinations,
    ComplexityError, HeatmapRecord,
};
use claimcheck::config::PipelineConfig;
use claimcheck::decomposer::{dataset_granularity, Decomposer, PromptLibrary};
use claimcheck::error_analysis::{Analyzer, ErrorType, Judgment};
use claimcheck::evaluation::{confusion, load_dataset, metrics, RunReport};
use claimcheck::gateway::{ChatBackend, GatewayConfig, HttpChatBackend, LlmGateway, ScriptedChatBackend};
use claimcheck::model::{DatasetEntry, Decomposition, Method};
use claimcheck::pipeline::{
    collect_outcomes, mean_subclaims, read_run_lines, write_run_lines, Pipeline,
};
use claimcheck::retriever::{
    load_corpus, FixtureRetriever, Retriever, RetrieverBackend, VectorIndexRetriever,
    WebSearchRetriever,
};
use claimcheck::tradeoff::{render_sweep_csv, sweep_grid};
use claimcheck::verifier::{
    FixtureVerifier, LlmFewShotVerifier, RemoteNliVerifier, Verifier, VerifierBackend,
};
use claimcheck::TradeoffParams;

#[derive(Parser)]
#[command(name = "claimcheck", version, about = "Decompose-then-verify fact checking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over a dataset and write one JSONL line per entry
    Run(RunArgs),
    /// Score a finished run: confusion metrics plus an optional heatmap CSV
    Eval(EvalArgs),
    /// Decompose entries and classify decomposition errors
    DetectErrors(AnalyzeArgs),
    /// Decompose entries, then repair problematic decompositions
    Reflect(AnalyzeArgs),
    /// Expand claim-annotated entries into contiguous claim combinations
    Combos(CombosArgs),
    /// Sweep the accuracy-vs-noise trade-off grid and emit CSV
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the gateway cache directory
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Override the gateway concurrency cap
    #[arg(long)]
    max_in_flight: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run output (JSONL) to score
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write an F1 heatmap over (complexity, sub-claim count) cells
    #[arg(long)]
    heatmap: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    max_in_flight: Option<usize>,
}

#[derive(Args)]
struct CombosArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sample this many combinations; omit to keep all eligible ones
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 9)]
    max_complexity: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 0.95)]
    a0: f64,
    #[arg(long, default_value_t = 0.15)]
    lambda: f64,
    #[arg(long = "e-r", default_value_t = 0.03)]
    e_r: f64,
    #[arg(long = "e-d", default_value_t = 0.02)]
    e_d: f64,
    #[arg(long, default_value_t = 9)]
    k_max: u32,
    #[arg(long, default_value_t = 9)]
    n_max: u32,
    /// CSV destination; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    Config(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) => m,
        }
    }
}

impl From<claimcheck::config::ConfigError> for CliError {
    fn from(e: claimcheck::config::ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::DetectErrors(args) => cmd_analyze(args, AnalysisKind::Detect),
        Command::Reflect(args) => cmd_analyze(args, AnalysisKind::Reflect),
        Command::Combos(args) => cmd_combos(args),
        Command::Simulate(args) => cmd_simulate(args),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Runtime::new().map_err(data)
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(data)?;
        }
    }
    std::fs::write(path, bytes).map_err(data)
}

fn env_key(key_env: &Option<String>) -> Option<String> {
    key_env.as_ref().and_then(|name| std::env::var(name).ok())
}

struct Backends {
    gateway: Arc<LlmGateway>,
    prompts: PromptLibrary,
    decomposer: Decomposer,
    analyzer: Analyzer,
    method: Method,
    concurrency: usize,
}

fn build_backends(
    config: &PipelineConfig,
    cache_dir: Option<PathBuf>,
    max_in_flight: Option<usize>,
) -> Result<Backends, CliError> {
    let method = config.resolved_method()?;
    let concurrency = max_in_flight.unwrap_or(config.gateway.max_in_flight);
    if concurrency == 0 {
        return Err(CliError::Config("--max-in-flight must be at least 1".to_string()));
    }
    let backend: Arc<dyn ChatBackend> = match &config.gateway.endpoint {
        Some(endpoint) => Arc::new(HttpChatBackend::new(
            endpoint.clone(),
            env_key(&config.gateway.key_env),
        )),
        // No chat endpoint configured; validation guarantees no stage needs
        // one, so an empty scripted backend only ever reports a clear error.
        None => Arc::new(ScriptedChatBackend::new(Vec::new())),
    };
    let gateway = Arc::new(LlmGateway::new(
        backend,
        GatewayConfig {
            retries: config.gateway.retries,
            backoff: Duration::from_millis(config.gateway.backoff_ms),
            max_in_flight: concurrency,
            cache_dir: cache_dir.or_else(|| config.gateway.cache_dir.clone()),
        },
    ));
    let prompts = match &config.decomposer.prompt_dir {
        Some(dir) => PromptLibrary::from_dir(dir).map_err(|e| CliError::Config(e.to_string()))?,
        None => PromptLibrary::builtin(),
    };
    let model_id = config
        .decomposer
        .model_id
        .clone()
        .unwrap_or_else(|| "gpt-4o-mini".to_string());
    Ok(Backends {
        decomposer: Decomposer::new(Arc::clone(&gateway), prompts.clone(), model_id.clone()),
        analyzer: Analyzer::new(Arc::clone(&gateway), prompts.clone(), model_id),
        gateway,
        prompts,
        method,
        concurrency,
    })
}

fn build_retriever(
    config: &PipelineConfig,
    gateway: &LlmGateway,
) -> Result<Arc<dyn Retriever>, CliError> {
    let rc = &config.retriever;
    match rc.backend {
        RetrieverBackend::Fixture => {
            let corpus = load_corpus(rc.corpus_path.as_ref().unwrap()).map_err(data)?;
            Ok(Arc::new(FixtureRetriever::new(corpus, rc.top_k)))
        }
        RetrieverBackend::WebSearch => Ok(Arc::new(WebSearchRetriever::new(
            rc.endpoint.clone().unwrap(),
            env_key(&rc.key_env),
            rc.top_k,
            gateway.limiter(),
        ))),
        RetrieverBackend::VectorIndex => Ok(Arc::new(
            VectorIndexRetriever::new(
                rc.index_path.as_ref().unwrap(),
                rc.corpus_path.as_ref().unwrap(),
                rc.endpoint.clone().unwrap(),
                env_key(&rc.key_env),
                rc.embed_model.clone().unwrap(),
                rc.top_k,
                gateway.limiter(),
            )
            .map_err(data)?,
        )),
    }
}

fn build_verifier(
    config: &PipelineConfig,
    gateway: &Arc<LlmGateway>,
    prompts: &PromptLibrary,
) -> Result<Arc<dyn Verifier>, CliError> {
    let vc = &config.verifier;
    match vc.backend {
        VerifierBackend::RemoteNli => Ok(Arc::new(RemoteNliVerifier::new(
            vc.endpoint.clone().unwrap(),
            gateway.limiter(),
        ))),
        VerifierBackend::LlmFewShot => {
            let model_id = vc
                .model_id
                .clone()
                .or_else(|| config.decomposer.model_id.clone())
                .unwrap_or_else(|| "gpt-4o-mini".to_string());
            Ok(Arc::new(LlmFewShotVerifier::new(
                Arc::clone(gateway),
                prompts.clone(),
                model_id,
            )))
        }
        VerifierBackend::FixtureTable => Ok(Arc::new(
            FixtureVerifier::from_path(vc.fixture_path.as_ref().unwrap()).map_err(data)?,
        )),
    }
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let config = PipelineConfig::from_path(&args.config)?;
    let backends = build_backends(&config, args.cache_dir, args.max_in_flight)?;
    let entries = load_dataset(&args.dataset).map_err(data)?;
    let pipeline = Pipeline {
        retriever: build_retriever(&config, &backends.gateway)?,
        verifier: build_verifier(&config, &backends.gateway, &backends.prompts)?,
        decomposer: backends.decomposer,
        analyzer: Some(backends.analyzer),
        aggregator: config.aggregator,
        method: backends.method,
        concurrency: backends.concurrency,
    };
    let lines = runtime()?.block_on(pipeline.run(&entries));
    let mut bytes = Vec::new();
    write_run_lines(&lines, &mut bytes).map_err(data)?;
    write_output(&args.out, &bytes)?;
    let failed = lines.iter().filter(|l| l.status == "failed").count();
    eprintln!("wrote {} lines ({failed} failed) to {}", lines.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let lines = read_run_lines(&args.pred).map_err(data)?;
    if lines.is_empty() {
        return Err(CliError::Data(format!(
            "no predictions in {}",
            args.pred.display()
        )));
    }
    let (preds, golds, n_failed) = collect_outcomes(&lines);
    if preds.is_empty() {
        return Err(CliError::Data("every entry in the run failed".to_string()));
    }
    let cm = confusion(&preds, &golds).map_err(data)?;
    let m = metrics::<f64>(&cm);
    let report = RunReport {
        dataset_id: lines[0].dataset_id.clone(),
        method: lines[0].method.clone(),
        verifier: lines[0].verifier.clone(),
        n_entries: lines.len(),
        n_failed,
        avg_subclaims: mean_subclaims(&lines).unwrap_or(0.0),
        bacc: m.bacc,
        f1: m.f1,
        precision: m.precision,
        recall: m.recall,
    };
    let mut json = serde_json::to_string_pretty(&report).map_err(data)?;
    json.push('\n');
    write_output(&args.out, json.as_bytes())?;
    if let Some(heatmap_path) = &args.heatmap {
        let records: Vec<HeatmapRecord> = lines
            .iter()
            .filter_map(|l| {
                l.predicted.map(|predicted| HeatmapRecord {
                    complexity: l.complexity.map(|c| c as usize),
                    n_subclaims: l.n_subclaims,
                    predicted,
                    gold: l.gold,
                })
            })
            .collect();
        let grid = heatmap(&records).map_err(data)?;
        write_output(heatmap_path, render_heatmap_csv(&grid).as_bytes())?;
        if grid.skipped > 0 {
            eprintln!("heatmap skipped {} untagged records", grid.skipped);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum AnalysisKind {
    Detect,
    Reflect,
}

#[derive(serde::Serialize)]
struct AnalysisLine {
    entry_id: String,
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    judgment: Option<Judgment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    errors: Option<Vec<ErrorType>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reasoning: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    refined: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

impl AnalysisLine {
    fn failed(entry_id: String, error: String) -> Self {
        AnalysisLine {
            entry_id,
            status: "failed".to_string(),
            judgment: None,
            errors: None,
            reasoning: None,
            refined: None,
            error: Some(error),
        }
    }
}

async fn decompose_entry(
    decomposer: &Decomposer,
    method: &Method,
    entry: &DatasetEntry,
) -> Result<Decomposition, String> {
    match method {
        Method::Baseline => Ok(Decomposer::decompose_baseline(&entry.input_text)),
        Method::FactScore | Method::VeriScore | Method::Wice => decomposer
            .decompose(&entry.input_text, method, dataset_granularity(&entry.dataset_id))
            .await
            .map_err(|e| e.to_string()),
        Method::ExactN(n) => decomposer
            .decompose_exact_n(&entry.input_text, *n)
            .await
            .map_err(|e| e.to_string()),
        Method::Reflected(_) => Err("reflected methods are not valid here".to_string()),
    }
}

fn cmd_analyze(args: AnalyzeArgs, kind: AnalysisKind) -> Result<(), CliError> {
    let config = PipelineConfig::from_path(&args.config)?;
    let backends = build_backends(&config, args.cache_dir, args.max_in_flight)?;
    if matches!(backends.method, Method::Reflected(_)) {
        return Err(CliError::Config(
            "detect-errors/reflect analyze a base decomposition; configure a non-reflected method"
                .to_string(),
        ));
    }
    if config.gateway.endpoint.is_none() {
        return Err(CliError::Config(
            "gateway.endpoint is required for error analysis".to_string(),
        ));
    }
    let entries = load_dataset(&args.dataset).map_err(data)?;
    let decomposer = &backends.decomposer;
    let analyzer = &backends.analyzer;
    let method = &backends.method;
    let mut lines: Vec<AnalysisLine> = runtime()?.block_on(async {
        futures::stream::iter(entries.iter().map(|entry| async move {
            let decomposition = match decompose_entry(decomposer, method, entry).await {
                Ok(d) => d,
                Err(e) => return AnalysisLine::failed(entry.id.clone(), e),
            };
            match kind {
                AnalysisKind::Detect => {
                    match analyzer.detect_errors(&entry.input_text, &decomposition).await {
                        Ok(report) => AnalysisLine {
                            entry_id: entry.id.clone(),
                            status: "ok".to_string(),
                            judgment: Some(report.judgment),
                            errors: Some(report.errors),
                            reasoning: Some(report.reasoning),
                            refined: None,
                            error: None,
                        },
                        Err(e) => AnalysisLine::failed(entry.id.clone(), e.to_string()),
                    }
                }
                AnalysisKind::Reflect => {
                    match analyzer.reflect(&entry.input_text, &decomposition).await {
                        Ok(result) => AnalysisLine {
                            entry_id: entry.id.clone(),
                            status: "ok".to_string(),
                            judgment: Some(result.report.judgment),
                            errors: Some(result.report.errors),
                            reasoning: Some(result.report.reasoning),
                            refined: Some(
                                result.refined.texts().iter().map(|s| s.to_string()).collect(),
                            ),
                            error: None,
                        },
                        Err(e) => AnalysisLine::failed(entry.id.clone(), e.to_string()),
                    }
                }
            }
        }))
        .buffer_unordered(backends.concurrency)
        .collect()
        .await
    });
    lines.sort_by(|a, b| a.entry_id.cmp(&b.entry_id));
    let mut bytes = Vec::new();
    for line in &lines {
        serde_json::to_writer(&mut bytes, line).map_err(data)?;
        bytes.push(b'\n');
    }
    write_output(&args.out, &bytes)?;
    Ok(())
}

fn cmd_combos(args: CombosArgs) -> Result<(), CliError> {
    let entries = load_dataset(&args.dataset).map_err(data)?;
    let mut combos = Vec::new();
    let mut skipped = 0usize;
    let mut dataset_ids: std::collections::HashMap<String, String> = Default::default();
    for entry in &entries {
        dataset_ids.insert(entry.id.clone(), entry.dataset_id.clone());
        match build_combinations(entry) {
            Ok(mut c) => combos.append(&mut c),
            Err(ComplexityError::NoClaims) => skipped += 1,
            Err(e) => return Err(data(e)),
        }
    }
    if combos.is_empty() {
        return Err(CliError::Data(
            "no entries with claim annotations in the dataset".to_string(),
        ));
    }
    let selected = match args.samples {
        Some(n) => {
            sample_combinations(&combos, n, args.max_complexity, args.seed).map_err(data)?
        }
        None => combos
            .into_iter()
            .filter(|c| c.complexity <= args.max_complexity)
            .collect(),
    };
    let mut bytes = Vec::new();
    for combo in &selected {
        let dataset_id = dataset_ids
            .get(&combo.source_id)
            .cloned()
            .unwrap_or_else(|| "combined".to_string());
        let entry = combination_entry(combo, &dataset_id);
        serde_json::to_writer(&mut bytes, &entry).map_err(data)?;
        bytes.push(b'\n');
    }
    write_output(&args.out, &bytes)?;
    if skipped > 0 {
        eprintln!("skipped {skipped} entries without claim annotations");
    }
    eprintln!("wrote {} combinations to {}", selected.len(), args.out.display());
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let params = TradeoffParams {
        a0: args.a0,
        lambda: args.lambda,
        e_r: args.e_r,
        e_d: args.e_d,
    };
    params.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if args.k_max < 1 || args.n_max < 1 {
        return Err(CliError::Config("--k-max and --n-max must be at least 1".to_string()));
    }
    let csv = render_sweep_csv(&sweep_grid(&params, 1..=args.k_max, 1..=args.n_max));
    match &args.out {
        Some(path) => write_output(path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}
