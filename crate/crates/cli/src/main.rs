//! Command-line front end: full runs, single-colony debugging, standalone
//! decontamination, re-export, metrics reports, and resume.

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use evoforge::config::{BackendMode, PipelineConfig};
use evoforge::decontam::{build_index, decontaminate, load_benchmark_questions};
use evoforge::domain::{make_seed_instruction, CandidateSample, ColonyState, Instruction};
use evoforge::evolution::{run_colony, ColonyEndReason, StepDirective};
use evoforge::export::{read_jsonl, to_records, write_chat_jsonl, write_jsonl, ExportRecord};
use evoforge::filters::ValidatorRegistry;
use evoforge::gateway::Gateway;
use evoforge::persist::{write_atomic, RunStatus, RunStore};
use evoforge::pipeline::{
    build_gateway, resume_pipeline, run_pipeline, PipelineError, PipelineOutcome, RunOptions,
};
use evoforge::prompts::PromptSet;
use evoforge::report::{build_report, render_json, render_text};
use evoforge::seeds::load_seeds;
use std::path::{Path, PathBuf};
use std::sync::Arc;

const EXIT_OK: i32 = 0;
const EXIT_FATAL: i32 = 1;
const EXIT_INVALID_CONFIG: i32 = 2;
const EXIT_PARTIAL_BUDGET: i32 = 3;

#[derive(Parser)]
#[command(
    name = "evoforge",
    version,
    about = "Evolutionary synthesis of coding instruction-solution pairs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline: colonies, generations, decontamination, export
    Run(RunArgs),
    /// Run a single colony and print its outcome (debugging aid)
    Colony(ColonyArgs),
    /// Screen an exported record file against benchmark questions
    Decontaminate(DecontamArgs),
    /// Rebuild the export of a finished run, optionally as chat pairs
    Export(ExportArgs),
    /// Summarize a run's manifest as text or JSON
    Report(ReportArgs),
    /// Continue an interrupted run from its checkpoints
    Resume(ResumeArgs),
}

/// Overrides applied on top of the config file and environment.
/// Precedence: flags > environment > file.
#[derive(Args)]
struct ConfigOverrides {
    /// Configuration file (TOML); built-in defaults apply when omitted
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Number of generations
    #[arg(long, value_name = "N")]
    generations: Option<u32>,
    /// Number of colonies per generation
    #[arg(long, value_name = "N")]
    colonies: Option<u32>,
    /// Accepted-sample target per colony
    #[arg(long, value_name = "N")]
    population: Option<u32>,
    /// Probability that a step mutates rather than crosses over
    #[arg(long = "mutation-prob", value_name = "P")]
    mutation_prob: Option<f64>,
    /// Master random seed
    #[arg(long, value_name = "SEED")]
    rng_seed: Option<u64>,
    #[command(flatten)]
    endpoints: EndpointOverrides,
    /// Decontamination screening threshold (cosine similarity)
    #[arg(long, value_name = "T")]
    threshold: Option<f64>,
}

/// Backend routing flags, honored on fresh runs and resumes alike.
#[derive(Args)]
struct EndpointOverrides {
    /// Completion endpoint base URL (switches the backend to HTTP mode)
    #[arg(long = "backend-url", value_name = "URL", conflicts_with = "mock")]
    backend_url: Option<String>,
    /// Embedding endpoint base URL, when different from the backend URL
    #[arg(long = "embedding-url", value_name = "URL")]
    embedding_url: Option<String>,
    /// Use the deterministic offline backend
    #[arg(long)]
    mock: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// Seed instruction file (line-delimited records)
    #[arg(long, value_name = "FILE", required_unless_present = "resume")]
    seeds: Option<PathBuf>,
    /// Directory that holds run folders
    #[arg(long = "out-dir", value_name = "DIR", default_value = "runs")]
    out_dir: PathBuf,
    /// Run identifier; derived from the clock when omitted
    #[arg(long = "run-id", value_name = "ID")]
    run_id: Option<String>,
    /// Resume this run instead of starting fresh
    #[arg(long, value_name = "RUN_ID")]
    resume: Option<String>,
    /// Halt cleanly after this many colony steps (resumable later)
    #[arg(long = "abort-after-steps", value_name = "N")]
    abort_after_steps: Option<u64>,
}

#[derive(Args)]
struct ColonyArgs {
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// Seed instruction file (line-delimited records)
    #[arg(long, value_name = "FILE")]
    seeds: PathBuf,
    /// Colony index (selects the colony's random stream)
    #[arg(long = "colony-index", value_name = "N", default_value_t = 0)]
    colony_index: u32,
    /// Write the colony's accepted pool as export records
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct DecontamArgs {
    /// Input records (line-delimited export format)
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Benchmark question file (repeatable)
    #[arg(long = "benchmark", value_name = "FILE", required = true)]
    benchmarks: Vec<PathBuf>,
    /// Retained records are written here
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    /// Verdict log destination (defaults next to the output file)
    #[arg(long, value_name = "FILE")]
    verdicts: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ExportFormat {
    /// Full records: id, instruction, input, solution, origin, lineage
    Records,
    /// Two-message chat pairs (user instruction, assistant solution)
    Chat,
}

#[derive(Args)]
struct ExportArgs {
    /// Directory that holds run folders
    #[arg(long = "out-dir", value_name = "DIR", default_value = "runs")]
    out_dir: PathBuf,
    /// Run to export
    #[arg(long = "run-id", value_name = "ID")]
    run_id: String,
    #[arg(long, value_enum, default_value_t = ExportFormat::Records)]
    format: ExportFormat,
    /// Destination file
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory that holds run folders
    #[arg(long = "out-dir", value_name = "DIR", default_value = "runs")]
    out_dir: PathBuf,
    /// Run to summarize
    #[arg(long = "run-id", value_name = "ID")]
    run_id: String,
    /// Emit machine-readable JSON instead of text
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ResumeArgs {
    /// Run to continue
    #[arg(value_name = "RUN_ID")]
    run_id: String,
    /// Directory that holds run folders
    #[arg(long = "out-dir", value_name = "DIR", default_value = "runs")]
    out_dir: PathBuf,
    #[command(flatten)]
    endpoints: EndpointOverrides,
    /// Halt cleanly after this many colony steps (resumable later)
    #[arg(long = "abort-after-steps", value_name = "N")]
    abort_after_steps: Option<u64>,
}

/// An error carrying the process exit code it should produce.
struct Failure {
    code: i32,
    error: anyhow::Error,
}

fn fatal(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_FATAL,
        error: error.into(),
    }
}

fn invalid(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_INVALID_CONFIG,
        error: error.into(),
    }
}

fn main() {
    let cli = Cli::parse();
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(err) => {
            eprintln!("error: failed to start async runtime: {err}");
            std::process::exit(EXIT_FATAL);
        }
    };
    let code = match runtime.block_on(dispatch(cli.command)) {
        Ok(code) => code,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            failure.code
        }
    };
    drop(runtime);
    std::process::exit(code);
}

async fn dispatch(command: Command) -> Result<i32, Failure> {
    match command {
        Command::Run(args) => cmd_run(args).await,
        Command::Colony(args) => cmd_colony(args).await,
        Command::Decontaminate(args) => cmd_decontaminate(args).await,
        Command::Export(args) => cmd_export(args),
        Command::Report(args) => cmd_report(args),
        Command::Resume(args) => {
            cmd_resume(
                &args.out_dir,
                &args.run_id,
                &args.endpoints,
                args.abort_after_steps,
            )
            .await
        }
    }
}

/// Builds the effective config: file (or defaults), then environment, then
/// flags; validated before use.
fn effective_config(overrides: &ConfigOverrides) -> Result<PipelineConfig, Failure> {
    let mut config = match &overrides.config {
        Some(path) => PipelineConfig::load(path).map_err(invalid)?,
        None => PipelineConfig::default(),
    };
    config.apply_env();
    let gen = &mut config.generation;
    if let Some(v) = overrides.generations {
        gen.n_generations = v;
    }
    if let Some(v) = overrides.colonies {
        gen.n_colonies = v;
    }
    if let Some(v) = overrides.population {
        gen.max_population = v;
    }
    if let Some(v) = overrides.mutation_prob {
        gen.mutation_probability = v;
    }
    if let Some(v) = overrides.rng_seed {
        gen.rng_seed = v;
    }
    if let Some(v) = overrides.threshold {
        config.decontam.settings.screening_threshold = v;
    }
    apply_endpoints(&mut config, &overrides.endpoints);
    config.validate().map_err(invalid)?;
    Ok(config)
}

fn apply_endpoints(config: &mut PipelineConfig, endpoints: &EndpointOverrides) {
    if let Some(url) = &endpoints.backend_url {
        config.backend.http.base_url = url.clone();
        config.backend.mode = BackendMode::Http;
    }
    if let Some(url) = &endpoints.embedding_url {
        config.backend.http.embedding_base_url = Some(url.clone());
    }
    if endpoints.mock {
        config.backend.mode = BackendMode::Mock;
    }
}

fn gateway_for(config: &PipelineConfig) -> Result<Arc<Gateway>, Failure> {
    build_gateway(config).map_err(fatal)
}

fn pipeline_failure(error: PipelineError) -> Failure {
    match error {
        PipelineError::Config(_) => invalid(error),
        other => fatal(other),
    }
}

fn status_label(status: RunStatus) -> &'static str {
    match status {
        RunStatus::InProgress => "in progress",
        RunStatus::Interrupted => "interrupted",
        RunStatus::Complete => "complete",
        RunStatus::PartialBudget => "complete (budget-limited)",
        RunStatus::Failed => "failed",
    }
}

fn print_outcome(outcome: &PipelineOutcome, out_dir: &Path) {
    println!("run {}: {}", outcome.run_id, status_label(outcome.status));
    println!(
        "  directory: {}",
        out_dir.join(&outcome.run_id).display()
    );
    if outcome.already_complete {
        println!("  already finished; nothing to do");
        return;
    }
    println!(
        "  accepted samples: {}",
        outcome.manifest.totals.accepted
    );
    if let Some(entry) = &outcome.manifest.decontam {
        println!(
            "  decontamination: screened {}, removed {}",
            entry.screened, entry.removed
        );
    }
    if let Some(n) = outcome.exported_records {
        println!("  exported: {n} records (export.jsonl, export_chat.jsonl)");
    }
    if outcome.budget_exhausted_colonies > 0 {
        println!(
            "  colonies stopped on attempt budget: {}",
            outcome.budget_exhausted_colonies
        );
    }
    if outcome.status == RunStatus::Interrupted {
        println!(
            "  resume with: evoforge resume {} --out-dir {}",
            outcome.run_id,
            out_dir.display()
        );
    }
}

fn outcome_code(outcome: &PipelineOutcome) -> i32 {
    match outcome.status {
        RunStatus::PartialBudget => EXIT_PARTIAL_BUDGET,
        RunStatus::Failed => EXIT_FATAL,
        _ => EXIT_OK,
    }
}

async fn cmd_run(args: RunArgs) -> Result<i32, Failure> {
    if let Some(run_id) = &args.resume {
        if args.overrides.generations.is_some()
            || args.overrides.colonies.is_some()
            || args.overrides.population.is_some()
            || args.overrides.mutation_prob.is_some()
            || args.overrides.rng_seed.is_some()
        {
            eprintln!(
                "warning: generation parameters come from the run's manifest; \
                 overrides are ignored on resume"
            );
        }
        return cmd_resume(
            &args.out_dir,
            run_id,
            &args.overrides.endpoints,
            args.abort_after_steps,
        )
        .await;
    }
    let config = effective_config(&args.overrides)?;
    let gateway = gateway_for(&config)?;
    let prompts = PromptSet::builtin();
    let options = RunOptions {
        run_id: args.run_id.unwrap_or_else(|| format!("run-{}", now_ms())),
        out_dir: args.out_dir.clone(),
        seed_path: args.seeds.expect("clap enforces --seeds without --resume"),
        abort_after_steps: args.abort_after_steps,
    };
    let outcome = run_pipeline(&config, &options, &gateway, &prompts)
        .await
        .map_err(pipeline_failure)?;
    print_outcome(&outcome, &args.out_dir);
    Ok(outcome_code(&outcome))
}

async fn cmd_resume(
    out_dir: &Path,
    run_id: &str,
    endpoints: &EndpointOverrides,
    abort_after_steps: Option<u64>,
) -> Result<i32, Failure> {
    // The stored config governs the run; only backend routing and secrets
    // may be re-supplied (they are never persisted in usable form).
    let (_, manifest) = RunStore::open(out_dir, run_id).map_err(fatal)?;
    let mut config = manifest.config.clone();
    config.apply_env();
    apply_endpoints(&mut config, endpoints);
    let gateway = gateway_for(&config)?;
    let prompts = PromptSet::builtin();
    let outcome = resume_pipeline(out_dir, run_id, &gateway, &prompts, abort_after_steps)
        .await
        .map_err(pipeline_failure)?;
    print_outcome(&outcome, out_dir);
    Ok(outcome_code(&outcome))
}

async fn cmd_colony(args: ColonyArgs) -> Result<i32, Failure> {
    let config = effective_config(&args.overrides)?;
    let gateway = gateway_for(&config)?;
    let prompts = PromptSet::builtin();
    let registry = ValidatorRegistry::with_defaults();
    let seed_load = load_seeds(&args.seeds).map_err(fatal)?;
    if seed_load.duplicates_dropped > 0 {
        eprintln!(
            "note: dropped {} duplicate seed(s)",
            seed_load.duplicates_dropped
        );
    }
    let mut state = ColonyState::new(
        args.colony_index,
        0,
        Arc::new(seed_load.seeds),
        config.generation.rng_seed,
    );
    let end = run_colony(
        &mut state,
        &gateway,
        &prompts,
        &registry,
        &config.generation,
        |_| StepDirective::Continue,
    )
    .await
    .map_err(fatal)?;
    let summary = serde_json::json!({
        "colony_index": state.colony_index,
        "end_reason": end,
        "pool": state.pool.len(),
        "steps": state.counters.steps,
        "counters": state.counters,
        "token_usage": gateway.accounting(),
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).map_err(fatal)?
    );
    if let Some(output) = &args.output {
        ensure_parent(output)?;
        let written = write_jsonl(&to_records(&state.pool), output).map_err(fatal)?;
        eprintln!("wrote {written} records to {}", output.display());
    }
    Ok(match end {
        ColonyEndReason::BudgetExhausted => EXIT_PARTIAL_BUDGET,
        _ => EXIT_OK,
    })
}

async fn cmd_decontaminate(args: DecontamArgs) -> Result<i32, Failure> {
    let config = effective_config(&args.overrides)?;
    let gateway = gateway_for(&config)?;
    let prompts = PromptSet::builtin();
    let records = read_jsonl(&args.input).map_err(fatal)?;
    let instructions = records
        .iter()
        .map(|record| {
            make_seed_instruction(&record.instruction, record.input.as_deref(), 0)
                .map_err(|e| fatal(anyhow::anyhow!("record {}: {e}", record.id)))
        })
        .collect::<Result<Vec<Instruction>, Failure>>()?;
    let mut questions = Vec::new();
    for path in &args.benchmarks {
        questions.extend(load_benchmark_questions(path).map_err(fatal)?);
    }
    let index = build_index(&questions, &gateway).await.map_err(fatal)?;
    let report = decontaminate(
        &instructions,
        &index,
        &gateway,
        &prompts,
        &config.decontam.settings,
    )
    .await
    .map_err(fatal)?;

    let retained: Vec<ExportRecord> = records
        .into_iter()
        .zip(&report.verdicts)
        .filter(|(_, verdict)| !verdict.removed)
        .map(|(record, _)| record)
        .collect();
    ensure_parent(&args.output)?;
    let written = write_jsonl(&retained, &args.output).map_err(fatal)?;

    let verdict_path = args.verdicts.unwrap_or_else(|| {
        let mut name = args
            .output
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "decontam".to_string());
        name.push_str(".verdicts.jsonl");
        args.output.with_file_name(name)
    });
    let mut body = String::new();
    for verdict in &report.verdicts {
        body.push_str(&serde_json::to_string(verdict).map_err(fatal)?);
        body.push('\n');
    }
    ensure_parent(&verdict_path)?;
    write_atomic(&verdict_path, body.as_bytes()).map_err(fatal)?;

    println!(
        "screened {} of {} records; removed {}; retained {} -> {}",
        report.screened,
        report.verdicts.len(),
        report.removed,
        written,
        args.output.display()
    );
    println!("verdicts: {}", verdict_path.display());
    Ok(EXIT_OK)
}

fn cmd_export(args: ExportArgs) -> Result<i32, Failure> {
    let (store, manifest) = RunStore::open(&args.out_dir, &args.run_id).map_err(fatal)?;
    match manifest.status {
        RunStatus::Complete | RunStatus::PartialBudget => {}
        status => {
            return Err(fatal(anyhow::anyhow!(
                "run {} is {}; finish or resume it before exporting",
                args.run_id,
                status_label(status)
            )))
        }
    }
    let mut samples: Vec<CandidateSample> = Vec::new();
    for generation in 0..manifest.config.generation.n_generations {
        samples.extend(store.load_artifact(generation).map_err(fatal)?.merged_pool);
    }
    if manifest.decontam.is_some() {
        let verdicts = store.load_verdicts().map_err(fatal)?;
        if verdicts.len() != samples.len() {
            return Err(fatal(anyhow::anyhow!(
                "verdict log covers {} records but the run holds {}",
                verdicts.len(),
                samples.len()
            )));
        }
        samples = samples
            .into_iter()
            .zip(&verdicts)
            .filter(|(_, verdict)| !verdict.removed)
            .map(|(sample, _)| sample)
            .collect();
    }
    let records = to_records(&samples);
    ensure_parent(&args.output)?;
    let written = match args.format {
        ExportFormat::Records => write_jsonl(&records, &args.output).map_err(fatal)?,
        ExportFormat::Chat => write_chat_jsonl(&records, &args.output).map_err(fatal)?,
    };
    println!("wrote {written} records to {}", args.output.display());
    Ok(EXIT_OK)
}

fn cmd_report(args: ReportArgs) -> Result<i32, Failure> {
    let (_, manifest) = RunStore::open(&args.out_dir, &args.run_id).map_err(fatal)?;
    let report = build_report(&manifest);
    if args.json {
        println!("{}", render_json(&report));
    } else {
        print!("{}", render_text(&report));
    }
    Ok(EXIT_OK)
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))
                .map_err(fatal)?;
        }
    }
    Ok(())
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
