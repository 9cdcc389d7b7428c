//! Operator surface: dataset runs, simulation, reporting, the coverage
//! experiment, and resuming interrupted runs.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 dataset error, 3 backend
//! outage (one or more traces truncated), 4 internal invariant violation.

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use monoform::backend::{TranscriptBackend, TranscriptLog};
use monoform::config::{ConfigError, FileConfig};
use monoform::dataset::load_dataset;
use monoform::model::{RunTrace, TerminalReason};
use monoform::process::sink::{load_sink, JsonlSink, SinkContents};
use monoform::process::{run_dataset_from, ProcessConfig, ProcessError};
use monoform::report::{aggregate_step, emit_report};
use monoform::simulation::{monte_carlo_lcb_coverage, simulate_process, SimWorld};

const EXIT_USAGE: u8 = 1;
const EXIT_DATASET: u8 = 2;
const EXIT_OUTAGE: u8 = 3;
const EXIT_INVARIANT: u8 = 4;

#[derive(Parser)]
#[command(
    name = "monoform",
    version,
    about = "Prover-gated, judge-scored monotonic refinement for full-theorem formalization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the refinement loop over a dataset with configured backends.
    Run(RunArgs),
    /// Run seeded simulation worlds against synthetic backends.
    Simulate(SimulateArgs),
    /// Rebuild report artifacts from an existing trace file.
    Report(ReportArgs),
    /// Monte-Carlo coverage experiment for the lower confidence bound.
    Coverage(CoverageArgs),
    /// Continue an interrupted run from its trace file.
    Resume(ResumeArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the seed recorded in the configuration file.
    #[arg(long)]
    seed: Option<u64>,
    /// Admit dataset records with an empty natural-language proof.
    #[arg(long)]
    allow_empty_proofs: bool,
    /// Write raw request/response transcripts to a sidecar file.
    #[arg(long)]
    transcripts: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Optional configuration file; defaults cover every knob.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of consecutive world seeds to run.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// First world seed; defaults to the config seed.
    #[arg(long)]
    first_seed: Option<u64>,
    /// Overrides max_steps from the configuration.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Accepted for interface uniformity; reporting is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CoverageArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    draws: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ResumeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Existing trace file to continue; new records are appended to it.
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    allow_empty_proofs: bool,
}

struct CliError {
    code: u8,
    source: anyhow::Error,
}

impl CliError {
    fn usage(source: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_USAGE,
            source: source.into(),
        }
    }

    fn dataset(source: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_DATASET,
            source: source.into(),
        }
    }
}

fn process_error(source: ProcessError) -> CliError {
    let code = match &source {
        ProcessError::Trace(_) => EXIT_INVARIANT,
        ProcessError::EmptyDataset => EXIT_DATASET,
        ProcessError::StepRetriable { .. } => EXIT_OUTAGE,
        _ => EXIT_USAGE,
    };
    CliError {
        code,
        source: source.into(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {:#}", err.source);
            ExitCode::from(err.code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Run(args) => run(args),
        Command::Simulate(args) => simulate(args),
        Command::Report(args) => report(args),
        Command::Coverage(args) => coverage(args),
        Command::Resume(args) => resume(args),
    }
}

fn load_config(path: Option<&Path>, seed_override: Option<u64>) -> Result<FileConfig, CliError> {
    let mut cfg = match path {
        Some(path) => FileConfig::from_file(path).map_err(CliError::usage)?,
        None => FileConfig::default(),
    };
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn provenance_header(command: &str, cfg: &FileConfig) -> serde_json::Value {
    serde_json::json!({
        "tool": "monoform",
        "command": command,
        "seed": cfg.seed,
        "config": cfg.provenance(),
    })
}

fn write_provenance(out_dir: &Path, header: &serde_json::Value) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))
        .map_err(CliError::usage)?;
    let text = serde_json::to_string_pretty(header).expect("header serializes");
    std::fs::write(out_dir.join("run_config.json"), text + "\n")
        .context("writing run_config.json")
        .map_err(CliError::usage)
}

fn emit_artifacts(traces: &[RunTrace], out_dir: &Path) -> Result<(), CliError> {
    // Traces truncated before their first committed step cannot be
    // aggregated; keep the report for the rest.
    let reportable: Vec<RunTrace> = traces
        .iter()
        .filter(|t| !t.records.is_empty())
        .cloned()
        .collect();
    if reportable.len() < traces.len() {
        eprintln!(
            "warning: {} trace(s) have no committed steps and are excluded from the report",
            traces.len() - reportable.len()
        );
    }
    if reportable.is_empty() {
        eprintln!("warning: nothing to report");
        return Ok(());
    }
    emit_report(&reportable, out_dir).map_err(|e| CliError {
        code: EXIT_USAGE,
        source: e.into(),
    })?;
    // Echo the final aggregate row as progress output.
    if let Some(steps) = reportable.iter().map(|t| t.records.len()).max() {
        if steps > 0 {
            if let Ok(row) = aggregate_step(&reportable, steps - 1) {
                println!(
                    "final step means: fv {:.2}% lp {:.2}% mc {:.2}% fq {:.2}% overall {:.2}%",
                    row.fv_pct, row.lp_pct, row.mc_pct, row.fq_pct, row.j_pct
                );
            }
        }
    }
    Ok(())
}

fn outage_code(traces: &[RunTrace]) -> u8 {
    let truncated: Vec<&str> = traces
        .iter()
        .filter(|t| t.terminal_reason == TerminalReason::ExternalStop)
        .map(|t| t.theorem_id.as_str())
        .collect();
    if truncated.is_empty() {
        0
    } else {
        eprintln!(
            "warning: {} trace(s) truncated by backend outage: {}",
            truncated.len(),
            truncated.join(", ")
        );
        EXIT_OUTAGE
    }
}

fn build_process(cfg: &FileConfig, transcripts: Option<&Path>) -> Result<ProcessConfig, CliError> {
    let mut process = cfg.build_process_config().map_err(|e| match e {
        ConfigError::Invalid(_) | ConfigError::Parse(_) | ConfigError::MissingEnv(_) => {
            CliError::usage(e)
        }
        ConfigError::Io(_) => CliError::usage(e),
    })?;
    if let Some(path) = transcripts {
        let log = TranscriptLog::create(path)
            .context("creating transcript sidecar")
            .map_err(CliError::usage)?;
        process.judge_backend = TranscriptBackend::wrap(process.judge_backend, log.clone());
        for spec in process
            .oogs
            .iter_mut()
            .chain(&mut process.fvrs)
            .chain(&mut process.regs)
        {
            spec.backend = TranscriptBackend::wrap(spec.backend.clone(), log.clone());
        }
    }
    Ok(process)
}

fn run(args: RunArgs) -> Result<u8, CliError> {
    let cfg = load_config(Some(&args.config), args.seed)?;
    let theorems =
        load_dataset(&args.dataset, args.allow_empty_proofs).map_err(CliError::dataset)?;
    if theorems.is_empty() {
        return Err(CliError::dataset(anyhow::anyhow!(
            "dataset {} holds no records",
            args.dataset.display()
        )));
    }
    let header = provenance_header("run", &cfg);
    write_provenance(&args.out_dir, &header)?;
    let transcripts = args.transcripts.then(|| args.out_dir.join("transcripts.jsonl"));
    let process = build_process(&cfg, transcripts.as_deref())?;

    let sink = JsonlSink::create(&args.out_dir.join("traces.jsonl"), header)
        .map_err(|e| CliError::usage(anyhow::Error::from(e)))?;
    let traces = run_dataset_from(&theorems, &process, &sink, &Default::default())
        .map_err(process_error)?;
    for trace in &traces {
        println!(
            "{}: {} steps, terminal {:?}, estimate {:.4}",
            trace.theorem_id,
            trace.records.len(),
            trace.terminal_reason,
            trace
                .records
                .last()
                .map_or(-1.0, |r| r.incumbent_after.estimate.value())
        );
    }
    emit_artifacts(&traces, &args.out_dir)?;
    Ok(outage_code(&traces))
}

fn simulate(args: SimulateArgs) -> Result<u8, CliError> {
    let mut cfg = load_config(args.config.as_deref(), args.seed)?;
    if let Some(steps) = args.steps {
        cfg.max_steps = steps;
    }
    if args.seeds == 0 {
        return Err(CliError::usage(anyhow::anyhow!("--seeds must be positive")));
    }
    let params = cfg.sim_params().map_err(CliError::usage)?;
    let world_cfg = cfg.world_config();
    let first_seed = args.first_seed.unwrap_or(cfg.seed);

    let header = provenance_header("simulate", &cfg);
    write_provenance(&args.out_dir, &header)?;
    let sink = JsonlSink::create(&args.out_dir.join("traces.jsonl"), header)
        .map_err(|e| CliError::usage(anyhow::Error::from(e)))?;

    let mut traces = Vec::new();
    let mut truths_json = Vec::new();
    for offset in 0..args.seeds {
        let seed = first_seed + offset;
        let world = SimWorld::new(seed, world_cfg.clone());
        let (trace, truths) = simulate_process(&world, &params).map_err(process_error)?;
        use monoform::process::sink::TraceSink;
        for record in &trace.records {
            sink.append_step(&trace.theorem_id, record)
                .map_err(|e| CliError::usage(anyhow::Error::from(e)))?;
        }
        sink.append_terminal(&trace.theorem_id, trace.terminal_reason)
            .map_err(|e| CliError::usage(anyhow::Error::from(e)))?;
        truths_json.push(serde_json::json!({
            "seed": seed,
            "theorem_id": trace.theorem_id,
            "true_objectives": truths,
        }));
        traces.push(trace);
    }
    let json = serde_json::to_string_pretty(&truths_json).expect("truths serialize");
    std::fs::write(args.out_dir.join("ground_truth.json"), json + "\n")
        .context("writing ground_truth.json")
        .map_err(CliError::usage)?;
    emit_artifacts(&traces, &args.out_dir)?;
    println!(
        "simulated {} worlds (seeds {}..{})",
        args.seeds,
        first_seed,
        first_seed + args.seeds - 1
    );
    Ok(0)
}

fn report(args: ReportArgs) -> Result<u8, CliError> {
    let contents: SinkContents = load_sink(&args.traces)
        .map_err(|e| CliError::usage(anyhow::Error::from(e)))?;
    let mut traces = Vec::new();
    for (theorem_id, partial) in contents.theorems {
        match partial.into_trace(&theorem_id) {
            Some(trace) => traces.push(trace),
            None => eprintln!("warning: trace for {theorem_id} has no terminal marker; skipped"),
        }
    }
    if traces.is_empty() {
        return Err(CliError::usage(anyhow::anyhow!(
            "no terminated traces in {}",
            args.traces.display()
        )));
    }
    for trace in &traces {
        trace.check_invariants().map_err(|e| CliError {
            code: EXIT_INVARIANT,
            source: e.into(),
        })?;
    }
    let header = serde_json::json!({
        "tool": "monoform",
        "command": "report",
        "source_traces": args.traces.display().to_string(),
        "source_header": contents.header,
    });
    write_provenance(&args.out_dir, &header)?;
    emit_artifacts(&traces, &args.out_dir)?;
    println!("report written to {}", args.out_dir.display());
    Ok(0)
}

fn coverage(args: CoverageArgs) -> Result<u8, CliError> {
    let cfg = load_config(args.config.as_deref(), args.seed)?;
    let world = SimWorld::new(cfg.seed, cfg.world_config());
    let deltas = cfg.deltas;
    let margins = world.exact_margins(deltas);
    let margin_config = monoform::model::MarginConfig::new(deltas, margins)
        .map_err(|e| CliError::usage(anyhow::Error::msg(e.to_string())))?;
    let coverage = monte_carlo_lcb_coverage(&world, &margin_config, args.draws)
        .map_err(|e| CliError::usage(anyhow::Error::msg(e.to_string())))?;
    let composed = monoform::objective::aggregate_uncertainty(deltas[0], deltas[1], deltas[2])
        .map_err(|e| CliError::usage(anyhow::Error::msg(e.to_string())))?;
    let floor = 1.0 - composed;
    println!(
        "coverage {coverage:.4} over {} draws (target >= {floor:.6} - sampling slack)",
        args.draws
    );
    if let Some(out_dir) = args.out_dir {
        let header = provenance_header("coverage", &cfg);
        write_provenance(&out_dir, &header)?;
        let json = serde_json::json!({
            "draws": args.draws,
            "coverage": coverage,
            "deltas": deltas,
            "margins": margins,
            "composed_delta": composed,
            "coverage_floor": floor,
            "noise_sigma": world.cfg.judge_sigma,
            "latent_truth": world.cfg.coverage_truth,
        });
        let text = serde_json::to_string_pretty(&json).expect("coverage serializes");
        std::fs::write(out_dir.join("coverage.json"), text + "\n")
            .context("writing coverage.json")
            .map_err(CliError::usage)?;
    }
    Ok(0)
}

fn resume(args: ResumeArgs) -> Result<u8, CliError> {
    let cfg = load_config(Some(&args.config), args.seed)?;
    let theorems =
        load_dataset(&args.dataset, args.allow_empty_proofs).map_err(CliError::dataset)?;
    let contents = load_sink(&args.traces)
        .map_err(|e| CliError::usage(anyhow::Error::from(e)))?;
    let process = build_process(&cfg, None)?;
    let sink = JsonlSink::append_to(&args.traces)
        .map_err(|e| CliError::usage(anyhow::Error::from(e)))?;
    let traces = run_dataset_from(&theorems, &process, &sink, &contents.theorems)
        .map_err(process_error)?;
    let header = provenance_header("resume", &cfg);
    write_provenance(&args.out_dir, &header)?;
    let resumed = traces.len();
    emit_artifacts(&traces, &args.out_dir)?;
    println!("resumed {} theorem(s) from {}", resumed, args.traces.display());
    Ok(outage_code(&traces))
}
