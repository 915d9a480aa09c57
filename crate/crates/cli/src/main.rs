//! `mixmas` command line: sample planning, architecture search, full
//! training, ledger reports, and synthetic dataset generation.
//!
//! Exit codes: 0 success, 1 validation error, 2 search/stage failure,
//! 3 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mixmas::data::{generate_synthetic, DataError, Dataset, Manifest, SyntheticSpec};
use mixmas::metrics::{MetricRegistry, MetricsError};
use mixmas::sampling::{validated_sample, SamplePlan, SamplingError, SamplingParams};
use mixmas::search::{
    full_train, run_search, validate_provenance, ArchitectureSpec, Ledger, SearchConfig,
    SearchError, SearchOutcome, StageSummary, TrainConfig,
};

const LEDGER_ENV: &str = "MIXMAS_LEDGER";

#[derive(Parser)]
#[command(name = "mixmas", version, about = "Sampling-based mixer architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a statistically sized, distribution-faithful sample plan.
    Sample(SampleArgs),
    /// Run the staged architecture search against a dataset.
    Search(SearchArgs),
    /// Train an emitted architecture on the full train split.
    Train(TrainArgs),
    /// Render the benchmark ledger grouped by stage.
    Report(ReportArgs),
    /// Materialize a synthetic multimodal dataset.
    GenSynth(GenSynthArgs),
}

#[derive(Args)]
struct SampleArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Margin of error in (0,1).
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    /// z-score of the confidence level.
    #[arg(long, default_value_t = 1.96)]
    z: f64,
    /// Estimated population proportion in (0,1).
    #[arg(long = "p-hat", default_value_t = 0.5)]
    p_hat: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the accepted plan as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print machine-readable JSON to stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Search configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Benchmark ledger path (default: $MIXMAS_LEDGER).
    #[arg(long)]
    ledger: Option<PathBuf>,
    /// Write the winning architecture as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Architecture file emitted by `search`.
    #[arg(long)]
    arch: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ledger used to validate the architecture's provenance
    /// (default: $MIXMAS_LEDGER; skipped when neither is set).
    #[arg(long)]
    ledger: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    ledger: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenSynthArgs {
    /// Synthetic dataset spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory for tensors, labels, and manifest.
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
}

/// Error carrying its exit code.
enum CliError {
    Validation(String),
    Stage(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Stage(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Stage(m) | CliError::Io(m) => m,
        }
    }
}

impl From<SamplingError> for CliError {
    fn from(e: SamplingError) -> Self {
        match e {
            SamplingError::GateExhausted { .. } => CliError::Stage(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. }
            | DataError::BadMagic { .. }
            | DataError::BadDtype { .. }
            | DataError::Truncated { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Sampling(inner) => inner.into(),
            SearchError::Data(inner) => inner.into(),
            SearchError::Config { .. } | SearchError::Provenance { .. } => {
                CliError::Validation(e.to_string())
            }
            SearchError::Metrics(MetricsError::UnknownMetric { .. }) => {
                CliError::Validation(e.to_string())
            }
            SearchError::Ledger { .. } => CliError::Io(e.to_string()),
            _ => CliError::Stage(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Sample(args) => cmd_sample(args),
        Command::Search(args) => cmd_search(args),
        Command::Train(args) => cmd_train(args),
        Command::Report(args) => cmd_report(args),
        Command::GenSynth(args) => cmd_gen_synth(args),
    }
}

fn ledger_path(flag: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| std::env::var_os(LEDGER_ENV).map(PathBuf::from))
}

fn require_ledger(flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    ledger_path(flag).ok_or_else(|| {
        CliError::Validation(format!("no ledger path: pass --ledger or set ${LEDGER_ENV}"))
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{what} {}: {e}", path.display())))
}

fn write_output(path: &Path, contents: &str, what: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Io(format!("cannot write {what} {}: {e}", path.display())))
}

fn cmd_sample(args: SampleArgs) -> Result<(), CliError> {
    let manifest = Manifest::load(&args.manifest)?;
    let labels = manifest.load_labels()?;
    let params = SamplingParams {
        z: args.z,
        p_hat: args.p_hat,
        epsilon: args.epsilon,
        seed: args.seed,
        ..Default::default()
    };
    let plan = validated_sample(&labels.view(manifest.num_classes), &params)?;
    plan.validate()?;
    let json = plan_json(&plan)?;
    if let Some(out) = &args.out {
        write_output(out, &json, "sample plan")?;
    }
    if args.json {
        println!("{json}");
    } else {
        println!("dataset     {}", manifest.name);
        println!("N           {}", plan.population);
        println!("n           {:.4}", plan.uncorrected);
        println!("N'          {}", plan.size);
        println!("distance    {:.6} (linf, gate 0.05)", plan.distance);
        println!("attempt     {} (seed {})", plan.attempt, plan.accepted_seed);
        if let Some(out) = &args.out {
            println!("plan        {}", out.display());
        }
    }
    Ok(())
}

fn plan_json(plan: &SamplePlan) -> Result<String, CliError> {
    serde_json::to_string_pretty(plan)
        .map_err(|e| CliError::Io(format!("serialize sample plan: {e}")))
}

fn print_stage_table(stage: &StageSummary) {
    println!("== {} ==", stage.stage);
    println!("  {:<34} {:>10}", "module", "score");
    for row in &stage.rows {
        let marker = if row.winner { "*" } else { " " };
        let mut notes = String::new();
        if row.cached {
            notes.push_str("  (cached)");
        }
        if row.diverged {
            notes.push_str("  (diverged)");
        }
        println!("{marker} {:<34} {:>10.4}{notes}", row.module, row.score);
    }
    println!();
}

fn cmd_search(args: SearchArgs) -> Result<(), CliError> {
    let manifest = Manifest::load(&args.manifest)?;
    let ds = Dataset::load(manifest)?;
    let config: SearchConfig = read_json(&args.config, "search config")?;
    let ledger_file = require_ledger(args.ledger)?;
    let mut ledger = Ledger::open(&ledger_file)?;
    let metrics = MetricRegistry::new();
    let outcome = run_search(&ds, &config, &mut ledger, &metrics)?;

    let spec_json = serde_json::to_string_pretty(&outcome.spec)
        .map_err(|e| CliError::Io(format!("serialize architecture: {e}")))?;
    if let Some(out) = &args.out {
        write_output(out, &spec_json, "architecture")?;
    }
    if args.json {
        let doc = serde_json::to_string_pretty(&outcome)
            .map_err(|e| CliError::Io(format!("serialize outcome: {e}")))?;
        println!("{doc}");
    } else {
        print_search_outcome(&outcome, args.out.as_deref());
    }
    Ok(())
}

fn print_search_outcome(outcome: &SearchOutcome, out: Option<&Path>) {
    println!(
        "sample: N={} N'={} distance={:.4} (attempt {})",
        outcome.plan.population, outcome.plan.size, outcome.plan.distance, outcome.plan.attempt
    );
    println!();
    for stage in &outcome.stages {
        print_stage_table(stage);
    }
    println!("selected architecture:");
    for enc in &outcome.spec.encoders {
        let tag = if enc.fixed { " (fixed)" } else { "" };
        println!("  {:<12} {}{}", enc.modality, enc.config.label(), tag);
    }
    println!("  {:<12} {}", "fusion", outcome.spec.fusion);
    println!("  {:<12} {}", "fusion net", outcome.spec.fusion_network.label());
    println!();
    println!(
        "{} trainings, {} cache hits, {} optimizer steps",
        outcome.counters.trainings, outcome.counters.cache_hits, outcome.counters.optimizer_steps
    );
    if let Some(path) = out {
        println!("architecture written to {}", path.display());
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let manifest = Manifest::load(&args.manifest)?;
    let ds = Dataset::load(manifest)?;
    let spec: ArchitectureSpec = read_json(&args.arch, "architecture")?;
    if let Some(ledger_file) = ledger_path(args.ledger) {
        let ledger = Ledger::open(&ledger_file)?;
        validate_provenance(&spec, &ledger)?;
    }
    let cfg = TrainConfig { epochs: args.epochs, seed: args.seed, scheduler: true, ..Default::default() };
    let outcome = full_train(&ds, &spec, &cfg, &MetricRegistry::new())?;
    if args.json {
        let doc = serde_json::json!({
            "metric": outcome.report.metric,
            "score": outcome.report.score,
            "samples": outcome.report.samples,
            "epochs": args.epochs,
            "final_lr": outcome.final_lr,
            "optimizer_steps": outcome.counters.optimizer_steps,
        });
        println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
    } else {
        println!(
            "{} = {:.4} on {} test samples ({} epochs, final lr {:.6})",
            outcome.report.metric,
            outcome.report.score,
            outcome.report.samples,
            args.epochs,
            outcome.final_lr
        );
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let ledger_file = require_ledger(args.ledger)?;
    let ledger = if ledger_file.exists() {
        Ledger::open(&ledger_file)?
    } else {
        Ledger::in_memory()
    };
    if args.json {
        let doc = serde_json::to_string_pretty(ledger.records())
            .map_err(|e| CliError::Io(format!("serialize ledger: {e}")))?;
        println!("{doc}");
        return Ok(());
    }
    if ledger.is_empty() {
        println!("0 records");
        return Ok(());
    }
    let mut by_stage: std::collections::BTreeMap<&str, Vec<&mixmas::search::BenchmarkRecord>> =
        Default::default();
    for r in ledger.records() {
        by_stage.entry(r.stage.as_str()).or_default().push(r);
    }
    println!("{} records", ledger.len());
    println!();
    for (stage, records) in by_stage {
        println!("== {stage} ==");
        println!("  {:<34} {:>10} {:>9}", "module", "score", "time(ms)");
        for r in records {
            let flag = if r.diverged { "  (diverged)" } else { "" };
            println!("  {:<34} {:>10.4} {:>9}{flag}", r.module, r.score, r.wall_time_ms);
        }
        println!();
    }
    Ok(())
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<(), CliError> {
    let spec: SyntheticSpec = read_json(&args.spec, "synthetic spec")?;
    let manifest = generate_synthetic(&spec, &args.out_dir)?;
    println!(
        "wrote {} ({} samples, {} modalities) to {}",
        manifest.name,
        spec.num_samples,
        manifest.modalities.len(),
        args.out_dir.display()
    );
    println!("manifest: {}", args.out_dir.join("manifest.json").display());
    Ok(())
}
