//! Command-line front end.
//!
//! Exit status: 0 on success, 2 for configuration or usage errors, 1 for
//! failures during a run.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsim::experiment::{self, ExperimentError, RunConfig};
use fedsim::metrics;
use fedsim::sim;
use fedsim::strategies::StrategyRegistry;

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Virtual-time asynchronous federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration for one or more seeds and write the metrics CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured seed.
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Comma-separated seeds; each writes `<out stem>_seed<N>.csv`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Metrics CSV path; overrides `output.metrics`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Event-trace CSV path; overrides `output.trace`.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Overrides `strategy.name`.
        #[arg(long)]
        strategy: Option<String>,
        /// Overrides `sim.budget` (virtual seconds).
        #[arg(long)]
        budget: Option<f64>,
    },
    /// Summarize metrics CSVs: final accuracy, time to target, accuracy at
    /// fixed rounds.
    Report {
        /// Target accuracy for the time-to-target column.
        #[arg(long)]
        target: f64,
        /// Warm-up length; accuracy is reported at this round and at 10x it.
        #[arg(long, default_value_t = 1000)]
        tg: u64,
        /// Also write the table as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Draw the configured partition and write it as a partition-spec file.
    Partition {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List the registered strategies.
    Strategies,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn seeded_path(path: &Path, seed: u64) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}_seed{seed}{ext}"))
}

#[allow(clippy::too_many_arguments)]
fn run(
    config: &Path,
    seed: Option<u64>,
    seeds: Vec<u64>,
    out: Option<PathBuf>,
    trace: Option<PathBuf>,
    strategy: Option<String>,
    budget: Option<f64>,
) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(name) = strategy {
        cfg.strategy.name = name;
    }
    if let Some(b) = budget {
        cfg.sim.budget = b;
    }
    cfg.validate()?;
    let out = out.or_else(|| cfg.output.metrics.clone());
    let trace = trace.or_else(|| cfg.output.trace.clone());
    let multi = !seeds.is_empty();
    let seeds = if multi { seeds } else { vec![seed.unwrap_or(cfg.seed)] };
    for s in seeds {
        let outcome = experiment::run_experiment(&cfg, s, trace.is_some())?;
        let last = outcome.records.last().expect("a run always records at least one evaluation");
        eprintln!(
            "seed {s}: {} rounds in {:.0} virtual s, final accuracy {:.4}, {} corrections",
            outcome.final_state.t_g, outcome.final_time, last.test_accuracy, outcome.stats.corrections
        );
        match &out {
            Some(path) => {
                let path = if multi { seeded_path(path, s) } else { path.clone() };
                metrics::write_csv(&path, &outcome.records).map_err(|e| Failure::Runtime(e.to_string()))?;
            }
            None => print!("{}", metrics::to_csv_string(&outcome.records)),
        }
        if let Some(path) = &trace {
            let path = if multi { seeded_path(path, s) } else { path.clone() };
            sim::write_trace(&path, &outcome.trace).map_err(|e| Failure::Runtime(e.to_string()))?;
        }
    }
    Ok(())
}

fn report(target: f64, tg: u64, csv: Option<PathBuf>, files: &[PathBuf]) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Failure::Config(format!("--target must lie in [0, 1], got {target}")));
    }
    let rows = metrics::report(files, target, tg).map_err(|e| match e {
        metrics::MetricsError::Schema { .. } | metrics::MetricsError::NoInputs => Failure::Config(e.to_string()),
        other => Failure::Runtime(other.to_string()),
    })?;
    print!("{}", metrics::render_text(&rows, target, tg));
    if let Some(path) = csv {
        std::fs::write(&path, metrics::render_csv(&rows))
            .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn partition(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let prepared = experiment::prepare(&cfg, seed.unwrap_or(cfg.seed))?;
    prepared
        .partition
        .write(out)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    eprintln!(
        "{} clients, {} distillation samples, {} test samples",
        prepared.partition.clients(),
        prepared.partition.distill_indices.len(),
        prepared.test.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            seeds,
            out,
            trace,
            strategy,
            budget,
        } => run(&config, seed, seeds, out, trace, strategy, budget),
        Command::Report { target, tg, csv, files } => report(target, tg, csv, &files),
        Command::Partition { config, out, seed } => partition(&config, &out, seed),
        Command::Strategies => {
            for name in StrategyRegistry::with_builtins().names() {
                println!("{name}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
