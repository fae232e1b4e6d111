//! Command-line front end: training runs, the per-beta grid-search baseline,
//! post-training sweeps, exact linear-case verification, gradient checks and
//! result reports.
//!
//! Exit codes: 0 success, 1 argument/config validation failure, 2 runtime or
//! numerical failure. Progress goes to stderr; machine-readable results go
//! only to files and stdout.

mod commands;
mod config;
mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{RunConfig, TaskKind};
use hypervib_core::Error;

#[derive(Parser, Debug)]
#[command(name = "hypervib", version, about = "Hypernetwork-conditioned information bottleneck models", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct CommonOpts {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for every random draw.
    #[arg(long)]
    seed: Option<u64>,
    /// Task selection.
    #[arg(long, value_enum)]
    task: Option<TaskKind>,
    /// Lower end of the training beta range.
    #[arg(long)]
    beta_min: Option<f64>,
    /// Upper end of the training beta range.
    #[arg(long)]
    beta_max: Option<f64>,
    /// Channel signal-to-noise ratio in dB.
    #[arg(long)]
    snr_db: Option<f64>,
    /// Parallel workers for grid training.
    #[arg(long)]
    workers: Option<usize>,
}

impl CommonOpts {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(task) = self.task {
            cfg.task = task;
        }
        if let Some(v) = self.beta_min {
            cfg.beta_min = v;
        }
        if let Some(v) = self.beta_max {
            cfg.beta_max = v;
        }
        if let Some(v) = self.snr_db {
            cfg.snr_db = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_grid(raw: &str) -> Result<Vec<f64>, String> {
    let mut out = Vec::new();
    for piece in raw.split(',') {
        let piece = piece.trim();
        if piece.is_empty() {
            continue;
        }
        let v: f64 = piece.parse().map_err(|_| format!("'{piece}' is not a number"))?;
        if !(v > 0.0) {
            return Err(format!("grid values must be positive, got {v}"));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err("grid must contain at least one value".into());
    }
    Ok(out)
}

#[derive(Args, Debug)]
struct TrainHyperArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Output directory (checkpoint.json, results.csv).
    #[arg(long)]
    out: PathBuf,
    /// Also write measured per-run training times to this CSV.
    #[arg(long)]
    timing_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainVibArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// The fixed trade-off weight to train at.
    #[arg(long)]
    beta: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    timing_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Comma-separated beta grid; defaults to half-decade steps 1e-5..1.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    timing_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Trained model checkpoint to sweep.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_parser = parse_grid)]
    grid: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Trade-off weight to evaluate at.
    #[arg(long)]
    beta: f64,
    /// Optional results CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyTheoremArgs {
    /// Feature dimension of the random instance.
    #[arg(long, default_value_t = 4)]
    d: usize,
    /// Input dimension of the random instance.
    #[arg(long, default_value_t = 3)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Acceptance threshold on the relative deviation.
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random configurations per checked component.
    #[arg(long, default_value_t = 3)]
    points: usize,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Results CSV files to aggregate.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Optional joined per-beta table CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one beta-conditioned model over the configured beta range.
    TrainHyper(TrainHyperArgs),
    /// Train one unconditioned model at a fixed beta.
    TrainVib(TrainVibArgs),
    /// Grid search: one fixed-beta training per grid point.
    Grid(GridArgs),
    /// Evaluate a trained model across a beta grid without retraining.
    Sweep(SweepArgs),
    /// Evaluate a trained model at a single beta.
    Eval(EvalArgs),
    /// Check the linear-case representability identity on a random instance.
    VerifyTheorem(VerifyTheoremArgs),
    /// Finite-difference check of every layer kind and loss term.
    Gradcheck(GradcheckArgs),
    /// Aggregate results CSVs into per-method totals and a per-beta table.
    Report(ReportArgs),
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::Parse(_) | Error::ShapeMismatch { .. } => 1,
        _ => 2,
    }
}

/// Parses and dispatches; returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are not failures.
            use clap::error::ErrorKind;
            let kind = err.kind();
            if kind == ErrorKind::DisplayHelp || kind == ErrorKind::DisplayVersion {
                print!("{err}");
                return 0;
            }
            eprint!("{err}");
            return 1;
        }
    };
    let outcome = match cli.command {
        Command::TrainHyper(args) => args
            .common
            .resolve()
            .and_then(|cfg| commands::train_hyper(&cfg, &args.out, args.timing_out.as_deref())),
        Command::TrainVib(args) => args.common.resolve().and_then(|cfg| {
            commands::train_vib(&cfg, args.beta, &args.out, args.timing_out.as_deref())
        }),
        Command::Grid(args) => args.common.resolve().and_then(|cfg| {
            commands::grid(&cfg, args.grid.as_deref(), &args.out, args.timing_out.as_deref())
        }),
        Command::Sweep(args) => args
            .common
            .resolve()
            .and_then(|cfg| commands::sweep(&cfg, &args.checkpoint, args.grid.as_deref(), &args.out)),
        Command::Eval(args) => args
            .common
            .resolve()
            .and_then(|cfg| commands::eval(&cfg, &args.checkpoint, args.beta, args.out.as_deref())),
        Command::VerifyTheorem(args) => {
            commands::verify_theorem(args.d, args.n, args.seed, args.tolerance)
        }
        Command::Gradcheck(args) => commands::gradcheck(args.seed, args.points, args.tolerance),
        Command::Report(args) => report::report(&args.inputs, args.out.as_deref()),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}
