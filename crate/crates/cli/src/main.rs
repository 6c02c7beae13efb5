//! `mgqda` command-line tool: fit, cross-validate, predict and run the
//! synthetic benchmarks.
//!
//! Exit codes: 0 success, 2 user error (bad flags, unreadable or malformed
//! input), 1 internal error. Diagnostics go to stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mgqda::MgqdaError;

#[derive(Debug, Parser)]
#[command(name = "mgqda", version, about = "Sparse multi-group quadratic discriminant analysis")]
pub struct Cli {
    /// TOML file with default option values (flags take precedence).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit at a fixed (λ, α) and write a model file.
    Fit(FitArgs),
    /// Choose λ by K-fold cross-validation, refit, and write a model file.
    Cv(CvArgs),
    /// Predict labels for new observations.
    Predict(PredictArgs),
    /// Run replications of a synthetic benchmark model.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Training CSV with a header row.
    #[arg(long)]
    train: PathBuf,
    /// Name of the column holding group labels.
    #[arg(long)]
    label_col: Option<String>,
    /// Comma-separated feature columns to use (default: all others).
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<String>>,
    /// Covariance divisor: `ml` (n_g) or `sample` (n_g − 1).
    #[arg(long)]
    cov_mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Convergence threshold on the largest block change in a sweep.
    #[arg(long)]
    tol: Option<f64>,
    /// Sweep limit.
    #[arg(long)]
    max_sweeps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[command(flatten)]
    solver: SolverArgs,
    /// Output model JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CvSettings {
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    n_lambda: Option<usize>,
    /// Smallest λ on the path as a fraction of λ_max.
    #[arg(long)]
    ratio: Option<f64>,
    /// Assign folds without stratifying by group.
    #[arg(long)]
    no_stratify: bool,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cv: CvSettings,
    #[arg(long)]
    alpha: Option<f64>,
    /// Shuffle observations with this seed before assigning folds.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    solver: SolverArgs,
    /// Output model JSON.
    #[arg(long)]
    out: PathBuf,
    /// Per-λ CV report CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model JSON written by `fit` or `cv`.
    #[arg(long)]
    model: PathBuf,
    /// CSV with a header row; columns are matched by the model's feature names.
    #[arg(long)]
    data: PathBuf,
    /// Add one `score_<label>` column per group.
    #[arg(long)]
    scores: bool,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Benchmark model id, 1 to 8.
    #[arg(long = "model")]
    model_id: u8,
    #[arg(long)]
    p: usize,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Test-set size, split equally across groups.
    #[arg(long)]
    n_test: Option<usize>,
    /// Tune λ by cross-validation (the default when --lambda is absent).
    #[arg(long, conflicts_with = "lambda")]
    cv: bool,
    /// Fixed λ for every replication.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[command(flatten)]
    cv_settings: CvSettings,
    /// Also evaluate the diagonal-LDA baseline (adds `baseline_error`).
    #[arg(long)]
    baseline: bool,
    /// Record fit time in `fit_ms` (makes output run-dependent).
    #[arg(long)]
    timing: bool,
    /// Output CSV; a `<out>.meta.json` sidecar describes the run.
    #[arg(long)]
    out: PathBuf,
}

/// An error caused by the user's input rather than by the program.
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UserError>() || cause.is::<std::io::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<MgqdaError>() {
            return match e {
                MgqdaError::NotPsd { .. } | MgqdaError::NoConvergence | MgqdaError::Construction(_) => 1,
                _ => 2,
            };
        }
    }
    1
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("MGQDA_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| UserError(format!("MGQDA_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let file = config::FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Fit(args) => commands::fit(args, &file),
        Command::Cv(args) => commands::cv(args, &file),
        Command::Predict(args) => commands::predict(args),
        Command::Simulate(args) => commands::simulate(args, &file),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
