mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use neuralpkpd::cohort::Regimen;
use neuralpkpd::evaluation::parse_regimen;

/// Package version followed by the checkpoint schema version.
const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (checkpoint schema 1)");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] neuralpkpd::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(neuralpkpd::Error::DegenerateState(_)) => 3,
            _ => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "neuralpkpd", version = VERSION, about = "Neural PK/PD modelling on synthetic cohorts")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a virtual cohort and write train/test/truth CSVs plus a manifest.
    SimulateCohort(SimulateArgs),
    /// Train the PK stage or the PD stage and write a checkpoint.
    Train(TrainArgs),
    /// Windowed platelet forecasting benchmark.
    Evaluate(EvaluateArgs),
    /// Counterfactual dosing simulation with 5/50/95% bands.
    SimulateRegimen(RegimenArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Number of patients.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: `data_dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Proportional noise cv applied to both PK and platelet observations.
    #[arg(long)]
    noise: Option<f64>,
    /// Study duration in days.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum StageArg {
    Pk,
    Pd,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    /// Training records (default: `<data_dir>/train.csv`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// PK-stage checkpoint; required for `--stage pd`.
    #[arg(long)]
    pk_ckpt: Option<PathBuf>,
    /// Dense PK targets (default: truth.csv beside the data file).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Fit the PK stage to the sparse observations instead of dense targets.
    #[arg(long)]
    sparse_pk: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Early-stop window in epochs; 0 disables.
    #[arg(long)]
    patience: Option<usize>,
    /// Print the loss every N epochs to stderr; 0 prints only the last.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Held-out records (default: `<data_dir>/test.csv`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Observation cutoffs in days.
    #[arg(long, value_delimiter = ',', required = true)]
    t_obs: Vec<f64>,
    /// Prediction window starts: one per cutoff, or one for all.
    #[arg(long, value_delimiter = ',')]
    horizon: Vec<f64>,
    /// Report CSV (default: `<reports>/report.csv`).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Include the per-patient MAP baseline.
    #[arg(long)]
    baseline: bool,
    /// Include the carry-forward predictor.
    #[arg(long)]
    naive: bool,
    /// Include the noiseless-truth oracle read from this truth CSV.
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Also print the coefficient of determination.
    #[arg(long)]
    verbose: bool,
}

fn regimen_arg(s: &str) -> Result<Regimen, String> {
    parse_regimen(s).map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
struct RegimenArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Patients to encode (default: `<data_dir>/train.csv`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// q1w:<mg/kg> | q3w:<mg/kg> | q3d:<mg/kg> | every:<days>:<mg/kg>:<n>
    #[arg(long, value_parser = regimen_arg)]
    regimen: Regimen,
    /// Quantile CSV (default: `<reports>/regimen.csv`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
    /// Simulation horizon in days (default: one interval after the last dose).
    /// Doses after it are dropped.
    #[arg(long)]
    t_end: Option<f64>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let cfg = config::RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::SimulateCohort(a) => commands::simulate_cohort(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Evaluate(a) => commands::evaluate(cfg, a),
        Command::SimulateRegimen(a) => commands::simulate_regimen(cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
