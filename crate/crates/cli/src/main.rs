use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use orthoaugm::experiments::DatasetKind;
use orthoaugm::Structure;
use serde::Serialize;

mod commands;
mod error;
mod output;
mod svg;

use error::{CliError, CliResult};

/// Identification with physics-based baselines augmented by a neural network.
#[derive(Debug, Parser)]
#[command(name = "orthoaugm", version)]
struct Cli {
    /// Worker threads for Monte Carlo runs (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the polynomial test system on one of the input designs.
    GenData(GenDataArgs),
    /// Train an augmented model on a dataset CSV.
    Train(TrainArgs),
    /// One-step-ahead RMSE of a trained model on a dataset.
    Eval(EvalArgs),
    /// Asymptotic parameter covariance of a trained model.
    Analyze(AnalyzeArgs),
    /// Monte Carlo study from a run configuration.
    Study(StudyArgs),
    /// Data-length sweep from a run configuration.
    Sweep(SweepArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, default_value = "d1")]
    pub kind: DatasetKind,
    #[arg(long, default_value_t = 1024)]
    pub n: usize,
    /// Data seed; falls back to ORTHOAUGM_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output SNR in dB; `inf` for noiseless data.
    #[arg(long, default_value = "inf", allow_negative_numbers = true)]
    pub snr_db: f64,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "orthogonal")]
    pub structure: Structure,
    /// Baseline features, e.g. `u^1 u^3` or `y[k-1] u[k-1]^2`.
    #[arg(long, num_args = 1.., default_values = ["u^1", "u^3"])]
    pub basis: Vec<String>,
    /// Output lags in the regressor state.
    #[arg(long, default_value_t = 0)]
    pub n_a: usize,
    /// Input lags beyond the current sample.
    #[arg(long, default_value_t = 0)]
    pub n_b: usize,
    #[arg(long, num_args = 1.., default_values_t = [16])]
    pub hidden: Vec<usize>,
    /// Initial baseline parameters; defaults to 0.8, 0.03 for two features and zeros otherwise.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub theta_b_init: Option<Vec<f64>>,
    /// True baseline parameters; enables the error report.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub theta_star: Option<Vec<f64>>,
    /// Network initialization seed; falls back to ORTHOAUGM_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 500)]
    pub adam_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub adam_lr: f64,
    #[arg(long, default_value_t = 1000)]
    pub lbfgs_iters: usize,
    #[arg(long, default_value_t = 10)]
    pub lbfgs_memory: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub grad_tol: f64,
    #[arg(long, short, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the metrics as JSON here.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, short, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct StudyArgs {
    /// Versioned JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output_dir` from the configuration.
    #[arg(long, short)]
    pub out_dir: Option<PathBuf>,
    /// Data seed override; ORTHOAUGM_SEED applies when the configuration has none.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, short)]
    pub out_dir: Option<PathBuf>,
    /// Data lengths; overrides `sweep_n` from the configuration.
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::Study(a) => commands::study(&a),
        Command::Sweep(a) => commands::sweep(&a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
