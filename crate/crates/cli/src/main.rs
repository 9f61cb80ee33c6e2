mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

use error::CliError;

/// Large Memory Network toolkit: synthetic data, training, evaluation and checks.
///
/// Reports go to stdout as CSV; progress and summaries go to stderr.
/// LMN_THREADS caps the worker threads used for batched prediction.
#[derive(Debug, Parser)]
#[command(name = "lmn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic click dataset (train.csv, eval.csv, meta.txt, spec.txt).
    GenData(GenDataArgs),
    /// Train a model; writes model.ckpt, report.csv, config.txt and manifest.csv.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Compare analytic gradients of a small model against finite differences.
    CheckGrad(CheckGradArgs),
    /// Per-query scoring cost of decomposed versus full-key memory lookup.
    BenchScaling(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// key=value spec file; defaults apply to missing keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// key=value run config.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    pub config: Option<PathBuf>,
    /// Directory written by gen-data.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    pub data: Option<PathBuf>,
    /// Re-run the configuration and data recorded in an earlier manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A gen-data directory or a single CSV file.
    #[arg(long)]
    pub data: PathBuf,
    /// Split to read when --data is a directory.
    #[arg(long, default_value = "eval", value_parser = ["train", "eval"])]
    pub split: String,
    /// Checkpoint of a base model; fills the improvement columns.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    pub batch_size: usize,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckGradArgs {
    /// Run config for the model shape; defaults to n=16, d=4, K=2.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated √n values.
    #[arg(long = "sqrt-n", value_delimiter = ',', default_value = "50,100,200,300,500")]
    pub sqrt_n: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Also time full-key scoring.
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    pub naive: bool,
    /// Minimum length of each timed round.
    #[arg(long, default_value_t = 20)]
    pub min_round_ms: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("LMN_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|t| *t > 0)
        .ok_or_else(|| CliError::Usage(format!("LMN_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::CheckGrad(a) => commands::check_grad(&a),
        Command::BenchScaling(a) => commands::bench_scaling(&a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
