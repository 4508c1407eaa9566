//! Command-line driver for the ngsgd stack: synthetic data generation,
//! serial and parallel training, the self-check battery, and checkpoint
//! combination.
//!
//! Every command resolves its parameters as flag, then `--config` file
//! value, then default (the seed additionally falls back to `NGSGD_SEED`),
//! and writes the full resolved configuration into a `manifest.txt` beside
//! its outputs. Manifests are themselves valid config files, so a finished
//! run can be replayed with `--config <out-dir>/manifest.txt`.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<ngsgd::NgError> for CliError {
    fn from(e: ngsgd::NgError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "ngsgd", version, about = "Natural-gradient SGD trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and split it into randomized block files.
    GenData(GenDataArgs),
    /// Train one model over a block directory with a single worker.
    Train(TrainArgs),
    /// Train with N workers and periodic parameter averaging.
    TrainParallel(TrainParallelArgs),
    /// Run the self-check battery against the reference implementations.
    Verify(VerifyArgs),
    /// Combine trailing checkpoints by optimizing per-layer weights on a tune set.
    Combine(CombineArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Flat key=value config file; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Distance scale between class means.
    #[arg(long)]
    pub separation: Option<f64>,
    /// Worker count the block layout is built for.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Blocks per worker per epoch.
    #[arg(long)]
    pub iters_per_epoch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Flags shared by `train` and `train-parallel`.
#[derive(Args)]
pub struct TrainFlags {
    /// Directory of block files produced by gen-data.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Hidden layer widths, comma separated; empty for a linear classifier.
    #[arg(long)]
    pub hidden_dims: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub minibatch: Option<usize>,
    #[arg(long)]
    pub lr_initial: Option<f64>,
    #[arg(long)]
    pub lr_final: Option<f64>,
    /// Gradient preconditioner: none, simple, or online.
    #[arg(long)]
    pub precond: Option<String>,
    /// Rank of the online factor on the input side of each layer.
    #[arg(long)]
    pub rank_in: Option<usize>,
    /// Rank of the online factor on the output side of each layer.
    #[arg(long)]
    pub rank_out: Option<usize>,
    /// Identity-smoothing strength for both preconditioners.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Forgetting horizon of the online factor, in samples.
    #[arg(long)]
    pub s_samples: Option<f64>,
    /// Online factor update period, in minibatches.
    #[arg(long)]
    pub update_period: Option<usize>,
    #[arg(long)]
    pub max_change_per_sample: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct TrainParallelArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Number of parallel workers.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Trailing checkpoints a later combine step should use; recorded only.
    #[arg(long)]
    pub combine_last: Option<usize>,
    /// Simulated wall seconds per outer iteration for the run log.
    #[arg(long)]
    pub sim_seconds_per_iter: Option<f64>,
    /// Block directory evaluated as held-out data in the run log.
    #[arg(long)]
    pub valid_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Run one suite: simple-vs-oracle, branch-equivalence, online-vs-naive,
    /// or gradcheck. Default is all of them.
    #[arg(long)]
    pub suite: Option<String>,
    /// Comma-separated seeds; default 0 through 9.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Swap in a deliberately broken fast path; the battery must then fail.
    #[arg(long)]
    pub inject_fault: bool,
    /// Also write the per-suite results and a manifest here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct CombineArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Explicit checkpoint paths, oldest first.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub models: Vec<PathBuf>,
    /// Directory holding model_NNNN.ngnn checkpoints.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// How many trailing checkpoints from --checkpoint-dir to combine.
    #[arg(long)]
    pub combine_last: Option<usize>,
    /// Block files holding the tune set.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub tune_blocks: Vec<PathBuf>,
    /// Block directory holding the tune set.
    #[arg(long)]
    pub tune_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(args) => commands::gen_data::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::TrainParallel(args) => commands::train_parallel::run(args),
        Command::Verify(args) => commands::verify::run(args),
        Command::Combine(args) => commands::combine::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
