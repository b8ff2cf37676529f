//! `locpred`: synthetic data, preprocessing, centralized and federated
//! training, evaluation, prediction and latency benchmarks.

mod commands;
mod error;
mod output;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};


#[derive(Debug, Parser)]
#[command(name = "locpred", version, about = "Grid-cell location prediction experiments")]
struct Cli {
    /// Flat TOML file of `flag-name = value` defaults, or a run manifest to replay.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for client updates and evaluation.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Base directory for relative output paths (else $LOCPRED_OUTPUT_DIR, else cwd).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic walking traces as CSV.
    Gen(GenArgs),
    /// Build a sample dataset from a trajectory CSV.
    Preprocess(PreprocessArgs),
    /// Centralized training with early stopping.
    Train(TrainArgs),
    /// Federated training, optionally with a shared augmentation pool.
    TrainFl(TrainFlArgs),
    /// Evaluate saved models and baselines on a dataset.
    Eval(EvalArgs),
    /// Predict the next cell for one dataset sample.
    Predict(PredictArgs),
    /// Time single-sample predictions and a training epoch.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    minutes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Road-grid block size in meters.
    #[arg(long)]
    block: Option<f64>,
    /// Mean walking speed, meters per minute.
    #[arg(long)]
    v_mean: Option<f64>,
    #[arg(long)]
    v_sd: Option<f64>,
    #[arg(long)]
    anchors: Option<usize>,
    #[arg(long)]
    max_dwell: Option<usize>,
    #[arg(long)]
    city_blocks: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    cell_size: Option<f64>,
    /// Region side in meters.
    #[arg(long)]
    region: Option<f64>,
    /// Locations per input window (deltas = seq-len − 1).
    #[arg(long)]
    seq_len: Option<usize>,
    /// Minutes ahead of the label.
    #[arg(long)]
    horizon: Option<u32>,
    /// Per-minute displacement mapped to ±1.
    #[arg(long)]
    bound: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    keep_standing_still: Option<bool>,
    /// Region values as raw counts instead of max-normalized.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    raw_counts: Option<bool>,
    /// Leading share of each user's span used only for occupancy.
    #[arg(long)]
    history_fraction: Option<f64>,
    #[arg(long)]
    interval: Option<i64>,
    #[arg(long)]
    gap: Option<i64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// desk or full.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// fglp, bilstm or cnn.
    #[arg(long)]
    model: Option<String>,
    #[command(flatten)]
    common: ModelArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// sample or user.
    #[arg(long)]
    split_unit: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainFlArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// on or off.
    #[arg(long)]
    augment: Option<String>,
    #[command(flatten)]
    common: ModelArgs,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients_per_round: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    local_batch_size: Option<usize>,
    /// Augmentation samples drawn per client per round.
    #[arg(long)]
    aug_samples: Option<usize>,
    /// Share of all users placed in the augmentation pool.
    #[arg(long)]
    aug_user_fraction: Option<f64>,
    /// Optimizer steps per client per round; 0 means unlimited.
    #[arg(long)]
    max_local_steps: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    drop_stragglers: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    persist_optimizer: Option<bool>,
    /// sample-count or uniform.
    #[arg(long)]
    weighting: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Saved model; repeat to compare several.
    #[arg(long = "model-file")]
    model_files: Vec<PathBuf>,
    /// Include the historic-occupancy baseline.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    ho: Option<bool>,
    /// test or all.
    #[arg(long)]
    on: Option<String>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    split_unit: Option<String>,
    /// Tie-breaking seed for the baseline.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model_file: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    model_file: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Timed predictions after warm-up.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
