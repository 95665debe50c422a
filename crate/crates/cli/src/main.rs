//! `depthformer` command-line tool.
//!
//! Exit codes: 0 success, 1 configuration or shape error, 2 data error,
//! 3 training diverged, 4 gradient check failed.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "depthformer", version, about = "Train, evaluate and run monocular depth models")]
struct Cli {
    /// Upper bound on worker threads (computation currently runs on one).
    #[arg(long, env = "DEPTHFORMER_THREADS", global = true)]
    threads: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a complete configuration file for a preset.
    InitConfig(InitConfigArgs),
    /// Fit a model on a manifest or on synthetic scenes.
    Train(TrainArgs),
    /// Score a checkpoint against ground truth.
    Eval(EvalArgs),
    /// Predict full-resolution depth for images.
    Infer(InferArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Report parameter counts and forward latency of presets.
    Bench(BenchArgs),
}

#[derive(Args)]
pub struct ConfigArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set n_bins=64` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args)]
pub struct DataArgs {
    /// Tab-separated `image<TAB>depth` list.
    #[arg(long, conflicts_with = "synthetic")]
    pub manifest: Option<PathBuf>,
    /// Generate scenes instead of reading files, e.g. `n=16`.
    #[arg(long, value_name = "n=N")]
    pub synthetic: Option<String>,
    /// Size of generated scenes as HxW (defaults to the training crop).
    #[arg(long, value_name = "HxW")]
    pub image_size: Option<String>,
    /// Depth PNG convention of the manifest files.
    #[arg(long, default_value = "kitti", value_parser = ["kitti", "nyu"])]
    pub dataset: String,
}

#[derive(Args)]
pub struct InitConfigArgs {
    /// `tiny` or `paper`.
    #[arg(long, default_value = "tiny")]
    pub preset: String,
    /// Destination file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Total optimizer steps (overrides `total_steps`).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Training seed (overrides `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the checkpoint already in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Directory for the checkpoint, log and resolved config.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint file, or a training output directory holding one.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation crop.
    #[arg(long, default_value = "none", value_parser = ["garg", "eigen", "none"])]
    pub crop: String,
    /// Ignore ground truth beyond this depth in metres.
    #[arg(long)]
    pub cap: Option<f64>,
    /// Seed for generated scenes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `metrics.csv`.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint file, or a training output directory holding one.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input images.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    /// Pad inputs to a multiple of 32 and crop the prediction back.
    #[arg(long)]
    pub pad: bool,
    /// Depth PNG convention of the written maps.
    #[arg(long, default_value = "kitti", value_parser = ["kitti", "nyu"])]
    pub dataset: String,
    /// Also write little-endian PFM depth.
    #[arg(long)]
    pub pfm: bool,
    /// Also write an 8-bit colour preview.
    #[arg(long)]
    pub preview: bool,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Number of parameter entries to test.
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Side of the square synthetic input.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Seed for parameters, input and sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Presets to measure (repeatable).
    #[arg(long = "preset", default_values_t = ["tiny".to_string(), "paper".to_string()])]
    pub presets: Vec<String>,
    /// Timed forward passes per preset.
    #[arg(long, default_value_t = 3)]
    pub iters: usize,
    /// Input size as HxW.
    #[arg(long, default_value = "64x64", value_name = "HxW")]
    pub size: String,
    /// Seed for parameters and input.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = commands::check_threads(cli.threads.as_deref()).and_then(|()| match cli.command {
        Command::InitConfig(a) => commands::init_config(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Infer(a) => commands::infer(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Bench(a) => commands::bench(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
