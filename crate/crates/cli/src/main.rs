//! `mcrecon`: simulate phantom datasets, train the cascaded reconstructor,
//! reconstruct, evaluate against baselines, sweep cascade counts and plot.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "mcrecon", version, about = "Multi-contrast MRI reconstruction toolkit")]
pub struct Cli {
    /// Flat `key = value` file; command-line flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for data generation, masks, splits, initialization and training
    /// (falls back to the config file, then DSF_SEED, then 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a paired T2/PD phantom dataset.
    Simulate(SimulateArgs),
    /// Train the reconstructor on the training split of a dataset.
    Train(TrainArgs),
    /// Write reconstructions of one method as raw f32 files and PNG images.
    Reconstruct(ReconstructArgs),
    /// Metric CSV (`slice_id,method,accel,psnr,ssim`) over methods and slices.
    Evaluate(EvaluateArgs),
    /// Train one model per cascade count and tabulate PSNR against cascades.
    SweepCascades(SweepArgs),
    /// Side-by-side reconstruction panels with signed blue-white-red error maps.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of phantom subjects.
    #[arg(long)]
    pub n: Option<usize>,
    /// Neighbouring slices generated per subject.
    #[arg(long)]
    pub slices_per_subject: Option<usize>,
    /// Image height and width.
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    pub size: Option<Vec<usize>>,
}

/// Dataset, undersampling and split selection.
#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Acceleration factor R.
    #[arg(long)]
    pub accel: Option<f64>,
    /// Fraction of fully sampled central lines.
    #[arg(long)]
    pub center_fraction: Option<f64>,
    /// Undersampled contrast (T2 or PD); the other one is the reference.
    #[arg(long)]
    pub target: Option<String>,
    /// Fraction of subjects held out for validation.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Fraction of subjects held out for testing.
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

/// Network shape and conditioning.
#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    /// Number of cascaded networks.
    #[arg(long)]
    pub n_cascades: Option<usize>,
    /// Transformer blocks per network.
    #[arg(long)]
    pub n_blocks: Option<usize>,
    /// Transformer layers per block.
    #[arg(long)]
    pub n_layers: Option<usize>,
    /// Feature channels C.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Attention window side M.
    #[arg(long)]
    pub window_size: Option<usize>,
    /// Attention heads per layer
    #[arg(long)]
    pub n_heads: Option<usize>,
    /// Hidden width of the transformer MLP.
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    /// Give every cascade its own weights.
    #[arg(long)]
    pub no_share: bool,
    /// Start from the zero-filled image instead of k-space filling.
    #[arg(long)]
    pub no_kf: bool,
    /// Do not concatenate the reference image to the network input.
    #[arg(long)]
    pub no_cc: bool,
}

/// Optimizer and objective.
#[derive(Debug, Args, Clone)]
pub struct OptimArgs {
    /// Passes over the training split
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Slices per optimizer step
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// selfsup_dual, selfsup_image_only, selfsup_kspace_only or supervised.
    #[arg(long)]
    pub mode: Option<String>,
    /// Lower end of the partition-rate range.
    #[arg(long)]
    pub rho_min: Option<f64>,
    /// Upper end of the partition-rate range.
    #[arg(long)]
    pub rho_max: Option<f64>,
    /// Weight of the L1 image term.
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Weight of the gradient L1 term.
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Weight of the k-space consistency term.
    #[arg(long)]
    pub lambda3: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Final checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for one checkpoint per epoch.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Training log CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

/// CS-TV solver settings.
#[derive(Debug, Args, Clone)]
pub struct CsTvArgs {
    /// TV weight of the CS baseline.
    #[arg(long)]
    pub lambda_tv: Option<f64>,
    /// Iteration cap of the CS baseline.
    #[arg(long)]
    pub cstv_iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cstv: CsTvArgs,
    /// zero, cstv or model.
    #[arg(long)]
    pub method: Option<String>,
    /// Model checkpoint (only read by the model method).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// train, val, test or all.
    #[arg(long)]
    pub split: Option<String>,
    /// A single slice index instead of a split.
    #[arg(long)]
    pub slice: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cstv: CsTvArgs,
    /// Comma-separated methods out of zero, cstv, model.
    #[arg(long)]
    pub method: Option<String>,
    /// Model checkpoint (only read when the model method is requested).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// train, val, test or all.
    #[arg(long)]
    pub split: Option<String>,
    /// Metric CSV path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Comma-separated cascade counts.
    #[arg(long)]
    pub cascades: Option<String>,
    /// Split the trained models are scored on.
    #[arg(long)]
    pub split: Option<String>,
    /// Result CSV path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cstv: CsTvArgs,
    /// Slice index to show.
    #[arg(long)]
    pub slice: Option<usize>,
    /// Adds a model panel when given.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Error magnitude mapped to full blue/red.
    #[arg(long)]
    pub error_range: Option<f64>,
    /// Integer upscaling of every panel.
    #[arg(long)]
    pub scale: Option<usize>,
    /// Output PNG path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
