mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Ultra-lightweight underwater image enhancement.
#[derive(Parser, Debug)]
#[command(name = "fanet", version, about)]
pub struct Cli {
    /// Worker threads for the tensor kernels.
    #[arg(long, global = true, env = "FANET_THREADS", default_value_t = 1)]
    pub threads: usize,
    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Stop at the first per-file problem and fail on skipped files.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Run the network in 64-bit floating point.
    #[arg(long = "f64", global = true)]
    pub f64: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Enhance PNG/PPM images.
    Enhance(EnhanceArgs),
    /// Score images with PSNR/MSE/SSIM (given references) and UCIQE/UIQM.
    Metrics(MetricsArgs),
    /// Train on synthetic pairs and report held-out gains.
    Train(TrainArgs),
    /// Time forward passes at a fixed resolution.
    Bench(BenchArgs),
    /// Write synthetic clean/degraded pairs.
    Degrade(DegradeArgs),
    /// Show parameter counts per block.
    Params(ParamsArgs),
    /// Train once per alpha value and emit a comparison table.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    /// Input images.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// FANW1 weight file; defaults to a freshly initialized (identity) network.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Override the frequency/spatial blend ratio.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, short, default_value = "enhanced")]
    pub out_dir: PathBuf,
    /// Seed for the default network when no weights are given.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Directory of images to score.
    pub test_dir: PathBuf,
    /// Directory of references with matching file names.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 4e-4)]
    pub lr_max: f64,
    /// Defaults to lr_max / 10.
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long, default_value_t = 200)]
    pub lr_period: usize,
    #[arg(long, default_value_t = 0.5)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 64)]
    pub crop: usize,
    #[arg(long)]
    pub no_flip: bool,
    #[arg(long)]
    pub no_rotate: bool,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.4)]
    pub alpha: f64,
    /// Synthetic training pairs.
    #[arg(long, default_value_t = 64)]
    pub pairs: usize,
    /// Synthetic held-out pairs.
    #[arg(long, default_value_t = 16)]
    pub holdout: usize,
    /// Synthetic image side length.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Use the full-scale batch (72) and crop (256).
    #[arg(long)]
    pub full_scale: bool,
    /// Line-delimited JSON log of every step plus a final summary line.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Output FANW1 weights.
    #[arg(long, short, default_value = "fanet.fanw")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 1080)]
    pub height: usize,
    #[arg(long, default_value_t = 1920)]
    pub width: usize,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(10..))]
    pub iters: u64,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(3..))]
    pub warmup: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DepthModeArg {
    Constant,
    VerticalRamp,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    Png,
    Ppm,
}

#[derive(Args, Debug)]
pub struct DegradeArgs {
    #[arg(long, short, default_value = "pairs")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Attenuation per channel as R,G,B.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [1.0, 0.35, 0.25])]
    pub beta: Vec<f64>,
    /// Veiling light per channel as R,G,B.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.10, 0.60, 0.70])]
    pub background: Vec<f64>,
    #[arg(long, value_enum, default_value_t = DepthModeArg::Constant)]
    pub depth_mode: DepthModeArg,
    #[arg(long, default_value_t = 0.5)]
    pub depth_min: f64,
    #[arg(long, default_value_t = 2.5)]
    pub depth_max: f64,
    #[arg(long, value_enum, default_value_t = FormatArg::Png)]
    pub format: FormatArg,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Exit nonzero when the total is outside 8000..=9500.
    #[arg(long)]
    pub enforce_budget: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Alpha values; defaults to 0.0, 0.1, ..., 0.9.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Vec<f64>,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
    {
        eprintln!("warning: thread pool already configured: {e}");
    }
    match commands::run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
