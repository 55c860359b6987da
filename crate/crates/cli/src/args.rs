use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cuetrack::harness::Strategy;

#[derive(Debug, Parser)]
#[command(
    name = "cuetrack",
    version,
    about = "Text-cue heatmaps and guidance for visual trackers"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Precision of values passed between pipeline stages.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    /// Seed for weight initialization, training and gradient checks.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Suppress the resolved-config banner and progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn a feature bundle into a target heatmap.
    Map(MapArgs),
    /// Fuse a heatmap into a token grid.
    Fuse(FuseArgs),
    /// Write freshly initialized guidance weights.
    InitWeights(InitWeightsArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a mock tracker for one strategy.
    Train(TrainArgs),
    /// Run a trained model over a dataset.
    Track(TrackArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Compare analytic guidance gradients with finite differences.
    CheckGrad(CheckGradArgs),
}

#[derive(Debug, Args)]
pub struct MapArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// 1-based scale index.
    #[arg(long, default_value_t = 1)]
    pub scale: usize,
    #[arg(long)]
    pub no_refine: bool,
    #[arg(long)]
    pub no_normalize: bool,
    /// Also write an 8-bit PGM rendering.
    #[arg(long)]
    pub pgm: Option<PathBuf>,
    /// Write the normalized naive map of every scale into this directory.
    #[arg(long)]
    pub survey: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub heatmap: PathBuf,
    #[arg(long)]
    pub tokens: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Add the input tokens to the fused output.
    #[arg(long)]
    pub residual: bool,
}

#[derive(Debug, Args)]
pub struct InitWeightsArgs {
    /// Token channel count of the target tracker.
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON base spec; defaults are used when absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = cuetrack::harness::SUITE_SEQUENCES)]
    pub sequences: usize,
    /// Seed of the first sequence.
    #[arg(long, default_value_t = cuetrack::harness::SUITE_SEED)]
    pub first_seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Strategy,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Per-epoch train/validation losses.
    #[arg(long)]
    pub loss_curve: Option<PathBuf>,
    /// Also export the guidance weights on their own.
    #[arg(long)]
    pub weights_out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub train_sequences: Option<usize>,
    #[arg(long)]
    pub val_sequences: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub heatmap_lag: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Directory receiving one prediction file per sequence.
    #[arg(long)]
    pub out: PathBuf,
    /// Recompute the heatmap every N frames.
    #[arg(long, default_value_t = 1)]
    pub cadence: usize,
    /// Map, fuse and predict every frame independently.
    #[arg(long, conflicts_with = "cadence")]
    pub per_frame: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Prediction directory; repeat to compare several runs.
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    /// Label per prediction directory; defaults to the directory name.
    #[arg(long)]
    pub label: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckGradArgs {
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 4)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub height: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = cuetrack::gradcheck::DEFAULT_EPS)]
    pub eps: f64,
    /// Largest relative error accepted.
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse::<Strategy>().map_err(|e| e.to_string())
}
