//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "icr",
    version,
    about = "Incremental cascaded regression for landmark alignment"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a cascade model on a dataset directory.
    Train(TrainArgs),
    /// Absorb new annotated images into an existing model.
    Update(UpdateArgs),
    /// Write predicted landmark files for every image in a dataset.
    Predict(PredictArgs),
    /// Evaluate a model: mean normalized error, per-image errors, CED curve.
    Eval(EvalArgs),
    /// Incremental-learning benchmark: train on the first batch, absorb the
    /// rest batch by batch, evaluating after every step.
    ExperimentIncremental(ExperimentArgs),
    /// Generate a synthetic benchmark dataset.
    Synth(SynthArgs),
}

/// How stage regressors get their training rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    /// Each stage fits the residuals the previous stages actually left.
    Sequential,
    /// Stages train independently on Gaussian shape-increment draws.
    Parallel,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory (images/, annotations/, optional bboxes.csv).
    #[arg(long)]
    pub data: PathBuf,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = TrainMode::Sequential)]
    pub mode: TrainMode,
    /// Number of cascade stages.
    #[arg(long, default_value_t = 4)]
    pub stages: usize,
    /// Hidden nodes per stage regressor.
    #[arg(long = "hidden-nodes", default_value_t = 500)]
    pub hidden_nodes: usize,
    /// Ridge regularization for the stage least-squares solves.
    #[arg(long, default_value_t = 1e-3)]
    pub ridge: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Gaussian draws per image per stage (parallel mode only).
    #[arg(long, default_value_t = 1)]
    pub perturbations: usize,
    /// Existing model whose per-stage statistics seed parallel training;
    /// without it, parallel mode runs a sequential pass first to estimate
    /// them.
    #[arg(long = "stats-in")]
    pub stats_in: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct UpdateArgs {
    /// Model file to update.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory with the new images; an empty or missing images
    /// directory is a no-op update.
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the updated model.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional CSV report: stage,rows,feature_millis,update_millis.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory (annotations are required only for their file ids).
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for the predicted .pts files (one per image, original
    /// pixel coordinates).
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Eye-index preset for the normalization distance (ibug68, lfpw29, or
    /// antipodal); default picks by landmark count.
    #[arg(long = "eval-config")]
    pub eval_config: Option<String>,
    /// Optional CSV: threshold,fraction over the standard threshold grid.
    #[arg(long = "ced-out")]
    pub ced_out: Option<PathBuf>,
    /// Optional CSV: id,nme for every evaluated image.
    #[arg(long = "errors-out")]
    pub errors_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// Training dataset directory; split into batches.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset directory evaluated after every step.
    #[arg(long = "test-data")]
    pub test_data: PathBuf,
    /// Output directory for summary.csv and per-step CED curves.
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub batches: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub stages: usize,
    #[arg(long = "hidden-nodes", default_value_t = 500)]
    pub hidden_nodes: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub ridge: f64,
    #[arg(long, default_value_t = 1)]
    pub perturbations: usize,
    #[arg(long = "eval-config")]
    pub eval_config: Option<String>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory to create the dataset in.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 10)]
    pub landmarks: usize,
    /// Pixel noise amplitude in [0, 1] intensity units.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
