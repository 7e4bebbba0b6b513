//! Command-line surface for the segmentation pipeline.
//!
//! Subcommands: `synth` (phantom dataset), `preprocess` (CLAHE + resize),
//! `train`, `eval`, `predict`, and `overlay`. Exit codes: 0 success, 2
//! usage/contract errors, 3 I/O and file-format errors, 4 numerical
//! failures, 1 anything else.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "vertseg",
    about = "Binary vertebral segmentation pipeline on grayscale radiograph-style images",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic spine-phantom dataset with ground-truth masks.
    Synth(SynthArgs),
    /// Apply CLAHE and bilinear resizing to a dataset.
    Preprocess(PreprocessArgs),
    /// Train the segmentation network on a dataset manifest.
    Train(TrainArgs),
    /// Evaluate predictions against ground truth on one split.
    Eval(EvalArgs),
    /// Segment a single image with a trained checkpoint.
    Predict(PredictArgs),
    /// Render a truth/prediction overlay on top of an image.
    Overlay(OverlayArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of image/mask pairs (at least 1).
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    n: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    n_vertebrae: Option<usize>,
    /// Probability of a compressed (height-reduced) vertebra.
    #[arg(long)]
    fracture_prob: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    texture_amplitude: Option<f64>,
    /// Lower vertebra/background contrast in the top of the column.
    #[arg(long)]
    hard_mode: bool,
    /// Train/val/test ratios, e.g. "0.597,0.081,0.322".
    #[arg(long)]
    ratios: Option<String>,
    /// Tag every entry as train instead of splitting.
    #[arg(long)]
    no_split: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Input dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Target width (applied to images and masks).
    #[arg(long)]
    width: Option<usize>,
    /// Target height.
    #[arg(long)]
    height: Option<usize>,
    /// Skip CLAHE and only resize.
    #[arg(long)]
    no_clahe: bool,
    #[arg(long)]
    tiles_x: Option<usize>,
    #[arg(long)]
    tiles_y: Option<usize>,
    /// Clip limit as a multiple of the uniform bin height ("inf" disables
    /// clipping).
    #[arg(long)]
    clip_limit: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest with train and val splits.
    #[arg(long)]
    manifest: PathBuf,
    /// Run directory (holds config, log, checkpoints/, reports/).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Epochs without val-loss improvement before stopping.
    #[arg(long)]
    patience: Option<usize>,
    /// Minimum val-loss improvement that resets the plateau counter.
    #[arg(long)]
    min_delta: Option<f64>,
    #[arg(long)]
    augment: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Binarization threshold shared by eval and predict.
    #[arg(long)]
    threshold: Option<f64>,
    /// Smoothing constant of the soft dice loss.
    #[arg(long)]
    smooth: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Split to evaluate: train, val, or test.
    #[arg(long)]
    split: Option<String>,
    /// Report output directory.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to run the model from.
    #[arg(long, conflicts_with = "pred_dir")]
    checkpoint: Option<PathBuf>,
    /// Evaluate pre-rendered mask PNGs (named like the dataset images)
    /// instead of running a model.
    #[arg(long)]
    pred_dir: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    smooth: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input grayscale PNG.
    #[arg(long)]
    image: PathBuf,
    /// Output mask PNG (black vertebrae on white background).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct OverlayArgs {
    /// Base grayscale PNG.
    #[arg(long)]
    image: PathBuf,
    /// Ground-truth mask PNG.
    #[arg(long)]
    truth: PathBuf,
    /// Predicted mask PNG.
    #[arg(long)]
    pred: PathBuf,
    /// Output color PNG: truth-only red, prediction-only blue, agreement
    /// purple.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => commands::synth(args),
        Command::Preprocess(args) => commands::preprocess(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Predict(args) => commands::predict(args),
        Command::Overlay(args) => commands::overlay(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

/// Maps error classes onto exit codes: 2 usage/contract, 3 I/O and data
/// formats, 4 numerical failure, 1 everything else.
fn classify(err: &anyhow::Error) -> u8 {
    use vertseg_core::Error as E;
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<E>() {
            return match core {
                E::Dimension(_) | E::Parameter(_) | E::Config(_) | E::Contract(_) => 2,
                E::Io { .. } | E::Codec { .. } | E::Manifest(_) | E::Checkpoint(_) => 3,
                E::NonFinite { .. } => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}
