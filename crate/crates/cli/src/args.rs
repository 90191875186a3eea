use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "dsn3d", version, about = "Volumetric liver segmentation with a deeply supervised 3D network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand. Flags override `--config` entries.
#[derive(Debug, Args)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate seeded synthetic phantoms with a train/test split.
    Synth(SynthArgs),
    /// Train a network and write a checkpoint and learning curve.
    Train(TrainArgs),
    /// Predict probability maps and masks.
    Infer(InferArgs),
    /// Refine saved probability maps with the slice-wise CRF.
    Refine(RefineArgs),
    /// Score predicted masks against references.
    Eval(EvalArgs),
    /// Grid-search CRF parameters on labelled cases.
    Sweep(SweepArgs),
    /// Export one layer's kernels (and optionally its feature maps) as CSV.
    DumpKernels(DumpArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,

    #[arg(long)]
    pub cases: Option<usize>,

    /// Cases assigned to the training split; the rest are held out.
    #[arg(long)]
    pub train_cases: Option<usize>,

    /// Volume extent as `DxHxW`.
    #[arg(long)]
    pub shape: Option<String>,

    #[arg(long)]
    pub noise_sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,

    /// Manifest of training cases.
    #[arg(long)]
    pub train: PathBuf,

    /// Manifest of validation cases; defaults to the training cases.
    #[arg(long)]
    pub val: Option<PathBuf>,

    /// Train the plain 3D CNN without branch heads.
    #[arg(long)]
    pub no_deep_supervision: bool,

    #[arg(long)]
    pub epochs: Option<usize>,

    #[arg(long)]
    pub lr0: Option<f64>,

    #[arg(long)]
    pub momentum: Option<f64>,

    /// Weight initialization: a Gaussian sigma, `he` or `he:GAIN`.
    #[arg(long)]
    pub init: Option<String>,
}

/// One volume, or every case of a manifest.
#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct Target {
    #[arg(long)]
    pub volume: Option<PathBuf>,

    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,

    #[arg(long)]
    pub checkpoint: PathBuf,

    #[command(flatten)]
    pub target: Target,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[command(flatten)]
    pub common: Common,

    /// Directory written by `infer` (per-case subdirectories in manifest mode).
    #[arg(long)]
    pub prob_dir: PathBuf,

    #[command(flatten)]
    pub target: Target,

    #[arg(long)]
    pub mu1: Option<f64>,

    #[arg(long)]
    pub mu2: Option<f64>,

    #[arg(long)]
    pub theta_alpha: Option<f64>,

    #[arg(long)]
    pub theta_beta: Option<f64>,

    #[arg(long)]
    pub theta_gamma: Option<f64>,

    #[arg(long)]
    pub iterations: Option<usize>,

    /// Branch blend weight as `LAYER=WEIGHT`; repeatable.
    #[arg(long, value_name = "LAYER=WEIGHT")]
    pub tau: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,

    /// Predicted mask (single-case mode).
    #[arg(long, requires = "reference", conflicts_with = "manifest")]
    pub pred: Option<PathBuf>,

    #[arg(long)]
    pub reference: Option<PathBuf>,

    /// Row label in single-case mode; defaults to the prediction's file stem.
    #[arg(long)]
    pub case_id: Option<String>,

    /// Manifest whose label files are the references (batch mode).
    #[arg(long, requires = "pred_dir")]
    pub manifest: Option<PathBuf>,

    /// Holds `<case_id>/<mask-name>` for every manifest case.
    #[arg(long)]
    pub pred_dir: Option<PathBuf>,

    #[arg(long, default_value = "mask.mhd")]
    pub mask_name: String,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,

    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Labelled cases to tune on.
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub common: Common,

    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Layer name such as `conv1`, `deconv2`, `score` or `branch3.score`.
    #[arg(long)]
    pub layer: String,

    /// Also write the layer's feature maps for this volume (convolutions only).
    #[arg(long)]
    pub volume: Option<PathBuf>,
}
