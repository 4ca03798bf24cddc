use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "lazystrike",
    version,
    about = "Frequency-guided Top-K pooling, patch diagnostics and a toy ViT",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy ViT; writes checkpoint.lstn, config.json and train_log.jsonl.
    Train(TrainArgs),
    /// Pool feature maps into a global token with per-patch votes.
    Pool(PoolArgs),
    /// Score patches of one feature map, optionally rendering a heatmap.
    Score(ScoreArgs),
    /// Point-in-Box over an annotated manifest.
    Pib(PibArgs),
    /// Accuracy after masking the top or bottom scored patches.
    Probe(ProbeArgs),
    /// Foreground mask and box per feature map, with optional CorLoc.
    Discover(DiscoverArgs),
    /// Principal components of patch features, with component heatmaps.
    Pca(PcaArgs),
    /// Generate the synthetic foreground/background dataset and its manifest.
    Synth(SynthArgs),
}

/// Global token used for Patch Scores of feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Gap,
    Lazystrike,
}

/// Per-patch quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreChoice {
    /// Cosine similarity to the global token.
    Patch,
    /// Top-K vote counts.
    Votes,
    /// Feature L2 norm.
    Norm,
}

#[derive(Debug, Clone, Args)]
pub struct PoolingArgs {
    /// Patches kept per channel [default: N/2].
    #[arg(long)]
    pub k: Option<usize>,
    /// Gaussian bandwidth in frequency bins; `inf` disables filtering [default: D/8].
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, default_value_t = crate::lazystrike::DEFAULT_EPSILON)]
    pub epsilon: f64,
}

#[derive(Debug, Clone, Args)]
pub struct FeatureArgs {
    /// Container file, optionally `file#tensor`. Tensors are `[N, D]` or `[H, W, D]`.
    #[arg(long)]
    pub features: PathBuf,
    /// Patch grid `HxW` for `[N, D]` tensors [default: square].
    #[arg(long)]
    pub grid: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON file with `model`, `train` and `synth` sections; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest of labelled `[H, W, C]` images [default: synthetic data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out manifest for per-epoch metrics.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = ["gap", "cls", "cls_token", "lazystrike"])]
    pub head: Option<String>,
    #[command(flatten)]
    pub pooling: OptionalPooling,
    /// Per-layer windows, e.g. `global`, `4`, or `global,2`.
    #[arg(long)]
    pub window_schedule: Option<String>,
    /// Synthetic training / held-out sizes when no manifest is given.
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_heldout: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct OptionalPooling {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PoolArgs {
    #[command(flatten)]
    pub input: FeatureArgs,
    #[command(flatten)]
    pub pooling: PoolingArgs,
    /// Plain mean pooling instead of Top-K.
    #[arg(long, conflicts_with_all = ["k", "sigma"])]
    pub gap: bool,
    /// Container for `<name>.cls`, `<name>.votes` and `<name>.selected`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub input: FeatureArgs,
    /// Global token as a container reference; overrides --pool.
    #[arg(long)]
    pub cls: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PoolKind::Lazystrike)]
    pub pool: PoolKind,
    #[arg(long, value_enum, default_value_t = ScoreChoice::Patch)]
    pub kind: ScoreChoice,
    #[command(flatten)]
    pub pooling: PoolingArgs,
    /// PPM heatmap output.
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    /// Container output holding `score` `[H, W]`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PibArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model directory from `train`; manifest entries are then images.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PoolKind::Lazystrike)]
    pub pool: PoolKind,
    #[arg(long, value_enum, default_value_t = ScoreChoice::Patch)]
    pub kind: ScoreChoice,
    #[command(flatten)]
    pub pooling: PoolingArgs,
    /// Also print one line per sample.
    #[arg(long)]
    pub per_sample: bool,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Model directory from `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest of labelled images.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Which end of the Patch Score ranking to mask; repeatable [default: both].
    #[arg(long, value_parser = ["top", "bottom"])]
    pub mode: Vec<String>,
    /// Masked fraction(s), comma-separated for a sweep.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub fraction: Vec<f64>,
    /// Container output with the masked logits per setting.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiscoverArgs {
    /// A single feature map; use --manifest for a dataset.
    #[arg(long, required_unless_present = "manifest")]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub grid: Option<String>,
    /// Annotated manifest; adds CorLoc against its boxes.
    #[arg(long, conflicts_with = "features")]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PoolKind::Lazystrike)]
    pub pool: PoolKind,
    #[arg(long, value_enum, default_value_t = ScoreChoice::Votes)]
    pub kind: ScoreChoice,
    #[command(flatten)]
    pub pooling: PoolingArgs,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    #[command(flatten)]
    pub input: FeatureArgs,
    #[arg(long, default_value_t = 3)]
    pub components: usize,
    /// Directory for `pc<i>.ppm` heatmaps.
    #[arg(long)]
    pub heatmap_dir: Option<PathBuf>,
    /// Container output with `scores`, `components` and `explained_variance`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON synthetic-data config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1200)]
    pub n: usize,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub fg_min: Option<usize>,
    #[arg(long)]
    pub fg_max: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for images.lstn and manifest.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}
