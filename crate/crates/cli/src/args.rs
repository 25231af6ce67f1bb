use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use likenet_core::data::Split;

use crate::config::TrainOverrides;

#[derive(Debug, Parser)]
#[command(
    name = "likenet",
    version,
    about = "Train and transfer preference classifiers, and label the data they learn from"
)]
pub struct Cli {
    /// Seed for initialisation, shuffling, dropout and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// TOML file with `[train]` and `[model]` overrides.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Output directory (created if missing).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Assign train/val/test splits to a manifest.
    Split(SplitArgs),
    /// Train a preset network from scratch.
    Train(TrainArgs),
    /// Fine-tune the last k parameter layers of a pretrained network.
    Transfer(TransferArgs),
    /// Write the activations of one layer for every split.
    ExtractFeatures(ExtractArgs),
    /// Fit a two-class logistic regression on feature files.
    TrainLogreg(LogregArgs),
    /// Report error, accuracy and the confusion matrix of a checkpoint.
    Evaluate(EvaluateArgs),
    /// Label noise rate implied by a relabeling session.
    NoiseEstimate(NoiseArgs),
    /// Render a synthetic labelled image set with a manifest.
    Synth(SynthArgs),
    /// Draw a uniform sample of manifest entries for manual review.
    Audit(AuditArgs),
    /// Run the labeling HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetName {
    Attractiveness,
    Gender,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl From<SplitName> for Split {
    fn from(s: SplitName) -> Split {
        match s {
            SplitName::Train => Split::Train,
            SplitName::Val => Split::Val,
            SplitName::Test => Split::Test,
        }
    }
}

/// Where labelled images come from: a manifest on disk or the synthetic generator.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Manifest CSV; relative image paths resolve against its directory.
    #[arg(long, value_name = "PATH", conflicts_with = "synth")]
    pub manifest: Option<PathBuf>,

    /// Generate N synthetic images in memory instead of reading a manifest.
    #[arg(long, value_name = "N")]
    pub synth: Option<usize>,

    /// Label flip rate of the synthetic generator.
    #[arg(long, default_value_t = 0.0, requires = "synth")]
    pub noise: f64,

    /// Seed of the synthetic generator and its split; defaults to --seed.
    #[arg(long)]
    pub data_seed: Option<u64>,

    /// Train/val/test ratios applied to synthetic data.
    #[arg(long, value_name = "R,R,R", default_value = "0.8,0.1,0.1", value_parser = parse_ratios)]
    pub synth_ratios: Ratios,
}

#[derive(Debug, Clone, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, visible_alias = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Weight decay coefficient.
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Disable dropout during training.
    #[arg(long)]
    pub no_dropout: bool,
    /// Visit examples in dataset order every epoch.
    #[arg(long)]
    pub no_shuffle: bool,
}

impl TrainFlags {
    pub fn overrides(&self) -> TrainOverrides {
        TrainOverrides {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            l2: self.l2,
            epochs: self.epochs,
            batch_size: self.batch_size,
            dropout_enabled: self.no_dropout.then_some(false),
            shuffle: self.no_shuffle.then_some(false),
        }
    }
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Manifest to split; rewritten in place unless --out is given.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_name = "R,R,R", default_value = "0.9,0.05,0.05", value_parser = parse_ratios)]
    pub ratios: Ratios,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub preset: PresetName,
    /// Input resolution; the architecture shrinks its pooled maps accordingly.
    #[arg(long)]
    pub input_side: Option<usize>,
    /// Divide every layer width by this factor.
    #[arg(long)]
    pub width_divisor: Option<usize>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    /// Checkpoint of the pretrained network.
    #[arg(long)]
    pub pretrained: PathBuf,
    /// Number of trailing parameter layers to reinitialise and train (1 to 3).
    #[arg(long)]
    pub last_k: usize,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Layer whose output becomes the feature vector.
    #[arg(long, default_value = "flatten1")]
    pub layer: String,
    /// Mean image to subtract; computed from the training split when absent.
    #[arg(long)]
    pub mean: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct LogregArgs {
    #[arg(long)]
    pub train_features: PathBuf,
    #[arg(long)]
    pub val_features: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Evaluate on a feature file instead of images.
    #[arg(long, conflicts_with_all = ["manifest", "synth"])]
    pub features: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// Mean image to subtract from every input.
    #[arg(long)]
    pub mean: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct NoiseArgs {
    /// Number of relabeled entries.
    #[arg(long)]
    pub n: u64,
    /// Number of relabels that disagreed with the stored label.
    #[arg(long)]
    pub errors: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 250)]
    pub side: usize,
    /// Also assign splits with these train/val/test ratios.
    #[arg(long, value_name = "R,R,R", value_parser = parse_ratios)]
    pub ratios: Option<Ratios>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Sample size.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint used for /predict and the uncertainty strategy.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Mean image subtracted before inference.
    #[arg(long, requires = "model")]
    pub mean: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

pub type Ratios = (f64, f64, f64);

fn parse_ratios(s: &str) -> Result<Ratios, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(format!(
            "expected three comma-separated ratios, got {}",
            parts.len()
        )),
    }
}
