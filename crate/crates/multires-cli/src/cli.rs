//! Command-line surface: subcommands, flags, and value enums.
//!
//! Every flag is optional at parse time; `commands` resolves each setting
//! as flag → config-file key → built-in default, so a TOML file passed via
//! `--config` can supply any flag while explicit flags still win.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use multires_core::consistency::Reduce;
use multires_core::model::ModelKind;
use multires_core::train::Method;

#[derive(Debug, Parser)]
#[command(
    name = "multires",
    version,
    about = "Multi-resolution semi-supervised classification experiments"
)]
pub struct Cli {
    /// TOML file whose keys mirror the long flags (e.g. `epochs = 200`,
    /// `seeds = [0, 1]`); explicit flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-resolution dataset as CSV files.
    Generate(GenerateArgs),
    /// Train one method once; write metrics and model checkpoints.
    Train(TrainArgs),
    /// Mean ± std fine-test accuracy per method over the seed list.
    Compare(CompareArgs),
    /// Accuracy per fine-label budget, with nested seeded subsamples.
    SweepLabels(SweepLabelsArgs),
    /// Accuracy grid over {logreg, mlp1} × {onlyfine, multires-attention}.
    ModelComplexity(ModelComplexityArgs),
    /// Export per-group attention weights from a trained run directory.
    ExportAttention(ExportAttentionArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Directory to write the layer CSV files into.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Generator seed (exactly one).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Coarse cells per grid side (C).
    #[arg(long)]
    pub grid_side: Option<usize>,
    /// Fine pixels per coarse cell side (r).
    #[arg(long)]
    pub ratio: Option<usize>,
    /// Fine feature channels.
    #[arg(long)]
    pub fine_dim: Option<usize>,
    /// Coarse feature channels (must exceed fine-dim).
    #[arg(long)]
    pub coarse_dim: Option<usize>,
    /// Mean feature shift of positive fine instances.
    #[arg(long)]
    pub class_sep: Option<f64>,
    /// Standard deviation of fine feature noise.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Noise on the coarse label-indicator channels.
    #[arg(long)]
    pub label_channel_noise: Option<f64>,
    /// Extra coarse-labeled cells (the coarse label budget).
    #[arg(long)]
    pub coarse_labeled: Option<usize>,
    /// Extra cells contributing one labeled fine instance each.
    #[arg(long)]
    pub fine_labeled: Option<usize>,
    /// Minimum fraction of a positive cell covered by the positive blob.
    #[arg(long)]
    pub rho_min: Option<f64>,
    /// Probability that a cell is positive.
    #[arg(long)]
    pub positive_cell_prob: Option<f64>,
}

/// Flags shared by every command that trains models.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Consistency weights λ, one per coarse resolution (a single value
    /// broadcasts). `train` defaults to 1; report commands cross-validate
    /// the default grid when this is omitted.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    /// Gradient-descent learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size; 0 trains full-batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Base β of the smooth maximum (must exceed 1).
    #[arg(long)]
    pub smax_base: Option<f64>,
    /// How a pair's per-group penalties combine.
    #[arg(long, value_enum)]
    pub consistency_reduce: Option<ReduceArg>,
    /// Base classifier used at every resolution.
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    /// Hidden width of the mlp1 classifier.
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Folds for λ cross-validation.
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (as written by `generate`).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Directory for metrics.txt and model checkpoints.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training method.
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Run seed (exactly one).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Dataset directory (as written by `generate`).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Directory for compare.txt / compare.csv (the text table always
    /// prints to stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Methods to include; defaults to all six.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub method: Option<Vec<MethodArg>>,
    /// Seeds to average over.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SweepLabelsArgs {
    /// Dataset directory (as written by `generate`).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Directory for sweep.txt / sweep.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fine-label budgets; each must fit the labeled pool.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Option<Vec<usize>>,
    /// Methods to include; defaults to multires-attention,onlyfine.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub method: Option<Vec<MethodArg>>,
    /// Seeds to average over.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct ModelComplexityArgs {
    /// Dataset directory (as written by `generate`).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Directory for complexity.txt / complexity.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seeds to average over.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct ExportAttentionArgs {
    /// Run directory written by `train` with an attention method
    /// (fine.model, coarse1.model, attention1.att, …).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory the run was trained on.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    #[value(name = "onlyfine")]
    OnlyFine,
    #[value(name = "ssr-manifold")]
    SsrManifold,
    #[value(name = "propagate")]
    Propagate,
    #[value(name = "augment")]
    Augment,
    #[value(name = "multires-mil")]
    MultiResMil,
    #[value(name = "multires-attention")]
    MultiResAttention,
}

impl MethodArg {
    pub fn to_method(self) -> Method {
        match self {
            MethodArg::OnlyFine => Method::OnlyFine,
            MethodArg::SsrManifold => Method::SsrManifold,
            MethodArg::Propagate => Method::Propagate,
            MethodArg::Augment => Method::Augment,
            MethodArg::MultiResMil => Method::MultiResMil,
            MethodArg::MultiResAttention => Method::MultiResAttention,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    #[value(name = "logreg")]
    LogReg,
    #[value(name = "mlp1")]
    Mlp1,
}

impl ModelArg {
    pub fn to_kind(self) -> ModelKind {
        match self {
            ModelArg::LogReg => ModelKind::LogReg,
            ModelArg::Mlp1 => ModelKind::Mlp1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReduceArg {
    Mean,
    Sum,
}

impl ReduceArg {
    pub fn to_reduce(self) -> Reduce {
        match self {
            ReduceArg::Mean => Reduce::Mean,
            ReduceArg::Sum => Reduce::Sum,
        }
    }
}
