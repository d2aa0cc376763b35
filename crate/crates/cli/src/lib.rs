//! `tsxplain`: synthesize data, train, explain, evaluate and ablate the
//! hybrid time-series pipeline. Every command writes its resolved
//! configuration and a hashed manifest next to its outputs.

pub mod commands;
pub mod data;
pub mod error;
pub mod output;
pub mod settings;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "tsxplain", version, about = "Hybrid ResNet/Transformer heatmap explanations for multivariate time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic bundle with injected patterns and ground-truth masks.
    Synth(SynthArgs),
    /// Train a ResNet, Transformer or hybrid model.
    Train(TrainArgs),
    /// Explain one sample: branch and fused heatmaps plus a text report.
    Explain(ExplainArgs),
    /// Predictive, faithfulness, sensitivity and text metrics.
    Eval(EvalArgs),
    /// Compare fusion strategies on a constructed family and on a model.
    #[command(after_help = commands::ablate::CSV_HELP)]
    Ablate(AblateArgs),
}

/// Options shared by every command.
#[derive(Debug, Args)]
pub struct Common {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` config file; flags override it, `TSXPLAIN_<KEY>` env vars override the file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of samples [default: 2000].
    #[arg(long)]
    pub n: Option<usize>,
    /// Sequence length T [default: 100].
    #[arg(long = "T", alias = "seq-len")]
    pub seq_len: Option<usize>,
    /// Share of samples carrying an injected pattern [default: 0.5].
    #[arg(long)]
    pub anomaly_rate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Resnet,
    Transformer,
    Hybrid,
}

impl std::fmt::Display for ModelArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Bundle directory, bundle `.json`, or energy `.csv`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Architecture [default: hybrid].
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    /// Maximum epochs [default: 30].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Minibatch size [default: 32].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Decoupled weight decay [default: 0.0001].
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Epochs without validation improvement before stopping [default: 10].
    #[arg(long)]
    pub patience: Option<usize>,
    /// Weight of each branch's own loss for the hybrid [default: 0.5].
    #[arg(long)]
    pub aux_weight: Option<f64>,
    /// Disable time-shift and noise augmentation.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FusionArg {
    Multiplicative,
    Weighted,
    Learned,
}

impl std::fmt::Display for FusionArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TemporalArg {
    Rollout,
    Global,
}

impl std::fmt::Display for TemporalArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

/// Heatmap fusion options.
#[derive(Debug, Args)]
pub struct FusionArgs {
    /// Fusion strategy [default: multiplicative].
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    /// ResNet weight for weighted fusion, exponent for multiplicative [default: 0.5 weighted, 1 multiplicative].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Odd moving-average window over time [default: 5].
    #[arg(long)]
    pub smoothing_window: Option<usize>,
    /// Share of cells kept as salient [default: 0.2].
    #[arg(long)]
    pub quantile: Option<f64>,
    /// Align the ResNet map to the Transformer map with DTW before fusing.
    #[arg(long)]
    pub dtw: bool,
    /// JSON `{"w_r": .., "w_t": .., "bias": ..}` for learned fusion [default: 0.5, 0.5, 0].
    #[arg(long)]
    pub projection: Option<PathBuf>,
    /// Temporal relevance of the Transformer branch [default: rollout].
    #[arg(long, value_enum)]
    pub temporal: Option<TemporalArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Template,
    Stub,
}

impl std::fmt::Display for ModeArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Hybrid checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Bundle directory, bundle `.json`, or energy `.csv`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Index of the sample in the bundle [default: 0].
    #[arg(long)]
    pub sample_id: Option<usize>,
    #[command(flatten)]
    pub fusion: FusionArgs,
    /// Template vocabulary: clinical, industrial or generic [default: generic].
    #[arg(long)]
    pub domain: Option<String>,
    /// Summary generation: fixed templates or the offline stub client [default: template].
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Channels with a smaller share of total variance are flagged [default: 0.01].
    #[arg(long)]
    pub variance_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Bundle directory, bundle `.json`, or energy `.csv`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory of `<sample id>.json` fused heatmaps; computed when absent.
    #[arg(long)]
    pub heatmaps: Option<PathBuf>,
    /// Second checkpoint for a paired Wilcoxon test on per-sample losses.
    #[arg(long)]
    pub checkpoint_b: Option<PathBuf>,
    /// Comma-separated masked fractions [default: 0.05,0.1,...,0.5].
    #[arg(long)]
    pub fractions: Option<String>,
    /// Evaluated split: train, val or test [default: test].
    #[arg(long)]
    pub split: Option<String>,
    /// Samples explained for faithfulness and text metrics [default: 200].
    #[arg(long)]
    pub limit: Option<usize>,
    /// Noise scale of the sensitivity test [default: 1].
    #[arg(long)]
    pub sigma: Option<f64>,
    #[command(flatten)]
    pub fusion: FusionArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Bundle directory, bundle `.json`, or energy `.csv`; sets the family shape.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Hybrid checkpoint for the model-based columns.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Instances in the constructed family [default: 200].
    #[arg(long)]
    pub instances: Option<usize>,
    /// Instances used to fit the learned and concatenation projections [default: 50].
    #[arg(long)]
    pub calibration: Option<usize>,
    /// Bootstrap resamples [default: 1000].
    #[arg(long)]
    pub resamples: Option<usize>,
    /// Test samples explained for the model-based columns [default: 100].
    #[arg(long)]
    pub limit: Option<usize>,
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => commands::synth::run(a),
        Command::Train(a) => commands::train::run(a),
        Command::Explain(a) => commands::explain::run(a),
        Command::Eval(a) => commands::eval::run(a),
        Command::Ablate(a) => commands::ablate::run(a),
    }
}
