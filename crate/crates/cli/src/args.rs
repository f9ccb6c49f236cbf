//! Command-line argument definitions.

use std::path::PathBuf;

use bamrl_core::policy::ArchitectureConfig;
use bamrl_core::recovery::Reentry;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "bamrl",
    version,
    about = "Train, attack, and defend pixel policies"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy; writes checkpoint.bin, training_log.csv, config.json
    Train(TrainArgs),
    /// Sweep attacks against a checkpoint; writes metrics.csv and metrics.json
    Eval(EvalArgs),
    /// Dump observation, activation, and attention images as PGM files
    DumpMaps(DumpMapsArgs),
    /// Print an architecture's parameter count
    CountParams(CountParamsArgs),
}

/// Built-in architectures; a config file can describe custom ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchPreset {
    /// Convolutional trunk without the attention module
    Baseline,
    /// The same trunk with the attention module after the first convolution
    Bam,
}

impl ArchPreset {
    pub fn config(self) -> ArchitectureConfig {
        ArchitectureConfig::nature_lite(3, matches!(self, ArchPreset::Bam))
    }
}

/// Where the forward pass resumes after the recovery mask is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReentryArg {
    /// Inject the masked activation as the attention layer's output
    AfterBam,
    /// Feed the masked activation back through the attention layer
    AtBam,
}

impl From<ReentryArg> for Reentry {
    fn from(arg: ReentryArg) -> Self {
        match arg {
            ReentryArg::AfterBam => Reentry::AfterBam,
            ReentryArg::AtBam => Reentry::AtBam,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run config; flags override it field-by-field
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Architecture preset
    #[arg(long, value_enum)]
    pub arch: Option<ArchPreset>,
    /// Train on adversarially perturbed rollout observations
    #[arg(long)]
    pub adv: bool,
    /// Attack every k-th rollout step (implies --adv)
    #[arg(long, value_name = "K")]
    pub adv_every_k: Option<usize>,
    /// Adversarial-training attack strength (implies --adv)
    #[arg(long, value_name = "EPS")]
    pub adv_eps: Option<f64>,
    /// Total environment steps; 0 emits the freshly initialized checkpoint
    #[arg(long)]
    pub steps: Option<usize>,
    /// Master seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop once the rolling mean episode reward reaches this value
    #[arg(long, value_name = "REWARD")]
    pub early_stop: Option<f64>,
    /// Learning rate
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON run config; flags override it field-by-field
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Episodes per regime per attack strength
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Comma-separated attack strengths, e.g. 0.01,0.05,0.1,0.5
    #[arg(long, value_delimiter = ',', value_name = "EPS,...")]
    pub eps_grid: Option<Vec<f64>>,
    /// Master seed; episode seeds count up from it
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (results are worker-count independent)
    #[arg(long)]
    pub workers: Option<usize>,
    /// Recovery reentry point
    #[arg(long, value_enum)]
    pub reentry: Option<ReentryArg>,
}

#[derive(Debug, Args)]
pub struct DumpMapsArgs {
    /// Checkpoint whose activations are imaged; needs an attention layer
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON run config; flags override it field-by-field
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// States sampled evenly from one greedy episode
    #[arg(long, default_value_t = 5)]
    pub states: usize,
    /// Attack strength for the attacked/attention/cleaned panels
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Master seed for the episode and the attack
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CountParamsArgs {
    /// Architecture JSON: either an architecture object or a full run config
    #[arg(long, conflicts_with = "arch")]
    pub config: Option<PathBuf>,
    /// Architecture preset
    #[arg(long, value_enum)]
    pub arch: Option<ArchPreset>,
}
