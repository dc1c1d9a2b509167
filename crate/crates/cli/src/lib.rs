//! The `kdp` command line: `gen-demos`, `train`, `eval`, `analyze` and
//! `latency`, all writing under one `--out` directory.

pub mod cmd;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use kdp_core::Preset;
use kdp_pipeline::train::Objective;
use kdp_pipeline::PipelineError;
use thiserror::Error;

pub use config::{PolicyKind, Precision, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for invalid input, 3 for numeric failures at runtime, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use kdp_core::{DenoiserError, NumericsError};
        use kdp_driveworld::WorldError;
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 1,
            CliError::Pipeline(e) => match e {
                PipelineError::Usage(_)
                | PipelineError::Config(_)
                | PipelineError::Format(_)
                | PipelineError::Checkpoint(_)
                | PipelineError::StatsMismatch { .. }
                | PipelineError::Schedule(_)
                | PipelineError::World(WorldError::Config(_) | WorldError::Usage(_))
                | PipelineError::Model(DenoiserError::Config(_) | DenoiserError::Usage(_)) => 2,
                PipelineError::NonFinite { .. }
                | PipelineError::Diverged { .. }
                | PipelineError::Moe(_)
                | PipelineError::Numerics(NumericsError::NonFinite { .. })
                | PipelineError::Model(DenoiserError::Numerics(NumericsError::NonFinite { .. })) => 3,
                _ => 1,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "kdp",
    version,
    about = "Diffusion driving policy with a knowledge-routed mixture of experts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record scripted-expert demonstrations.
    GenDemos(GenDemosArgs),
    /// Train a policy on a demonstration file.
    Train(TrainArgs),
    /// Closed-loop evaluation with metrics and activation analysis.
    Eval(EvalArgs),
    /// Rebuild the activation CSVs from recorded traces.
    Analyze(AnalyzeArgs),
    /// Per-decision latency of each model preset.
    Latency(LatencyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Run-config TOML; defaults to `<out>/config.snapshot` when present.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output directory [default: runs/default]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides the config file and KDP_SEED [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads, 0 for all cores [default: 1]
    #[arg(long)]
    pub workers: Option<usize>,
    /// Scalar type of model weights and arithmetic [default: f64]
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Clone, Args)]
pub struct GenDemosArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Scenario kind (in_ramp, intersection, roundabout or all); repeatable [default: all]
    #[arg(long = "scenario")]
    pub scenarios: Vec<String>,
    /// Accepted episodes per scenario [default: 200]
    #[arg(long, short = 'n')]
    pub episodes: Option<usize>,
    /// Failed expert episodes tolerated per scenario [default: 50]
    #[arg(long)]
    pub retry_cap: Option<usize>,
    /// Dataset file [default: <out>/demos.kdpd]
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset file [default: <out>/demos.kdpd]
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Continue from this checkpoint; the report is truncated to its step and appended
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Model size [default: small]
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Training target [default: diffusion]
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    /// Total optimizer updates [default: 5000]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Minibatch size [default: 64]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Action horizon H [default: 8]
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Diffusion steps T [default: 100]
    #[arg(long)]
    pub diffusion_steps: Option<usize>,
    /// Experts N [default: 8]
    #[arg(long)]
    pub n_experts: Option<usize>,
    /// Experts selected per decision K [default: 2]
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Peak learning rate [default: 0.0001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Load-balancing weight [default: 0.01]
    #[arg(long)]
    pub lambda_bal: Option<f64>,
    /// Mutual-information weight [default: 0.01]
    #[arg(long)]
    pub gamma_mi: Option<f64>,
    /// Dropout probability [default: 0.3]
    #[arg(long)]
    pub p_drop: Option<f64>,
    /// Updates between checkpoints [default: 500]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ObjectiveArg {
    Diffusion,
    Regression,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Diffusion => Objective::Diffusion,
            ObjectiveArg::Regression => Objective::Regression,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to evaluate [default: <out>/checkpoints/best.kdpc, else last.kdpc]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset whose observation statistics the checkpoint was trained with [default: <out>/demos.kdpd]
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Scenario kind (in_ramp, intersection, roundabout or all); repeatable [default: all]
    #[arg(long = "scenario")]
    pub scenarios: Vec<String>,
    /// Episodes per scenario [default: 50]
    #[arg(long, short = 'n')]
    pub episodes: Option<usize>,
    /// Sampler stochasticity in [0, 1] [default: 0]
    #[arg(long)]
    pub eta: Option<f64>,
    /// Policy under test [default: model]
    #[arg(long, value_enum)]
    pub policy: Option<PolicyKind>,
    /// Also measure per-decision latency of the checkpoint
    #[arg(long)]
    pub latency: bool,
    /// Timed trials for --latency [default: 100]
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory of `<scenario>.jsonl` traces [default: <out>/traces]
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Environment steps per temporal bucket [default: 5]
    #[arg(long)]
    pub bucket_steps: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct LatencyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Presets to time, comma separated [default: small,medium,large,giant]
    #[arg(long, value_delimiter = ',')]
    pub presets: Vec<Preset>,
    /// Timed trials per preset [default: 100]
    #[arg(long)]
    pub trials: Option<usize>,
    /// Diffusion steps T [default: 100]
    #[arg(long)]
    pub diffusion_steps: Option<usize>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenDemos(a) => cmd::gen_demos(&a),
        Command::Train(a) => cmd::train(&a),
        Command::Eval(a) => cmd::eval(&a),
        Command::Analyze(a) => cmd::analyze(&a),
        Command::Latency(a) => cmd::latency(&a),
    }
}
