//! `deltafm` command line: train, sample, eval, sweep, oracle-check and plot.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "deltafm", version, about = "Contrastive flow matching on small class-conditional datasets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a velocity field and write a checkpoint with its loss history.
    Train(TrainArgs),
    /// Draw samples (and optionally trajectories) from a checkpoint.
    Sample(SampleArgs),
    /// Score a checkpoint, or the analytic field, against fresh data.
    Eval(EvalArgs),
    /// Train/evaluate across values of one hyperparameter.
    Sweep(SweepArgs),
    /// Compare the closed-form contrastive optimum with brute-force minimisation.
    OracleCheck(OracleArgs),
    /// Render trajectories or loss histories as SVG.
    Plot(PlotArgs),
}

/// Flags that override fields of the run config.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Run config (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; beats the config value and `DELTAFM_OUTPUT_DIR`.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Contrastive weight for training.
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Fm,
    DeltaFm,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Suppress progress output.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplerArg {
    Ode,
    Sde,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GuidanceArg {
    None,
    Standard,
    Hat,
    Tilde,
}

/// Sampler and guidance flags shared by `sample` and `eval`.
#[derive(Debug, Clone, Default, Args)]
pub struct SamplingFlags {
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerArg>,
    /// Integration steps.
    #[arg(long)]
    pub nfe: Option<usize>,
    /// Sampler seed.
    #[arg(long = "sample-seed")]
    pub sample_seed: Option<u64>,
    /// Guidance rule; `standard` defaults to w=1.75 on [0, 0.75], `hat`/`tilde` to w=1.85 on [0, 0.65].
    #[arg(long, value_enum)]
    pub guidance: Option<GuidanceArg>,
    #[arg(long)]
    pub w: Option<f64>,
    #[arg(long)]
    pub sigma_low: Option<f64>,
    #[arg(long)]
    pub sigma_high: Option<f64>,
    /// Contrastive weight used by the corrected guidance rules.
    #[arg(long = "guidance-lambda")]
    pub guidance_lambda: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run config supplying the training data for the mean trajectory and sampler defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Samples per class.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Class index or `null`; repeatable. Defaults to every class of the checkpoint.
    #[arg(long = "class")]
    pub classes: Vec<String>,
    #[command(flatten)]
    pub sampling: SamplingFlags,
    /// Samples CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Trajectory CSV; with several classes each gets a `_class{c}` suffix.
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub record_every: usize,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate the analytic optimal velocity of the dataset instead of a checkpoint.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[command(flatten)]
    pub sampling: SamplingFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    Lambda,
    Nfe,
    BatchSize,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Comma-separated values; axis defaults apply when omitted.
    #[arg(long)]
    pub values: Option<String>,
    /// Sweep CSV; `<output_dir>/sweep_<axis>.csv` when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub probes: Option<usize>,
    /// Comma-separated contrastive weights.
    #[arg(long)]
    pub lambdas: Option<String>,
    #[arg(long)]
    pub positive_samples: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, hide = true)]
    pub corrupt_shift: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    Flows,
    Panels,
    DenoiseStrip,
    LossCurves,
}

#[derive(Debug, Clone, Args)]
pub struct PlotArgs {
    #[arg(long, value_enum)]
    pub kind: PlotKind,
    /// Trajectory CSVs (one per class, in class order) or loss CSVs.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    /// Contrastive-model trajectory CSVs for `panels`.
    #[arg(long = "delta-fm")]
    pub delta_fm: Vec<PathBuf>,
    /// Labelled data CSV drawn under the flows.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(&a).map(|_| ()),
        Command::Sample(a) => commands::sample(&a),
        Command::Eval(a) => commands::eval(&a).map(|_| ()),
        Command::Sweep(a) => commands::sweep(&a).map(|_| ()),
        Command::OracleCheck(a) => commands::oracle_check(&a).map(|_| ()),
        Command::Plot(a) => commands::plot(&a),
    }
}
