//! `tkg`: train, evaluate, gradient-check, synthesize data and sweep.
//!
//! Exit status is 0 on success, 2 for usage errors (bad flags or an invalid
//! resolved config) and 1 for everything else. `TKG_LOG` sets the log
//! filter (default `info`).

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Failure classes that map onto exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Run(e)
    }
}

impl From<tkg_core::TkgError> for CliError {
    fn from(e: tkg_core::TkgError) -> Self {
        CliError::Run(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "tkg", version, about = "Temporal knowledge graph extrapolation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint plus a JSON-lines log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Check analytic against numeric gradients of the full training loss.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic periodic dataset.
    Synth(SynthArgs),
    /// Train and evaluate once per value of one hyperparameter.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblateTarget {
    MultiSpan,
    Disentangle,
    /// Multi-span and disentangle together.
    Both,
    VirtualGraph,
}

/// Hyperparameters shared by `train` and `sweep`. Precedence is flag, then
/// config file, then preset.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Named defaults: icews14, icews05-15, icews18, gdelt or synth.
    #[arg(long)]
    pub preset: Option<String>,
    /// Flat `key = value` file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory, or `synth` for the built-in synthetic dataset.
    #[arg(long)]
    pub data: Option<String>,
    /// Embedding dimension.
    #[arg(long)]
    pub d: Option<usize>,
    /// History length.
    #[arg(long)]
    pub m: Option<usize>,
    /// Evolution layers.
    #[arg(long)]
    pub omega: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Candidates sampled per query for the virtual graph.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Maximum number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Disable a component; may be repeated.
    #[arg(long, value_enum)]
    pub ablate: Vec<AblateTarget>,
    /// Score with the first pass only.
    #[arg(long)]
    pub no_virtual_graph: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for the manifest, log and checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint; flags given here override its config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Resolve the config, write the manifest and stop.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FilterArg {
    TimeAware,
    Static,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory or `synth`; defaults to the one the checkpoint recorded.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "time-aware")]
    pub filter: FilterArg,
    /// Score with the first pass only.
    #[arg(long)]
    pub no_virtual_graph: bool,
    /// Also write per-timestamp metrics as CSV.
    #[arg(long)]
    pub csv: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = tkg_core::gradsuite::TOLERANCE)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negate the analytic gradient of this parameter (checks the checker).
    #[arg(long, hide = true)]
    pub inject_sign_bug: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub entities: usize,
    #[arg(long, default_value_t = 2)]
    pub relations: usize,
    #[arg(long, default_value_t = 2)]
    pub period: usize,
    #[arg(long, default_value_t = 200)]
    pub timesteps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Dataset directory to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    M,
    Omega,
    K,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TKG_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap reports usage errors with status 2 and help/version with 0.
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Synth(a) => commands::synth(a),
        Command::Sweep(a) => commands::sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
