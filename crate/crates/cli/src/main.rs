//! `cpf`: synthesise features, train the heads, evaluate, check gradients.
//!
//! Exit codes: 0 success, 1 failed verification, 2 usage error, 3 data or
//! format error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

impl From<cpf_core::Error> for CliError {
    fn from(e: cpf_core::Error) -> Self {
        match e {
            cpf_core::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cpf", version, about = "Conditional probability heads over precomputed features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset: features, word table and splits.
    Synth(SynthArgs),
    /// Train a head and write a checkpoint plus logs.
    Train(TrainArgs),
    /// Score a test set and sweep the calibration bias.
    Eval(EvalArgs),
    /// Compare tape gradients with finite differences on random instances.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// `key = value` file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<String>,
    /// Attribute count.
    #[arg(long = "M")]
    pub m: Option<String>,
    /// Object count.
    #[arg(long = "N")]
    pub n: Option<String>,
    #[arg(long)]
    pub seen_frac: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// Training images per seen composition.
    #[arg(long)]
    pub samples: Option<String>,
    /// Dependence of attribute appearance on the object.
    #[arg(long)]
    pub kappa: Option<String>,
    /// Noise level.
    #[arg(long)]
    pub sigma: Option<String>,
    /// Visual width.
    #[arg(long = "D")]
    pub visual_dim: Option<String>,
    /// Text width.
    #[arg(long = "d")]
    pub text_dim: Option<String>,
    /// Patch tokens per image.
    #[arg(long = "T")]
    pub tokens: Option<String>,
    /// Shallow blocks per image.
    #[arg(long = "B")]
    pub blocks: Option<String>,
    /// Fraction of patches showing the labelled pair.
    #[arg(long)]
    pub foreground: Option<String>,
    /// Weight of the distractor object in deep patches.
    #[arg(long)]
    pub distractor: Option<String>,
    /// Feature magnitude (default sqrt(D)).
    #[arg(long)]
    pub scale: Option<String>,
    #[arg(long)]
    pub text_scale: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory written by `synth` (or holding the same file names).
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub decay_factor: Option<String>,
    #[arg(long)]
    pub decay_epoch: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub tau: Option<String>,
    /// Attribute loss weight.
    #[arg(long)]
    pub alpha1: Option<String>,
    /// Object loss weight.
    #[arg(long)]
    pub alpha2: Option<String>,
    /// full, no-teo or no-teo-oga.
    #[arg(long)]
    pub variant: Option<String>,
    /// Stored shallow blocks to fuse, e.g. `0,2`, or `all`.
    #[arg(long)]
    pub blocks: Option<String>,
    #[arg(long)]
    pub log_every: Option<String>,
    /// Composition loss over every pair instead of the seen ones.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub full_train_softmax: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<String>,
    /// cw or ow.
    #[arg(long)]
    pub setting: Option<String>,
    /// Use k evenly spaced biases instead of the exact grid.
    #[arg(long)]
    pub bias_grid: Option<String>,
    /// Scoring threads; falls back to CPF_THREADS, then 1.
    #[arg(long)]
    pub threads: Option<String>,
    /// Report file (default: next to the checkpoint).
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of random instances.
    #[arg(long)]
    pub seeds: Option<String>,
    /// First instance seed.
    #[arg(long)]
    pub seed: Option<String>,
    /// Central-difference step (default 1e-5).
    #[arg(long)]
    pub eps: Option<String>,
    /// Test only: break a backward rule (softmax-jacobian).
    #[arg(long)]
    pub inject_fault: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
