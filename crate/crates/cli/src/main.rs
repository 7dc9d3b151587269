//! `lookback`: train, evaluate and inspect multi-layer label-propagation
//! few-shot models.

mod commands;
mod config;
mod data;
mod inspect;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lookback::Error;

use crate::data::SplitName;

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    /// Bad input: configuration, manifests, files, checkpoint versions.
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidSpec(_)
            | Error::Config(_)
            | Error::Manifest(_)
            | Error::MissingClasses { .. }
            | Error::Decode { .. }
            | Error::VersionMismatch { .. }
            | Error::Checkpoint(_) => 2,
            Error::TooFewClasses { .. }
            | Error::ClassTooSmall { .. }
            | Error::SeparationInfeasible { .. }
            | Error::NeighborsTooLarge { .. } => 3,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "lookback", version, about = "Multi-layer label propagation for few-shot classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration file plus dotted overrides, shared by most commands.
#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one value, e.g. `--set train.alpha=0.9` or `--set train.weights=0,0,1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Episodic training; writes metrics and checkpoints into the run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from a checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over many sampled episodes.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Also evaluate this checkpoint on the same episodes and report the paired difference.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Where to write the JSON report (default: next to the checkpoint).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate a prototype-plus-noise dataset in the class-per-folder layout.
    SynthData(commands::SynthArgs),
    /// Dump every intermediate quantity of one episode.
    Inspect {
        #[command(flatten)]
        config: ConfigArgs,
        /// Trained weights; a fresh initialization is used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Seed of the sampled episode.
        #[arg(long, default_value_t = 0)]
        episode_seed: u64,
        /// Write the dump here instead of standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences on a tiny episode.
    Gradcheck(commands::GradcheckArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, resume } => commands::train(&config, resume.as_deref()),
        Command::Eval {
            config,
            checkpoint,
            split,
            compare,
            report,
        } => commands::eval(&config, &checkpoint, split, compare.as_deref(), report.as_deref()),
        Command::SynthData(args) => commands::synth_data(&args),
        Command::Inspect {
            config,
            checkpoint,
            split,
            episode_seed,
            output,
        } => inspect::run(&config, checkpoint.as_deref(), split, episode_seed, output.as_deref()),
        Command::Gradcheck(args) => commands::gradcheck(&args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
