//! `gpglab`: seeded group policy-gradient experiments from the command line.
//!
//! Subcommands: `train` (run one seed or a sweep, writing metrics and
//! checkpoints), `distsim` (verify the distributed-averaging identity),
//! and `gradcheck` (analytic vs finite-difference gradients).

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gpg_core::Algorithm;

mod config;
mod distsim;
mod gradcheck;
mod sinks;
mod train;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments (exit code 2).
    Config(String),
    /// A run or check failed (exit code 1).
    Runtime(String),
}

pub fn parse_algorithm(name: &str) -> Result<Algorithm, CliError> {
    match name {
        "gpg" => Ok(Algorithm::Gpg),
        "grpo" => Ok(Algorithm::Grpo),
        "dr-grpo" => Ok(Algorithm::DrGrpo),
        "ppo-clip" => Ok(Algorithm::PpoClip),
        "dapo" => Ok(Algorithm::Dapo),
        other => Err(CliError::Config(format!(
            "unknown algorithm {other:?} (expected gpg, grpo, dr-grpo, ppo-clip, or dapo)"
        ))),
    }
}

#[derive(Parser)]
#[command(
    name = "gpglab",
    version,
    about = "Group policy-gradient laboratory: seeded training runs, \
             distributed-averaging checks, and gradient verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy per the experiment config, one run per seed.
    Train(train::TrainArgs),
    /// Verify the distributed gradient-averaging identity on simulated shards.
    Distsim(distsim::DistsimArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(gradcheck::GradcheckArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(args) => train::cmd_train(args),
        Command::Distsim(args) => distsim::cmd_distsim(args),
        Command::Gradcheck(args) => gradcheck::cmd_gradcheck(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
