//! Library side of the `rbo` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration or usage error (including missing
//! input artifacts), 3 I/O failure, 4 training divergence, 5 failed
//! verification. Code 1 marks an unexpected internal error.

pub mod commands;
pub mod exit;
pub mod gradsuite;
pub mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use exit::{CliError, CliResult, ExitCode};

#[derive(Debug, Parser)]
#[command(name = "rbo", version, about = "Ranking-loss Siamese tracker on synthetic distractor scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render one synthetic sequence to PPM frames plus annotations.
    Synth {
        /// Sequence spec (`key = value`).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed of the config and of RBO_SEED.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model and write its checkpoint and run log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Track and score a checkpoint on held-out sequences.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Exported sequence directories; defaults to the generated held-out set.
        #[arg(long = "sequences", num_args = 1..)]
        sequences: Vec<PathBuf>,
        /// Held-out set and inference settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare recorded gradients with central differences.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate the loss-flag arms with identical seeds.
    Ablation {
        /// One base config, or one config per arm.
        #[arg(long, num_args = 1..)]
        config: Vec<PathBuf>,
        #[arg(long = "eval-config")]
        eval_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated arms: baseline, cr, cr_igr_ori, cr_igr.
        #[arg(long)]
        arms: Option<String>,
    },
}

pub fn run(cli: Cli) -> CliResult {
    use commands::*;
    match cli.command {
        Command::Synth { config, out, seed } => cmd_synth(config.as_deref(), &out, seed),
        Command::Train { config, out, seed } => cmd_train(config.as_deref(), &out, seed),
        Command::Eval {
            checkpoint,
            sequences,
            config,
            out,
        } => cmd_eval(&checkpoint, &sequences, config.as_deref(), &out),
        Command::Gradcheck { out, seed } => cmd_gradcheck(out.as_deref(), seed),
        Command::Ablation {
            config,
            eval_config,
            out,
            seed,
            arms,
        } => cmd_ablation(&config, eval_config.as_deref(), &out, seed, arms.as_deref()).map(|_| ()),
    }
}
