//! Command-line entry point: training, evaluation, ablation, transfer
//! evaluation, preference statistics, dataset statistics, serving and a
//! terminal chat loop.

pub mod commands;
pub mod compare;
pub mod config;
pub mod repl;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use compare::{compare_preferences, CompareReport, CompareRow, Preference, ResponseRecord, Winner};
pub use config::{Overrides, Preset, RunConfig, ScorerKind, SEED_ENV};
pub use repl::{run_repl, ChatStart};

use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "imagechat", version, about = "Image-grounded, style-conditioned dialogue models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the retrieval model with in-batch negatives.
    TrainRet,
    /// Train the generative model with teacher forcing.
    TrainGen,
    /// Pretrain the text encoders on utterance pairs.
    Pretrain,
    /// Evaluate a checkpoint or a baseline scorer on one split.
    Eval,
    /// Evaluate the seven modality masks.
    Ablate,
    /// Evaluate a generative checkpoint on IGC question-response data.
    IgcEval,
    /// Win rates and p-values from pairwise preference labels.
    Compare,
    /// Dataset statistics.
    Stats,
    /// Serve the HTTP API.
    Serve,
    /// Interactive terminal chat.
    Chat {
        /// Replay a saved transcript and check every model turn matches.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainRet => "train-ret",
            Command::TrainGen => "train-gen",
            Command::Pretrain => "pretrain",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::IgcEval => "igc-eval",
            Command::Compare => "compare",
            Command::Stats => "stats",
            Command::Serve => "serve",
            Command::Chat { .. } => "chat",
        }
    }
}

/// Runs one subcommand; `env_seed` is the value of `IMAGECHAT_SEED`.
pub fn run(cli: &Cli, env_seed: Option<&str>) -> Result<()> {
    let cfg = RunConfig::resolve(cli.command.name(), &cli.overrides, env_seed)?;
    match &cli.command {
        Command::TrainRet => commands::train_ret(&cfg),
        Command::TrainGen => commands::train_gen(&cfg),
        Command::Pretrain => commands::pretrain_cmd(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Ablate => commands::ablate(&cfg),
        Command::IgcEval => commands::igc_eval(&cfg),
        Command::Compare => commands::compare(&cfg),
        Command::Stats => commands::stats(&cfg),
        Command::Serve => commands::serve(&cfg),
        Command::Chat { replay } => commands::chat(&cfg, replay.as_deref()),
    }
}
