//! Pipeline driver: corpus generation, the three training stages, decoding,
//! evaluation and the benchmark/analysis commands.

pub mod commands;
pub mod config;
pub mod error;
mod io;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "blockdiff", version, about = "Block-diffusion report generation at toy scale")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory shared by all stages.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,

    /// Global seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// `dotted.key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the train/eval report corpus.
    GenCorpus,
    /// Stage 1: autoregressive teacher.
    TrainAr,
    /// Stage 2: response-only block-diffusion adaptation of the AR model.
    AdaptRad,
    /// Stage 3: one-step distillation from the stage-2 model's trajectories.
    Distill {
        #[arg(value_enum)]
        objective: Objective,
    },
    /// Decode the evaluation contexts with a trained stage.
    Decode,
    /// Check the vanilla/fused cache pass and FLOP identities.
    BenchKv,
    /// Attention FLOPs saved by the response-only layout versus full duplication.
    BenchRadFlops,
    /// Exact mean-field bias curves of the built-in distributions.
    AnalyzeBias,
    /// Commit-time confidence of eos versus content tokens.
    AnalyzeEos,
    /// Decode and score the evaluation set.
    Eval,
    /// Gap-recovery table over previously evaluated runs.
    Compare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Objective {
    Dcd,
    TrajectoryCe,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::TrainAr => "train-ar",
            Command::AdaptRad => "adapt-rad",
            Command::Distill { .. } => "distill",
            Command::Decode => "decode",
            Command::BenchKv => "bench-kv",
            Command::BenchRadFlops => "bench-rad-flops",
            Command::AnalyzeBias => "analyze-bias",
            Command::AnalyzeEos => "analyze-eos",
            Command::Eval => "eval",
            Command::Compare => "compare",
        }
    }
}
