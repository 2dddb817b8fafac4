//! `recon`: ingest a corpus, run rollouts, train the toy policy and the
//! relevance model, build distillation data, and compute efficiency reports.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use recon_core::AspectId;

#[derive(Debug, Parser)]
#[command(name = "recon", version, about = "Search-reason-answer rollouts with evidence condensation")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (overrides RECON_SEED and the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Append a record of this run to the given JSONL file.
    #[arg(long, global = true)]
    pub runs_log: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a BM25 index from a JSONL corpus.
    Ingest {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Where to write the index.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run rollouts for every question in a QA file.
    Rollout(RolloutArgs),
    /// Train the tabular policy on the synthetic fact-lookup environment.
    TrainToy {
        #[arg(long)]
        iterations: Option<usize>,
        /// Inject raw documents instead of condensed evidence.
        #[arg(long)]
        raw: bool,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the passage relevance model.
    TrainRelevance {
        /// JSONL `{query, passages, label}` examples.
        #[arg(long, conflicts_with = "synthetic")]
        data: Option<PathBuf>,
        /// Train on N generated separable examples instead.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Where to write the trained model (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Harvest queries from a trajectory log and emit summarizer triplets.
    BuildDistill {
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Source dataset label for the stats.
        #[arg(long, default_value = "default")]
        dataset: String,
        /// Restrict to these aspects (comma separated).
        #[arg(long, value_delimiter = ',')]
        aspects: Vec<AspectId>,
        #[arg(long)]
        teacher: Option<String>,
        #[arg(long, default_value_t = 4)]
        max_in_flight: usize,
    },
    /// Score trajectory logs against QA files.
    Eval {
        /// `NAME=LOG:QA`, repeatable; one row per dataset.
        #[arg(long = "dataset", value_name = "NAME=LOG:QA", required = true)]
        datasets: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare a baseline report with ours.
    Report {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        ours: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub qa: Option<PathBuf>,
    /// Scripted policy fixture (`{question, segments}` lines) used when no
    /// policy endpoint is configured.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Search-R1 wiring: 3 turns, top-3, raw documents.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long)]
    pub turns_max: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub no_condense: bool,
    #[arg(long)]
    pub aspect: Option<AspectId>,
    /// Concurrent trajectories.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    /// Only the first N questions.
    #[arg(long)]
    pub limit: Option<usize>,
}

/// A problem with the invocation itself rather than with the run.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
