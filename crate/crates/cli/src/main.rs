//! `kgenv`: serve graphs, collect rollouts, score them, compute credit and
//! run evaluations.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kgenv_core::retrieval::FormatMode;

#[derive(Debug, Parser)]
#[command(name = "kgenv", version, about = "Knowledge-graph retrieval environment toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML file with [reward], [credit] and [eval] sections.
    #[arg(long, global = true, env = "KGENV_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "KGENV_SEED")]
    pub seed: Option<u64>,
    /// Worker threads for rollouts and evaluation.
    #[arg(long, global = true, env = "KGENV_CONCURRENCY")]
    pub concurrency: Option<usize>,
    /// Turn budget H.
    #[arg(long, global = true, env = "KGENV_MAX_TURNS")]
    pub max_turns: Option<usize>,
    /// Rollouts per question.
    #[arg(long, global = true, env = "KGENV_N")]
    pub n: Option<usize>,
    /// Relation rendering.
    #[arg(long, global = true, env = "KGENV_FORMAT", value_enum)]
    pub format: Option<Format>,
    #[arg(long, global = true, env = "KGENV_RESULT_CAP")]
    pub result_cap: Option<usize>,
    /// Base URL of a running retrieval service; graphs are queried there
    /// instead of in process.
    #[arg(long, global = true, env = "KGENV_ENDPOINT")]
    pub endpoint: Option<String>,
    /// Ablations, repeatable.
    #[arg(long = "ablate", global = true, value_enum)]
    pub ablations: Vec<Ablation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Flat,
    Hierarchical,
}

impl From<Format> for FormatMode {
    fn from(f: Format) -> Self {
        match f {
            Format::Flat => FormatMode::Flat,
            Format::Hierarchical => FormatMode::Hierarchical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Zero the format, retrieval and answer-format turn weights.
    TurnRewards,
    /// One trajectory-level return per rollout instead of per-turn returns.
    TurnwiseAdvantage,
    /// Zero the retrieval-coverage weight.
    RetrievalReward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyKind {
    /// Walks each sample's gold path.
    Oracle,
    /// Seeded random messages.
    Random,
    /// Replays a trajectory file.
    Replay,
    /// A text-completion endpoint.
    Remote,
}

#[derive(Debug, Args)]
pub struct PolicyArgs {
    #[arg(long, env = "KGENV_POLICY", value_enum, default_value = "oracle")]
    pub policy: PolicyKind,
    /// Trajectory file for `--policy replay`.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    /// Completion endpoint for `--policy remote`.
    #[arg(long, env = "KGENV_POLICY_URL")]
    pub policy_url: Option<String>,
    #[arg(long, env = "KGENV_MODEL", default_value = "default")]
    pub model: String,
    /// Defaults to 1.0 for `rollout` and 0.0 for `evaluate`.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub top_k: Option<i64>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long, env = "KGENV_POLICY_TIMEOUT_MS", default_value_t = 60_000)]
    pub policy_timeout_ms: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Start the retrieval service.
    Serve {
        /// QA dataset (JSON lines).
        #[arg(long, env = "KGENV_DATASET")]
        dataset: Option<PathBuf>,
        /// Triple file served under the reserved sample id "*".
        #[arg(long, env = "KGENV_SHARED_GRAPH")]
        shared_graph: Option<PathBuf>,
        #[arg(long, env = "KGENV_BIND", default_value = "127.0.0.1:8000")]
        bind: String,
        #[arg(long, env = "KGENV_TIMEOUT_MS", default_value_t = 5000)]
        timeout_ms: u64,
    },
    /// Cut per-sample subgraphs out of a full triple file.
    Ingest {
        /// Full knowledge graph (.tsv or .jsonl).
        #[arg(long)]
        triples: PathBuf,
        /// QA rows with sample_id, question, anchor_entities and gold_answers.
        #[arg(long)]
        qa: PathBuf,
        /// Output directory for dataset.jsonl and graphs/.
        #[arg(long)]
        out: PathBuf,
        /// Undirected hop radius around the anchors.
        #[arg(long, default_value_t = 2)]
        radius: usize,
    },
    /// Collect rollouts and write them as JSON lines.
    Rollout {
        #[arg(long, env = "KGENV_DATASET")]
        dataset: PathBuf,
        #[command(flatten)]
        policy: PolicyArgs,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Record per-token log-probabilities when the policy offers them.
        #[arg(long)]
        logprobs: bool,
    },
    /// Compute reward breakdowns for a trajectory file.
    Score {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long, env = "KGENV_DATASET")]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute group advantages and, given token log-probs, the objective.
    Credit {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long, env = "KGENV_DATASET")]
        dataset: PathBuf,
        /// Token batches, one JSON line per group.
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full loop and print a metrics report.
    Evaluate {
        /// QA datasets; repeat to evaluate several.
        #[arg(long, env = "KGENV_DATASET", required = true, value_delimiter = ',')]
        dataset: Vec<PathBuf>,
        #[command(flatten)]
        policy: PolicyArgs,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print JSON instead of the text table.
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("KGENV_LOG", "warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
