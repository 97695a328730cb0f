//! `trajsim`: staged command line driver for the trajectory similarity pipeline.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "trajsim", version, about = "Trajectory similarity search with multi-scale graph embeddings")]
struct Cli {
    /// Pipeline configuration (TOML, or JSON when the extension is `.json`).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Distance worker threads; 0 picks one per core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Directory holding every stage's artifacts.
    #[arg(long, global = true, value_name = "PATH", default_value = "trajsim-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse, filter by length, snap to the grid; writes trajectories.jsonl and gridded.jsonl.
    Preprocess(Overrides),
    /// Pairwise distances of the gridded sequences; writes raw.tsm and normalized.tsm.
    Distances(Overrides),
    /// Multi-scale graph from normalized.tsm; writes graph.tsg and graph.json.
    BuildGraph(Overrides),
    /// Train the embedding network; writes model.tsn, embeddings.tse and loss.csv.
    Train(Overrides),
    /// Print the K nearest trajectory IDs of one query, one per line.
    Search(SearchArgs),
    /// Score embeddings against the raw distance matrix; writes report.json.
    Evaluate(EvaluateArgs),
    /// Run every stage in order.
    Pipeline(Overrides),
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// Query trajectory ID.
    query: String,
    #[arg(short, long, default_value_t = 10)]
    k: usize,
    /// Embedding file (defaults to `<out-dir>/embeddings.tse`).
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Embedding file (defaults to `<out-dir>/embeddings.tse`).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Raw distance matrix (defaults to `<out-dir>/raw.tsm`).
    #[arg(long)]
    raw: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let global = config::Global { config: cli.config, seed: cli.seed, workers: cli.workers, out_dir: cli.out_dir };
    let result = match cli.command {
        Command::Preprocess(o) => commands::preprocess(&global, &o),
        Command::Distances(o) => commands::distances(&global, &o),
        Command::BuildGraph(o) => commands::build_graph(&global, &o),
        Command::Train(o) => commands::train(&global, &o),
        Command::Search(a) => commands::search(&global, &a.query, a.k, a.embeddings),
        Command::Evaluate(a) => commands::evaluate(&global, &a.overrides, a.embeddings, a.raw),
        Command::Pipeline(o) => commands::pipeline(&global, &o),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.exit_code() as u8)
        }
    }
}
