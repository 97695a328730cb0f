use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::Serialize;
use trajsim::gnn;
use trajsim::graph::{self, CoverageReport};
use trajsim::ingest;
use trajsim::io;
use trajsim::pipeline::{self, PipelineConfig};
use trajsim::search;

use crate::config::{resolve, Global, Overrides};
use crate::error::Failure;

pub const TRAJECTORIES: &str = "trajectories.jsonl";
pub const GRIDDED: &str = "gridded.jsonl";
pub const PREPROCESS_SUMMARY: &str = "preprocess.json";
pub const RAW: &str = "raw.tsm";
pub const NORMALIZED: &str = "normalized.tsm";
pub const GRAPH: &str = "graph.tsg";
pub const GRAPH_SUMMARY: &str = "graph.json";
pub const MODEL: &str = "model.tsn";
pub const EMBEDDINGS: &str = "embeddings.tse";
pub const LOSS: &str = "loss.csv";
pub const REPORT: &str = "report.json";

#[derive(Serialize)]
struct Meta<'a> {
    command: &'a str,
    config: &'a PipelineConfig,
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

/// Records the producing command and its full configuration next to `file`.
fn write_meta(file: &Path, command: &str, config: &PipelineConfig) -> Result<(), Failure> {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    write_text(&file.with_file_name(name), &to_json(&Meta { command, config }))
}

struct Stage<'a> {
    out: &'a Path,
    config: &'a PipelineConfig,
    command: &'a str,
}

impl Stage<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn produced(&self, name: &str) -> Result<PathBuf, Failure> {
        let path = self.path(name);
        write_meta(&path, self.command, self.config)?;
        Ok(path)
    }

    fn node_ids(&self) -> Result<Vec<String>, Failure> {
        let gridded = ingest::read_gridded_jsonl(&self.path(GRIDDED))?;
        Ok(gridded.into_iter().map(|g| g.id).collect())
    }
}

fn prepare(global: &Global, o: &Overrides) -> Result<PipelineConfig, Failure> {
    let config = resolve(global, o)?;
    std::fs::create_dir_all(&global.out_dir).map_err(|e| io_failure(&global.out_dir, e))?;
    Ok(config)
}

fn run_preprocess(stage: &Stage) -> Result<(), Failure> {
    if stage.config.input.is_none() {
        return Err(Failure::BadInput("no input dataset given (set `input` or pass --input)".into()));
    }
    let (kept, gridded, summary) = pipeline::load_and_preprocess(stage.config)?;
    info!(
        "parsed {} trajectories ({} malformed records skipped), {} kept with >= {} points",
        summary.parsed, summary.skipped, summary.kept, stage.config.min_points
    );
    ingest::write_canonical_jsonl(&stage.produced(TRAJECTORIES)?, &kept)?;
    ingest::write_gridded_jsonl(&stage.produced(GRIDDED)?, &gridded)?;
    write_text(&stage.produced(PREPROCESS_SUMMARY)?, &to_json(&summary))
}

fn run_distances(stage: &Stage) -> Result<(), Failure> {
    let gridded = ingest::read_gridded_jsonl(&stage.path(GRIDDED))?;
    let n = gridded.len();
    info!("computing {} {} distances over {n} trajectories", n * n.saturating_sub(1) / 2, stage.config.distance);
    let start = Instant::now();
    let (raw, normalized) = pipeline::distances(&gridded, stage.config)?;
    info!("distances done in {:.2?}; scale divisor {}", start.elapsed(), normalized.scale);
    io::write_raw_matrix(&stage.produced(RAW)?, &raw, normalized.scale)?;
    io::write_distance_matrix(&stage.produced(NORMALIZED)?, &normalized)?;
    Ok(())
}

#[derive(Serialize)]
struct GraphSummary {
    /// How the asymmetric normalized matrix was made symmetric before banding.
    symmetrization: &'static str,
    thresholds: Vec<f64>,
    edge_counts: Vec<usize>,
    degenerate: bool,
    fraction_above_top: f64,
    coverage: CoverageReport,
}

fn run_build_graph(stage: &Stage) -> Result<(), Failure> {
    let d = io::read_distance_matrix(&stage.path(NORMALIZED))?;
    let (g, choice) = pipeline::build_graph(&d, stage.node_ids()?, stage.config)?;
    if choice.degenerate {
        warn!("all pairwise distances are equal; thresholds are arbitrary");
    }
    if choice.fraction_above_top > 0.0 {
        warn!("{:.2}% of pairs lie above the top threshold and get no edge", 100.0 * choice.fraction_above_top);
    }
    let coverage = graph::coverage_check(&g, &d);
    info!("edges per layer {:?}; coverage violations {}", g.edge_counts(), coverage.violations);
    io::write_graph(&stage.produced(GRAPH)?, &g)?;
    let summary = GraphSummary {
        symmetrization: "mean: (d_ij + d_ji) / 2",
        thresholds: g.thresholds.values().to_vec(),
        edge_counts: g.edge_counts(),
        degenerate: choice.degenerate,
        fraction_above_top: choice.fraction_above_top,
        coverage,
    };
    write_text(&stage.produced(GRAPH_SUMMARY)?, &to_json(&summary))
}

fn run_train(stage: &Stage) -> Result<(), Failure> {
    let d = io::read_distance_matrix(&stage.path(NORMALIZED))?;
    let g = io::read_graph(&stage.path(GRAPH), stage.node_ids()?)?;
    let train_config = stage.config.effective_train();
    let (model, input) = gnn::init_model(&g, &train_config)?;
    let start = Instant::now();
    let outcome = gnn::train_from(model, &input, &g, &d, &train_config)?;
    let last = outcome.loss_history.last().copied().unwrap_or(f64::NAN);
    info!("trained {} epochs in {:.2?}; final loss {last}", train_config.epochs, start.elapsed());
    io::write_model(&stage.produced(MODEL)?, &outcome.model, &input)?;
    io::write_embeddings(&stage.produced(EMBEDDINGS)?, &outcome.embeddings)?;
    let mut csv = String::from("epoch,loss\n");
    for (epoch, loss) in outcome.loss_history.iter().enumerate() {
        writeln!(csv, "{epoch},{loss}").expect("writing to a String");
    }
    write_text(&stage.produced(LOSS)?, &csv)
}

fn run_evaluate(stage: &Stage, embeddings: &Path, raw: &Path) -> Result<(), Failure> {
    let emb = io::read_embeddings(embeddings)?;
    let raw = io::read_raw_matrix(raw)?;
    let queries = search::held_out_queries(raw.n, stage.config.eval_fraction, stage.config.seed);
    let report = search::evaluate(&emb, &raw, &queries, stage.config.seed)?;
    let json = to_json(&report);
    write_text(&stage.produced(REPORT)?, &json)?;
    print!("{json}");
    Ok(())
}

macro_rules! stage_command {
    ($name:ident, $runner:ident, $label:literal) => {
        pub fn $name(global: &Global, o: &Overrides) -> Result<(), Failure> {
            let config = prepare(global, o)?;
            $runner(&Stage { out: &global.out_dir, config: &config, command: $label })
        }
    };
}

stage_command!(preprocess, run_preprocess, "preprocess");
stage_command!(distances, run_distances, "distances");
stage_command!(build_graph, run_build_graph, "build-graph");
stage_command!(train, run_train, "train");

pub fn search(global: &Global, query: &str, k: usize, embeddings: Option<PathBuf>) -> Result<(), Failure> {
    let path = embeddings.unwrap_or_else(|| global.out_dir.join(EMBEDDINGS));
    let emb = io::read_embeddings(&path)?;
    for id in search::knn_search(&emb, query, k)? {
        println!("{id}");
    }
    Ok(())
}

pub fn evaluate(
    global: &Global,
    o: &Overrides,
    embeddings: Option<PathBuf>,
    raw: Option<PathBuf>,
) -> Result<(), Failure> {
    let config = prepare(global, o)?;
    let stage = Stage { out: &global.out_dir, config: &config, command: "evaluate" };
    let embeddings = embeddings.unwrap_or_else(|| stage.path(EMBEDDINGS));
    let raw = raw.unwrap_or_else(|| stage.path(RAW));
    run_evaluate(&stage, &embeddings, &raw)
}

pub fn pipeline(global: &Global, o: &Overrides) -> Result<(), Failure> {
    let config = prepare(global, o)?;
    let stage = Stage { out: &global.out_dir, config: &config, command: "pipeline" };
    let start = Instant::now();
    run_preprocess(&stage)?;
    run_distances(&stage)?;
    run_build_graph(&stage)?;
    run_train(&stage)?;
    run_evaluate(&stage, &stage.path(EMBEDDINGS), &stage.path(RAW))?;
    info!("pipeline finished in {:.2?}", start.elapsed());
    Ok(())
}
