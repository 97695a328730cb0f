//! Declarative configuration and in-memory wiring of all stages.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distance::{self, DistanceError, DistanceKind, DistanceMatrix, RawDistanceMatrix};
use crate::gnn::{self, GnnError, TrainConfig, TrainOutcome};
use crate::graph::{self, GraphError, MultiScaleGraph, ThresholdChoice};
use crate::ingest::{self, DatasetFormat, GridSpec, GriddedTrajectory, IngestError, Trajectory};
use crate::search::{self, EvalReport, SearchError};
use crate::Point;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Distance(#[from] DistanceError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("zero trajectories left after filtering (min_points = {0})")]
    NothingLeft(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: Option<PathBuf>,
    pub format: DatasetFormat,
    pub min_points: usize,
    /// Apply `min_points` to the gridded (deduplicated) sequences instead of the raw points.
    pub filter_after_grid: bool,
    pub cell_size_m: f64,
    pub distance: DistanceKind,
    pub layers: usize,
    pub c0_percentile: f64,
    pub seed: u64,
    pub workers: usize,
    /// Collapse the graph to a single band (`layers = 1`).
    pub single_scale: bool,
    /// Feed the input embeddings to every attention layer.
    pub no_sequential_connection: bool,
    /// Fraction of trajectories used as evaluation queries; 1.0 queries every trajectory.
    pub eval_fraction: f64,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: None,
            format: DatasetFormat::CanonicalJsonl,
            min_points: 50,
            filter_after_grid: false,
            cell_size_m: 50.0,
            distance: DistanceKind::Frechet,
            layers: 3,
            c0_percentile: 10.0,
            seed: 42,
            workers: 0,
            single_scale: false,
            no_sequential_connection: false,
            eval_fraction: 1.0,
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn effective_layers(&self) -> usize {
        if self.single_scale {
            1
        } else {
            self.layers
        }
    }

    /// Training settings with the pipeline-level seed and ablation switches applied.
    pub fn effective_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            sequential: !self.no_sequential_connection,
            ..self.train.clone()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PreprocessSummary {
    pub parsed: usize,
    pub skipped: usize,
    pub kept: usize,
    pub grid: GridSpec,
}

/// Filter by length and snap to the grid anchored at the dataset's south-west corner.
pub fn preprocess(
    trajs: Vec<Trajectory>,
    skipped: usize,
    config: &PipelineConfig,
) -> Result<(Vec<Trajectory>, Vec<GriddedTrajectory>, PreprocessSummary), PipelineError> {
    let parsed = trajs.len();
    let (kept, gridded, grid) = if config.filter_after_grid {
        let grid = GridSpec::covering(&trajs, config.cell_size_m)?;
        let gridded = ingest::grid_trajectories(&trajs, &grid)?;
        let (kept, gridded): (Vec<_>, Vec<_>) = trajs
            .into_iter()
            .zip(gridded)
            .filter(|(_, g)| g.cells.len() >= config.min_points)
            .unzip();
        (kept, gridded, grid)
    } else {
        let kept = ingest::filter_by_length(trajs, config.min_points);
        if kept.is_empty() {
            return Err(PipelineError::NothingLeft(config.min_points));
        }
        let grid = GridSpec::covering(&kept, config.cell_size_m)?;
        let gridded = ingest::grid_trajectories(&kept, &grid)?;
        (kept, gridded, grid)
    };
    if kept.is_empty() {
        return Err(PipelineError::NothingLeft(config.min_points));
    }
    let summary = PreprocessSummary { parsed, skipped, kept: kept.len(), grid };
    Ok((kept, gridded, summary))
}

pub fn load_and_preprocess(
    config: &PipelineConfig,
) -> Result<(Vec<Trajectory>, Vec<GriddedTrajectory>, PreprocessSummary), PipelineError> {
    let path = config.input.clone().unwrap_or_default();
    let parsed = ingest::parse_dataset(&path, config.format)?;
    preprocess(parsed.trajectories, parsed.skipped, config)
}

pub fn centroid_sequences(gridded: &[GriddedTrajectory]) -> Vec<Vec<Point>> {
    gridded.iter().map(|g| g.centroids.clone()).collect()
}

pub fn distances(
    gridded: &[GriddedTrajectory],
    config: &PipelineConfig,
) -> Result<(RawDistanceMatrix, DistanceMatrix), PipelineError> {
    let raw = distance::raw_distance_matrix(&centroid_sequences(gridded), config.distance, config.workers)?;
    let normalized = distance::normalize_distances(&raw)?;
    Ok((raw, normalized))
}

pub fn build_graph(
    d: &DistanceMatrix,
    node_ids: Vec<String>,
    config: &PipelineConfig,
) -> Result<(MultiScaleGraph, ThresholdChoice), PipelineError> {
    let choice = graph::choose_thresholds(d, config.effective_layers(), config.c0_percentile)?;
    let g = graph::build_graph(d, &choice.thresholds, node_ids)?;
    Ok((g, choice))
}

/// Everything one end-to-end run produces.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub gridded: Vec<GriddedTrajectory>,
    pub raw: RawDistanceMatrix,
    pub normalized: DistanceMatrix,
    pub graph: MultiScaleGraph,
    pub training: TrainOutcome,
    pub report: EvalReport,
}

/// Preprocess, compute distances, build the graph, train and evaluate (leave-one-out over
/// all trajectories).
pub fn run_in_memory(
    trajs: Vec<Trajectory>,
    config: &PipelineConfig,
) -> Result<PipelineRun, PipelineError> {
    let (_, gridded, _) = preprocess(trajs, 0, config)?;
    let (raw, normalized) = distances(&gridded, config)?;
    let ids: Vec<String> = gridded.iter().map(|g| g.id.clone()).collect();
    let (graph, _) = build_graph(&normalized, ids, config)?;
    let training = gnn::train(&graph, &normalized, &config.effective_train())?;
    let queries = search::held_out_queries(raw.n, config.eval_fraction, config.seed);
    let report = search::evaluate(&training.embeddings, &raw, &queries, config.seed)?;
    Ok(PipelineRun { gridded, raw, normalized, graph, training, report })
}
