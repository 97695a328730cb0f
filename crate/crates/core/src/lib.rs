//! Trajectory similarity search.
//!
//! The pipeline runs in stages, each backed by one module:
//!
//! * [`ingest`]: parse raw GPS files, drop short trajectories, snap points to a metric grid.
//! * [`distance`]: pairwise discrete Fréchet / Hausdorff distances and their row-softmax
//!   normalization.
//! * [`graph`]: the multi-scale similarity graph, one layer per doubling distance band.
//! * [`gnn`]: the layered attention network, its hand-written backward pass and the
//!   training loop.
//! * [`search`]: exact top-K retrieval over embeddings and the hit-ratio / recall metrics.
//! * [`io`]: the binary on-disk formats shared by the command line tool and the bindings.

pub mod distance;
pub mod gnn;
pub mod graph;
pub mod ingest;
pub mod io;
pub mod pipeline;
pub mod search;
pub mod synthetic;

pub use distance::{DistanceKind, DistanceMatrix, RawDistanceMatrix};
pub use gnn::{GnnModel, TrainConfig};
pub use graph::{MultiScaleGraph, Thresholds};
pub use ingest::{GridSpec, GriddedTrajectory, RawPoint, Trajectory};
pub use search::EmbeddingSet;

/// A point in the local metric frame, `[east, north]` in meters.
pub type Point = [f64; 2];
