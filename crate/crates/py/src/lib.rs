//! Python bindings: `import trajsim_py`.
//!
//! Matrices, graphs, models and embedding sets are opaque handles that can be saved to and
//! loaded from the same binary files the command line tool writes.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use trajsim::distance::{self, DistanceError, DistanceKind, DistanceMatrix, RawDistanceMatrix};
use trajsim::gnn::{self, GnnError, GnnModel};
use trajsim::graph::{self, MultiScaleGraph};
use trajsim::ingest::{self, DatasetFormat, IngestError, RawPoint};
use trajsim::io::{self, FormatError};
use trajsim::pipeline::{self, PipelineConfig, PipelineError};
use trajsim::search::{self, EmbeddingSet, SearchError};
use trajsim::synthetic::{self, ClusterSpec};
use trajsim::Point;

/// Python exception class for each failure category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Category {
    Value,
    Numeric,
    Os,
}

trait Categorize: std::fmt::Display {
    fn category(&self) -> Category;
}

impl Categorize for IngestError {
    fn category(&self) -> Category {
        match self {
            IngestError::Io { .. } => Category::Os,
            _ => Category::Value,
        }
    }
}

impl Categorize for DistanceError {
    fn category(&self) -> Category {
        match self {
            DistanceError::NonFinite(..) => Category::Numeric,
            _ => Category::Value,
        }
    }
}

impl Categorize for GnnError {
    fn category(&self) -> Category {
        match self {
            GnnError::NonFinite { .. } | GnnError::NonFiniteLoss { .. } => Category::Numeric,
            _ => Category::Value,
        }
    }
}

impl Categorize for SearchError {
    fn category(&self) -> Category {
        match self {
            SearchError::NonFinite(_) => Category::Numeric,
            _ => Category::Value,
        }
    }
}

impl Categorize for FormatError {
    fn category(&self) -> Category {
        match self {
            FormatError::Io { .. } => Category::Os,
            _ => Category::Value,
        }
    }
}

impl Categorize for graph::GraphError {
    fn category(&self) -> Category {
        Category::Value
    }
}

impl Categorize for PipelineError {
    fn category(&self) -> Category {
        match self {
            PipelineError::Ingest(e) => e.category(),
            PipelineError::Distance(e) => e.category(),
            PipelineError::Graph(e) => e.category(),
            PipelineError::Gnn(e) => e.category(),
            PipelineError::Search(e) => e.category(),
            PipelineError::NothingLeft(_) => Category::Value,
        }
    }
}

fn py_err<E: Categorize>(e: E) -> PyErr {
    let msg = e.to_string();
    match e.category() {
        Category::Value => PyValueError::new_err(msg),
        Category::Numeric => PyArithmeticError::new_err(msg),
        Category::Os => PyOSError::new_err(msg),
    }
}

fn to_points(seq: Vec<(f64, f64)>) -> Vec<Point> {
    seq.into_iter().map(|(x, y)| [x, y]).collect()
}

/// Pipeline configuration. Construct from a JSON object (missing keys take defaults) and
/// adjust through the attributes.
#[pyclass(name = "Config", module = "trajsim_py", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => PipelineConfig::default(),
        };
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }
    #[getter]
    fn layers(&self) -> usize {
        self.inner.layers
    }
    #[setter]
    fn set_layers(&mut self, v: usize) {
        self.inner.layers = v;
    }
    #[getter]
    fn min_points(&self) -> usize {
        self.inner.min_points
    }
    #[setter]
    fn set_min_points(&mut self, v: usize) {
        self.inner.min_points = v;
    }
    #[getter]
    fn distance(&self) -> String {
        self.inner.distance.to_string()
    }
    #[setter]
    fn set_distance(&mut self, v: &str) -> PyResult<()> {
        self.inner.distance = v.parse().map_err(py_err::<DistanceError>)?;
        Ok(())
    }
    #[getter]
    fn single_scale(&self) -> bool {
        self.inner.single_scale
    }
    #[setter]
    fn set_single_scale(&mut self, v: bool) {
        self.inner.single_scale = v;
    }
    #[getter]
    fn no_sequential_connection(&self) -> bool {
        self.inner.no_sequential_connection
    }
    #[setter]
    fn set_no_sequential_connection(&mut self, v: bool) {
        self.inner.no_sequential_connection = v;
    }
    #[getter]
    fn epochs(&self) -> usize {
        self.inner.train.epochs
    }
    #[setter]
    fn set_epochs(&mut self, v: usize) {
        self.inner.train.epochs = v;
    }
    #[getter]
    fn lr(&self) -> f64 {
        self.inner.train.lr
    }
    #[setter]
    fn set_lr(&mut self, v: f64) {
        self.inner.train.lr = v;
    }
    #[getter]
    fn steps_per_epoch(&self) -> usize {
        self.inner.train.steps_per_epoch
    }
    #[setter]
    fn set_steps_per_epoch(&mut self, v: usize) {
        self.inner.train.steps_per_epoch = v;
    }

    /// Sets the input, attention and MLP hidden widths together, plus the output width.
    fn set_dims(&mut self, hidden: usize, out: usize) {
        self.inner.train.mid_dim = hidden;
        self.inner.train.mlp_hidden = hidden;
        self.inner.train.out_dim = out;
    }

    fn __repr__(&self) -> String {
        format!("Config({})", self.to_json())
    }
}

#[pyclass(name = "Trajectory", module = "trajsim_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyTrajectory {
    #[pyo3(get)]
    id: String,
    /// `(lon, lat, t)` with `t` possibly `None`.
    #[pyo3(get)]
    points: Vec<(f64, f64, Option<f64>)>,
}

#[pymethods]
impl PyTrajectory {
    #[new]
    fn new(id: String, points: Vec<(f64, f64, Option<f64>)>) -> Self {
        Self { id, points }
    }

    fn __len__(&self) -> usize {
        self.points.len()
    }

    fn __repr__(&self) -> String {
        format!("Trajectory({:?}, {} points)", self.id, self.points.len())
    }
}

impl PyTrajectory {
    fn from_core(t: ingest::Trajectory) -> Self {
        Self { id: t.id, points: t.points.into_iter().map(|p| (p.lon, p.lat, p.t)).collect() }
    }

    fn to_core(&self) -> ingest::Trajectory {
        let points = self.points.iter().map(|&(lon, lat, t)| RawPoint { lon, lat, t }).collect();
        ingest::Trajectory::new(self.id.clone(), points)
    }
}

/// Pairwise raw distances in meters.
#[pyclass(name = "RawDistances", module = "trajsim_py", frozen)]
struct PyRawDistances {
    inner: RawDistanceMatrix,
    scale: f64,
}

#[pymethods]
impl PyRawDistances {
    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }
    #[getter]
    fn kind(&self) -> String {
        self.inner.kind.to_string()
    }
    fn get(&self, i: usize, j: usize) -> PyResult<f64> {
        check_index(self.inner.n, i, j)?;
        Ok(self.inner.get(i, j))
    }
    fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.inner.n).map(|i| self.inner.row(i).to_vec()).collect()
    }
    /// Row-softmax normalization with the median off-diagonal distance as the scale.
    fn normalize(&self) -> PyResult<PyDistances> {
        Ok(PyDistances { inner: distance::normalize_distances(&self.inner).map_err(py_err)? })
    }
    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_raw_matrix(&path, &self.inner, self.scale).map_err(py_err)
    }
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = io::read_raw_matrix(&path).map_err(py_err)?;
        let scale = distance::scale_divisor(&inner);
        Ok(Self { inner, scale })
    }
}

/// Normalized distances in `[0, 1]`; row-stochastic after `1 - d`, not symmetric.
#[pyclass(name = "Distances", module = "trajsim_py", frozen)]
struct PyDistances {
    inner: DistanceMatrix,
}

#[pymethods]
impl PyDistances {
    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }
    #[getter]
    fn scale(&self) -> f64 {
        self.inner.scale
    }
    fn get(&self, i: usize, j: usize) -> PyResult<f64> {
        check_index(self.inner.n, i, j)?;
        Ok(self.inner.get(i, j))
    }
    /// `(d_ij + d_ji) / 2`.
    fn symmetric(&self, i: usize, j: usize) -> PyResult<f64> {
        check_index(self.inner.n, i, j)?;
        Ok(self.inner.symmetric(i, j))
    }
    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner.values.chunks(self.inner.n.max(1)).map(<[f64]>::to_vec).collect()
    }
    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_distance_matrix(&path, &self.inner).map_err(py_err)
    }
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: io::read_distance_matrix(&path).map_err(py_err)? })
    }
}

fn check_index(n: usize, i: usize, j: usize) -> PyResult<()> {
    if i >= n || j >= n {
        return Err(pyo3::exceptions::PyIndexError::new_err(format!("({i}, {j}) out of range for n = {n}")));
    }
    Ok(())
}

#[pyclass(name = "Graph", module = "trajsim_py", frozen)]
struct PyGraph {
    inner: MultiScaleGraph,
}

#[pymethods]
impl PyGraph {
    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }
    #[getter]
    fn thresholds(&self) -> Vec<f64> {
        self.inner.thresholds.values().to_vec()
    }
    #[getter]
    fn node_ids(&self) -> Vec<String> {
        self.inner.node_ids.clone()
    }
    fn edge_counts(&self) -> Vec<usize> {
        self.inner.edge_counts()
    }
    /// Edges `(i, j, weight)` of layer `k` (0-based), each listed once with `i < j`.
    fn edges(&self, k: usize) -> PyResult<Vec<(u32, u32, f64)>> {
        let layer = self
            .inner
            .layers
            .get(k)
            .ok_or_else(|| pyo3::exceptions::PyIndexError::new_err(format!("no layer {k}")))?;
        Ok(layer.edges.iter().map(|e| (e.i, e.j, e.w)).collect())
    }
    /// `(pairs_checked, violations)` of the neighbor-pair coverage check.
    fn coverage(&self, d: &PyDistances) -> (u64, u64) {
        let r = graph::coverage_check(&self.inner, &d.inner);
        (r.pairs_checked, r.violations)
    }
    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_graph(&path, &self.inner).map_err(py_err)
    }
    #[staticmethod]
    fn load(path: PathBuf, node_ids: Vec<String>) -> PyResult<Self> {
        Ok(Self { inner: io::read_graph(&path, node_ids).map_err(py_err)? })
    }
}

#[pyclass(name = "Embeddings", module = "trajsim_py", frozen)]
struct PyEmbeddings {
    inner: EmbeddingSet,
}

#[pymethods]
impl PyEmbeddings {
    #[new]
    fn new(ids: Vec<String>, vectors: Vec<Vec<f64>>) -> PyResult<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(PyValueError::new_err("all vectors must have the same length"));
        }
        let flat = vectors.into_iter().flatten().collect();
        Ok(Self { inner: EmbeddingSet::new(ids, dim, flat).map_err(py_err)? })
    }
    fn __len__(&self) -> usize {
        self.inner.len()
    }
    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.ids().to_vec()
    }
    fn vector(&self, id: &str) -> PyResult<Vec<f64>> {
        let i = self.inner.position(id).ok_or_else(|| py_err(SearchError::UnknownId(id.to_string())))?;
        Ok(self.inner.row(i).to_vec())
    }
    /// The `k` nearest other trajectories by Euclidean distance, ties broken by ID.
    fn search(&self, query_id: &str, k: usize) -> PyResult<Vec<String>> {
        search::knn_search(&self.inner, query_id, k).map_err(py_err)
    }
    /// HR@10, HR@50 and R10@50 against the raw-distance ground truth, over every row.
    #[pyo3(signature = (raw, seed = 42))]
    fn evaluate<'py>(&self, py: Python<'py>, raw: &PyRawDistances, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let queries: Vec<usize> = (0..raw.inner.n).collect();
        let r = search::evaluate(&self.inner, &raw.inner, &queries, seed).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("metric_distance", r.metric_distance.to_string())?;
        out.set_item("HR@10", r.hr10)?;
        out.set_item("HR@50", r.hr50)?;
        out.set_item("R10@50", r.r10_at_50)?;
        out.set_item("n", r.n)?;
        out.set_item("seed", r.seed)?;
        Ok(out)
    }
    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_embeddings(&path, &self.inner).map_err(py_err)
    }
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: io::read_embeddings(&path).map_err(py_err)? })
    }
}

/// A trained network with its input embeddings and per-epoch loss.
#[pyclass(name = "Model", module = "trajsim_py", frozen)]
struct PyModel {
    model: GnnModel,
    input: ndarray::Array2<f64>,
    #[pyo3(get)]
    loss_history: Vec<f64>,
    embeddings: EmbeddingSet,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn parameter_count(&self) -> usize {
        self.model.params.parameter_count()
    }
    fn embeddings(&self) -> PyEmbeddings {
        PyEmbeddings { inner: self.embeddings.clone() }
    }
    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_model(&path, &self.model, &self.input).map_err(py_err)
    }
}

#[pyfunction]
fn discrete_frechet(a: Vec<(f64, f64)>, b: Vec<(f64, f64)>) -> PyResult<f64> {
    distance::discrete_frechet(&to_points(a), &to_points(b)).map_err(py_err)
}

#[pyfunction]
fn hausdorff(a: Vec<(f64, f64)>, b: Vec<(f64, f64)>) -> PyResult<f64> {
    distance::hausdorff(&to_points(a), &to_points(b)).map_err(py_err)
}

/// Reads `porto_csv`, `geolife_plt` (file or directory) or `canonical_jsonl`.
#[pyfunction]
#[pyo3(signature = (path, format = "canonical_jsonl"))]
fn parse_dataset(path: PathBuf, format: &str) -> PyResult<Vec<PyTrajectory>> {
    let format: DatasetFormat = format.parse().map_err(py_err::<IngestError>)?;
    let parsed = ingest::parse_dataset(&path, format).map_err(py_err)?;
    Ok(parsed.trajectories.into_iter().map(PyTrajectory::from_core).collect())
}

#[pyfunction]
fn write_canonical(path: PathBuf, trajectories: Vec<PyTrajectory>) -> PyResult<()> {
    let trajs: Vec<_> = trajectories.iter().map(PyTrajectory::to_core).collect();
    ingest::write_canonical_jsonl(&path, &trajs).map_err(py_err)
}

/// Length filter and grid snapping; returns `(id, centroids)` pairs in meters.
/// `(id, cell-centroid sequence)` for one gridded trajectory.
type GriddedPair = (String, Vec<(f64, f64)>);

#[pyfunction]
#[pyo3(signature = (trajectories, config = None))]
fn preprocess(trajectories: Vec<PyTrajectory>, config: Option<&PyConfig>) -> PyResult<Vec<GriddedPair>> {
    let config = config.map(|c| c.inner.clone()).unwrap_or_default();
    let trajs = trajectories.iter().map(PyTrajectory::to_core).collect();
    let (_, gridded, _) = pipeline::preprocess(trajs, 0, &config).map_err(py_err)?;
    Ok(gridded.into_iter().map(|g| (g.id, g.centroids.into_iter().map(|[x, y]| (x, y)).collect())).collect())
}

#[pyfunction]
#[pyo3(signature = (sequences, kind = "frechet", workers = 0))]
fn distance_matrix(py: Python<'_>, sequences: Vec<Vec<(f64, f64)>>, kind: &str, workers: usize) -> PyResult<PyRawDistances> {
    let kind: DistanceKind = kind.parse().map_err(py_err::<DistanceError>)?;
    let seqs: Vec<Vec<Point>> = sequences.into_iter().map(to_points).collect();
    let inner = py.detach(|| distance::raw_distance_matrix(&seqs, kind, workers)).map_err(py_err)?;
    let scale = distance::scale_divisor(&inner);
    Ok(PyRawDistances { inner, scale })
}

#[pyfunction]
#[pyo3(signature = (d, node_ids, config = None))]
fn build_graph(d: &PyDistances, node_ids: Vec<String>, config: Option<&PyConfig>) -> PyResult<PyGraph> {
    let config = config.map(|c| c.inner.clone()).unwrap_or_default();
    let (inner, _) = pipeline::build_graph(&d.inner, node_ids, &config).map_err(py_err)?;
    Ok(PyGraph { inner })
}

#[pyfunction]
#[pyo3(signature = (graph, d, config = None))]
fn train(py: Python<'_>, graph: &PyGraph, d: &PyDistances, config: Option<&PyConfig>) -> PyResult<PyModel> {
    let config = config.map(|c| c.inner.clone()).unwrap_or_default().effective_train();
    py.detach(|| {
        let (model, input) = gnn::init_model(&graph.inner, &config)?;
        let out = gnn::train_from(model, &input, &graph.inner, &d.inner, &config)?;
        Ok(PyModel { model: out.model, input, loss_history: out.loss_history, embeddings: out.embeddings })
    })
    .map_err(py_err::<GnnError>)
}

/// Seeded clustered trajectories: `clusters` routes `spacing_m` apart, `per_cluster` noisy
/// copies of each.
#[pyfunction]
#[pyo3(signature = (seed = 7, clusters = 3, per_cluster = 100, points = 60, spacing_m = 5000.0, offset_std_m = 300.0))]
fn synthetic_clusters(
    seed: u64,
    clusters: usize,
    per_cluster: usize,
    points: usize,
    spacing_m: f64,
    offset_std_m: f64,
) -> Vec<PyTrajectory> {
    let spec = ClusterSpec { clusters, per_cluster, points, spacing_m, offset_std_m, ..ClusterSpec::default() };
    synthetic::clustered_trajectories(&spec, seed).into_iter().map(PyTrajectory::from_core).collect()
}

#[pymodule]
pub fn trajsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyRawDistances>()?;
    m.add_class::<PyDistances>()?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyEmbeddings>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(discrete_frechet, m)?)?;
    m.add_function(wrap_pyfunction!(hausdorff, m)?)?;
    m.add_function(wrap_pyfunction!(parse_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(write_canonical, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(distance_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(build_graph, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_clusters, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_categories() {
        assert_eq!(GnnError::NonFiniteLoss { epoch: 1 }.category(), Category::Numeric);
        assert_eq!(DistanceError::TooFew(1).category(), Category::Value);
        let io = FormatError::Io { path: "x".into(), source: std::io::ErrorKind::NotFound.into() };
        assert_eq!(io.category(), Category::Os);
        assert_eq!(PipelineError::Gnn(GnnError::StaleState).category(), Category::Value);
    }

    #[test]
    fn trajectory_round_trip() {
        let t = PyTrajectory::new("a".into(), vec![(1.0, 2.0, None), (1.5, 2.5, Some(30.0))]);
        let back = PyTrajectory::from_core(t.to_core());
        assert_eq!(back.id, "a");
        assert_eq!(back.points, t.points);
    }
}
