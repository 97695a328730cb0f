//! Layered graph-attention network over the multi-scale graph.
//!
//! Layer `k` reads graph layer `k` and the previous layer's embeddings (or the input
//! embeddings when the sequential connection is switched off):
//!
//! ```text
//! z_i      = h_i W_k
//! e_ij     = LeakyReLU_0.2(a_src · z_i + a_dst · z_j) + ln(weight_ij)
//! alpha_ij = softmax_j(e_ij)          over N_k(i) ∪ {i}
//! h'_i     = ReLU(sum_j alpha_ij z_j)
//! ```
//!
//! The per-layer outputs are concatenated and passed through a one-hidden-layer ReLU MLP.
//! Gradients are derived by hand; see [`backward`].

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distance::DistanceMatrix;
use crate::graph::{GraphLayer, MultiScaleGraph};
use crate::search::EmbeddingSet;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum GnnError {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in layer {layer} at edge ({i}, {j})")]
    NonFinite { layer: usize, i: usize, j: usize },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("forward state does not belong to the current model parameters")]
    StaleState,
    #[error("invalid training config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = GnnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(GnnError::Config(format!("unknown optimizer `{other}` (expected sgd or adam)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Full-batch updates per epoch.
    pub steps_per_epoch: usize,
    /// The learning rate is multiplied by `lr_decay` every `lr_step_epochs` epochs.
    pub lr_step_epochs: usize,
    pub lr_decay: f64,
    pub seed: u64,
    /// Width of the input embeddings and of every attention layer.
    pub mid_dim: usize,
    pub mlp_hidden: usize,
    pub out_dim: usize,
    /// Add `ln(edge weight)` to attention scores.
    pub edge_bias: bool,
    /// Feed layer `k`'s output into layer `k + 1`; when off every layer reads the input.
    pub sequential: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            lr: 2e-3,
            optimizer: OptimizerKind::Adam,
            steps_per_epoch: 250,
            lr_step_epochs: 5,
            lr_decay: 0.1,
            seed: 42,
            mid_dim: 256,
            mlp_hidden: 256,
            out_dim: 128,
            edge_bias: true,
            sequential: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GnnError> {
        let bad = |msg: &str| Err(GnnError::Config(msg.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.mid_dim == 0 || self.mlp_hidden == 0 || self.out_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.steps_per_epoch == 0 || self.lr_step_epochs == 0 {
            return bad("steps_per_epoch and lr_step_epochs must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return bad("lr_decay must be positive");
        }
        Ok(())
    }

    /// Step-decayed learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_step_epochs) as i32)
    }
}

/// Architecture of a model; everything needed to rebuild the parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub layer_dims: Vec<usize>,
    pub mlp_hidden: usize,
    pub out_dim: usize,
    pub seed: u64,
    pub edge_bias: bool,
    pub sequential: bool,
}

impl ModelConfig {
    pub fn layers(&self) -> usize {
        self.layer_dims.len()
    }

    /// Width of the input consumed by layer `k` (0-based).
    pub fn layer_input_dim(&self, k: usize) -> usize {
        if k == 0 || !self.sequential {
            self.input_dim
        } else {
            self.layer_dims[k - 1]
        }
    }

    pub fn concat_dim(&self) -> usize {
        self.layer_dims.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `D_in x D_out`.
    pub weight: Array2<f64>,
    /// `[a_src ; a_dst]`, length `2 D_out`.
    pub attn: Array1<f64>,
}

impl LayerParams {
    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn attn_src(&self) -> ArrayView1<'_, f64> {
        self.attn.slice(s![..self.out_dim()])
    }

    fn attn_dst(&self) -> ArrayView1<'_, f64> {
        self.attn.slice(s![self.out_dim()..])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Trainable parameters. Also used to hold gradients of the same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<LayerParams>,
    pub mlp: Mlp,
}

impl Params {
    fn zeros_like(other: &Params) -> Params {
        Params {
            layers: other
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    attn: Array1::zeros(l.attn.raw_dim()),
                })
                .collect(),
            mlp: Mlp {
                w1: Array2::zeros(other.mlp.w1.raw_dim()),
                b1: Array1::zeros(other.mlp.b1.raw_dim()),
                w2: Array2::zeros(other.mlp.w2.raw_dim()),
                b2: Array1::zeros(other.mlp.b2.raw_dim()),
            },
        }
    }

    /// Every tensor as a flat slice, in a fixed order: per layer `(W, a)`, then `W1, b1, W2, b2`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.attn.as_slice().expect("standard layout"));
        }
        let m = &self.mlp;
        for t in [m.w1.as_slice(), m.b1.as_slice(), m.w2.as_slice(), m.b2.as_slice()] {
            out.push(t.expect("standard layout"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.attn.as_slice_mut().expect("standard layout"));
        }
        let m = &mut self.mlp;
        out.push(m.w1.as_slice_mut().expect("standard layout"));
        out.push(m.b1.as_slice_mut().expect("standard layout"));
        out.push(m.w2.as_slice_mut().expect("standard layout"));
        out.push(m.b2.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.shape().to_vec());
            out.push(l.attn.shape().to_vec());
        }
        let m = &self.mlp;
        out.push(m.w1.shape().to_vec());
        out.push(m.b1.shape().to_vec());
        out.push(m.w2.shape().to_vec());
        out.push(m.b2.shape().to_vec());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnModel {
    pub config: ModelConfig,
    pub params: Params,
    /// Bumped on every parameter update; ties forward states to the parameters they saw.
    version: u64,
}

impl GnnModel {
    pub fn from_parts(config: ModelConfig, params: Params) -> Result<Self, GnnError> {
        let m = config.layers();
        if params.layers.len() != m {
            return Err(GnnError::Shape(format!("{} layer tensors for {m} layers", params.layers.len())));
        }
        for (k, l) in params.layers.iter().enumerate() {
            let want = (config.layer_input_dim(k), config.layer_dims[k]);
            if l.weight.dim() != want || l.attn.len() != 2 * want.1 {
                return Err(GnnError::Shape(format!("layer {k} parameters do not match config")));
            }
        }
        let mlp = &params.mlp;
        if mlp.w1.dim() != (config.concat_dim(), config.mlp_hidden)
            || mlp.b1.len() != config.mlp_hidden
            || mlp.w2.dim() != (config.mlp_hidden, config.out_dim)
            || mlp.b2.len() != config.out_dim
        {
            return Err(GnnError::Shape("MLP parameters do not match config".into()));
        }
        Ok(Self { config, params, version: 0 })
    }

    pub fn layers(&self) -> usize {
        self.config.layers()
    }

    fn touch(&mut self) {
        self.version += 1;
    }
}

fn xavier_uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

/// Draws the input embeddings (`N(0, 1/sqrt(D_0))`) and Xavier-uniform parameters from `seed`.
pub fn init_model(graph: &MultiScaleGraph, config: &TrainConfig) -> Result<(GnnModel, Array2<f64>), GnnError> {
    config.validate()?;
    let m = graph.layers.len();
    if m == 0 {
        return Err(GnnError::Shape("graph has no layers".into()));
    }
    let model_config = ModelConfig {
        input_dim: config.mid_dim,
        layer_dims: vec![config.mid_dim; m],
        mlp_hidden: config.mlp_hidden,
        out_dim: config.out_dim,
        seed: config.seed,
        edge_bias: config.edge_bias,
        sequential: config.sequential,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std = 1.0 / (config.mid_dim as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let h0 = Array2::from_shape_simple_fn((graph.n, config.mid_dim), || normal.sample(&mut rng));

    let layers = (0..m)
        .map(|k| {
            let (din, dout) = (model_config.layer_input_dim(k), model_config.layer_dims[k]);
            let weight = xavier_uniform(&mut rng, din, dout, din, dout);
            let attn = xavier_uniform(&mut rng, 1, 2 * dout, 2 * dout, 1).into_shape_with_order(2 * dout).unwrap();
            LayerParams { weight, attn }
        })
        .collect();
    let (cat, hid, out) = (model_config.concat_dim(), config.mlp_hidden, config.out_dim);
    let mlp = Mlp {
        w1: xavier_uniform(&mut rng, cat, hid, cat, hid),
        b1: Array1::zeros(hid),
        w2: xavier_uniform(&mut rng, hid, out, hid, out),
        b2: Array1::zeros(out),
    };
    let model = GnnModel::from_parts(model_config, Params { layers, mlp })?;
    Ok((model, h0))
}

/// Compressed neighbor lists of one graph layer, self-loops included.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub offsets: Vec<usize>,
    pub cols: Vec<usize>,
    /// Additive score bias per entry: `ln(weight)` for edges, 0 for the self-loop.
    pub bias: Vec<f64>,
    /// Position of the mirrored entry `(j, i)` for each entry `(i, j)`.
    transpose: Vec<usize>,
    /// 0-based graph layer this was built from, for error reports.
    pub layer: usize,
}

impl Neighborhood {
    pub fn new(graph_layer: &GraphLayer, layer: usize, edge_bias: bool) -> Self {
        let n = graph_layer.n;
        let mut adj = graph_layer.neighbors();
        for (i, list) in adj.iter_mut().enumerate() {
            let at = list.partition_point(|&(j, _)| j < i);
            list.insert(at, (i, 1.0));
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut bias = Vec::new();
        offsets.push(0);
        for list in &adj {
            for &(j, w) in list {
                cols.push(j);
                bias.push(if edge_bias { w.ln() } else { 0.0 });
            }
            offsets.push(cols.len());
        }
        let mut transpose = vec![0; cols.len()];
        for i in 0..n {
            for e in offsets[i]..offsets[i + 1] {
                let j = cols[e];
                let row = &cols[offsets[j]..offsets[j + 1]];
                transpose[e] = offsets[j] + row.binary_search(&i).expect("symmetric adjacency");
            }
        }
        Self { offsets, cols, bias, transpose, layer }
    }

    pub fn nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn entries(&self) -> usize {
        self.cols.len()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

pub fn neighborhoods(graph: &MultiScaleGraph, edge_bias: bool) -> Vec<Neighborhood> {
    graph.layers.iter().enumerate().map(|(k, l)| Neighborhood::new(l, k, edge_bias)).collect()
}

/// One value per [`Neighborhood`] entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseScores {
    pub offsets: Vec<usize>,
    pub cols: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseScores {
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.cols[r.clone()], &self.values[r])
    }
}

#[inline]
fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

fn check_finite_entries(nb: &Neighborhood, values: &[f64]) -> Result<(), GnnError> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(e) => {
            let i = nb.offsets.partition_point(|&o| o <= e) - 1;
            Err(GnnError::NonFinite { layer: nb.layer, i, j: nb.cols[e] })
        }
    }
}

/// Pre-activation `a_src · z_i + a_dst · z_j` for every entry.
fn pre_scores(nb: &Neighborhood, params: &LayerParams, z: &Array2<f64>) -> Vec<f64> {
    let src = z.dot(&params.attn_src());
    let dst = z.dot(&params.attn_dst());
    let mut pre = vec![0.0; nb.entries()];
    for i in 0..nb.nodes() {
        for e in nb.range(i) {
            pre[e] = src[i] + dst[nb.cols[e]];
        }
    }
    pre
}

/// Unnormalized attention scores `e_ij` of one layer, given that layer's input embeddings.
pub fn attention_scores(
    nb: &Neighborhood,
    params: &LayerParams,
    h_prev: ArrayView2<'_, f64>,
) -> Result<SparseScores, GnnError> {
    if h_prev.ncols() != params.weight.nrows() || h_prev.nrows() != nb.nodes() {
        return Err(GnnError::Shape(format!(
            "input {:?} vs weight {:?} over {} nodes",
            h_prev.dim(),
            params.weight.dim(),
            nb.nodes()
        )));
    }
    let z = h_prev.dot(&params.weight);
    let pre = pre_scores(nb, params, &z);
    let values: Vec<f64> = pre.iter().zip(&nb.bias).map(|(&p, &b)| leaky(p) + b).collect();
    check_finite_entries(nb, &values)?;
    Ok(SparseScores { offsets: nb.offsets.clone(), cols: nb.cols.clone(), values })
}

/// Softmax of the scores within each node's neighborhood, with max subtraction.
pub fn attention_normalize(scores: &SparseScores) -> SparseScores {
    let mut values = vec![0.0; scores.values.len()];
    softmax_rows(&scores.offsets, &scores.values, &mut values);
    SparseScores { offsets: scores.offsets.clone(), cols: scores.cols.clone(), values }
}

fn softmax_rows(offsets: &[usize], scores: &[f64], out: &mut [f64]) {
    for w in offsets.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let max = scores[lo..hi].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for e in lo..hi {
            out[e] = (scores[e] - max).exp();
            total += out[e];
        }
        for v in &mut out[lo..hi] {
            *v /= total;
        }
    }
}

/// Activations of one attention layer kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub z: Array2<f64>,
    pub pre: Vec<f64>,
    pub alpha: Vec<f64>,
    pub agg: Array2<f64>,
    pub out: Array2<f64>,
}

/// Everything the forward pass computed.
#[derive(Debug, Clone)]
pub struct EmbeddingState {
    pub input: Array2<f64>,
    pub layers: Vec<LayerState>,
    pub concat: Array2<f64>,
    pub hidden_pre: Array2<f64>,
    pub hidden: Array2<f64>,
    pub output: Array2<f64>,
    version: u64,
}

impl EmbeddingState {
    /// `H^k` for `k` in `0..=m`.
    pub fn layer_output(&self, k: usize) -> &Array2<f64> {
        if k == 0 {
            &self.input
        } else {
            &self.layers[k - 1].out
        }
    }
}

fn layer_forward(
    nb: &Neighborhood,
    params: &LayerParams,
    input: &Array2<f64>,
) -> Result<LayerState, GnnError> {
    let z = input.dot(&params.weight);
    let pre = pre_scores(nb, params, &z);
    let scores: Vec<f64> = pre.iter().zip(&nb.bias).map(|(&p, &b)| leaky(p) + b).collect();
    check_finite_entries(nb, &scores)?;
    let mut alpha = vec![0.0; nb.entries()];
    softmax_rows(&nb.offsets, &scores, &mut alpha);

    let mut agg = Array2::<f64>::zeros(z.raw_dim());
    agg.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            for e in nb.range(i) {
                row.scaled_add(alpha[e], &z.row(nb.cols[e]));
            }
        });
    let out = agg.mapv(|v| v.max(0.0));
    Ok(LayerState { z, pre, alpha, agg, out })
}

pub fn forward(model: &GnnModel, nbs: &[Neighborhood], input: &Array2<f64>) -> Result<EmbeddingState, GnnError> {
    let cfg = &model.config;
    if nbs.len() != cfg.layers() {
        return Err(GnnError::Shape(format!("model has {} layers, graph has {}", cfg.layers(), nbs.len())));
    }
    if input.ncols() != cfg.input_dim {
        return Err(GnnError::Shape(format!("input width {} != {}", input.ncols(), cfg.input_dim)));
    }
    if let Some(nb) = nbs.iter().find(|nb| nb.nodes() != input.nrows()) {
        return Err(GnnError::Shape(format!("{} input rows for {} nodes", input.nrows(), nb.nodes())));
    }

    let mut layers: Vec<LayerState> = Vec::with_capacity(nbs.len());
    for (nb, params) in nbs.iter().zip(&model.params.layers) {
        let source = match layers.last() {
            Some(prev) if cfg.sequential => &prev.out,
            _ => input,
        };
        let state = layer_forward(nb, params, source)?;
        layers.push(state);
    }

    let views: Vec<ArrayView2<f64>> = layers.iter().map(|l| l.out.view()).collect();
    let concat = concatenate(Axis(1), &views).expect("equal row counts");
    let mlp = &model.params.mlp;
    let hidden_pre = concat.dot(&mlp.w1) + &mlp.b1;
    let hidden = hidden_pre.mapv(|v| v.max(0.0));
    let output = hidden.dot(&mlp.w2) + &mlp.b2;
    Ok(EmbeddingState {
        input: input.clone(),
        layers,
        concat,
        hidden_pre,
        hidden,
        output,
        version: model.version,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Array2<f64>,
    /// The embeddings (or the target) have zero norm; loss is pinned to 1 with zero gradient.
    pub degenerate: bool,
}

/// Cosine loss between the off-diagonal entries of `H Hᵀ` and the similarity target
/// `1 - d̃` (symmetrized), both flattened.
pub fn cosine_loss(h: &Array2<f64>, d: &DistanceMatrix) -> Result<LossOutput, GnnError> {
    let n = h.nrows();
    if d.n != n {
        return Err(GnnError::Shape(format!("{n} embeddings vs {}-row distance matrix", d.n)));
    }
    let gram = h.dot(&h.t());
    let mut target = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                target[[i, j]] = 1.0 - d.symmetric(i, j);
            }
        }
    }
    let mut inner = 0.0;
    let mut s_sq = 0.0;
    let mut t_sq = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let (s, t) = (gram[[i, j]], target[[i, j]]);
                inner += s * t;
                s_sq += s * s;
                t_sq += t * t;
            }
        }
    }
    let (s_norm, t_norm) = (s_sq.sqrt(), t_sq.sqrt());
    if s_norm == 0.0 || t_norm == 0.0 {
        return Ok(LossOutput { value: 1.0, grad: Array2::zeros(h.raw_dim()), degenerate: true });
    }
    let cos = inner / (s_norm * t_norm);
    // dL/dS_ij = -(T_ij / (|S||T|) - cos * S_ij / |S|^2) off the diagonal.
    let mut dgram = Array2::<f64>::zeros((n, n));
    Zip::indexed(&mut dgram).and(&gram).and(&target).for_each(|(i, j), g, &s, &t| {
        if i != j {
            *g = -(t / (s_norm * t_norm) - cos * s / s_sq);
        }
    });
    // S = H Hᵀ with symmetric dS gives dH = 2 dS H.
    let grad = dgram.dot(h) * 2.0;
    Ok(LossOutput { value: 1.0 - cos, grad, degenerate: false })
}

fn layer_backward(
    nb: &Neighborhood,
    params: &LayerParams,
    input: &Array2<f64>,
    state: &LayerState,
    dout: &Array2<f64>,
    grads: &mut LayerParams,
    want_input_grad: bool,
) -> Option<Array2<f64>> {
    let dim = params.out_dim();
    let dagg = Zip::from(dout).and(&state.agg).map_collect(|&g, &a| if a > 0.0 { g } else { 0.0 });

    // dalpha_ij = dagg_i · z_j, then through the softmax and the LeakyReLU.
    let n = nb.nodes();
    let mut dpre = vec![0.0; nb.entries()];
    let per_row: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let r = nb.range(i);
            let di = dagg.row(i);
            let dalpha: Vec<f64> = r.clone().map(|e| di.dot(&state.z.row(nb.cols[e]))).collect();
            let weighted: f64 = r.clone().zip(&dalpha).map(|(e, &da)| state.alpha[e] * da).sum();
            r.zip(&dalpha)
                .map(|(e, &da)| state.alpha[e] * (da - weighted) * leaky_grad(state.pre[e]))
                .collect()
        })
        .collect();
    for (i, row) in per_row.into_iter().enumerate() {
        dpre[nb.range(i)].copy_from_slice(&row);
    }

    let mut dsrc = Array1::<f64>::zeros(n);
    let mut ddst = Array1::<f64>::zeros(n);
    for i in 0..n {
        for e in nb.range(i) {
            dsrc[i] += dpre[e];
            ddst[nb.cols[e]] += dpre[e];
        }
    }

    // dz_j = sum_i alpha_ij dagg_i (gathered through the mirrored entry) + score terms.
    let mut dz = Array2::<f64>::zeros(state.z.raw_dim());
    dz.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(j, mut row)| {
            for e in nb.range(j) {
                let i = nb.cols[e];
                row.scaled_add(state.alpha[nb.transpose[e]], &dagg.row(i));
            }
        });
    let a_src = params.attn_src();
    let a_dst = params.attn_dst();
    for j in 0..n {
        let mut row = dz.row_mut(j);
        row.scaled_add(dsrc[j], &a_src);
        row.scaled_add(ddst[j], &a_dst);
    }

    let da_src = state.z.t().dot(&dsrc);
    let da_dst = state.z.t().dot(&ddst);
    grads.attn.slice_mut(s![..dim]).assign(&da_src);
    grads.attn.slice_mut(s![dim..]).assign(&da_dst);
    grads.weight.assign(&input.t().dot(&dz));

    want_input_grad.then(|| dz.dot(&params.weight.t()))
}

/// Reverse pass: gradients of every parameter given `dL/dH_final`.
pub fn backward(
    model: &GnnModel,
    nbs: &[Neighborhood],
    state: &EmbeddingState,
    grad_output: &Array2<f64>,
) -> Result<Params, GnnError> {
    if state.version != model.version || state.layers.len() != model.layers() {
        return Err(GnnError::StaleState);
    }
    if grad_output.dim() != state.output.dim() {
        return Err(GnnError::Shape(format!(
            "gradient {:?} vs output {:?}",
            grad_output.dim(),
            state.output.dim()
        )));
    }
    let cfg = &model.config;
    let mlp = &model.params.mlp;
    let mut grads = Params::zeros_like(&model.params);

    grads.mlp.w2 = state.hidden.t().dot(grad_output);
    grads.mlp.b2 = grad_output.sum_axis(Axis(0));
    let dhidden = grad_output.dot(&mlp.w2.t());
    let dhidden_pre = Zip::from(&dhidden)
        .and(&state.hidden_pre)
        .map_collect(|&g, &p| if p > 0.0 { g } else { 0.0 });
    grads.mlp.w1 = state.concat.t().dot(&dhidden_pre);
    grads.mlp.b1 = dhidden_pre.sum_axis(Axis(0));
    let dconcat = dhidden_pre.dot(&mlp.w1.t());

    let mut offsets = Vec::with_capacity(cfg.layers());
    let mut col = 0;
    for &d in &cfg.layer_dims {
        offsets.push(col..col + d);
        col += d;
    }

    let mut carried: Option<Array2<f64>> = None;
    for k in (0..cfg.layers()).rev() {
        let mut dout = dconcat.slice(s![.., offsets[k].clone()]).to_owned();
        if let Some(c) = carried.take() {
            dout += &c;
        }
        let input = if cfg.sequential && k > 0 { &state.layers[k - 1].out } else { &state.input };
        let want_input = cfg.sequential && k > 0;
        carried = layer_backward(
            &nbs[k],
            &model.params.layers[k],
            input,
            &state.layers[k],
            &dout,
            &mut grads.layers[k],
            want_input,
        );
    }
    Ok(grads)
}

/// Plain SGD or Adam (β = (0.9, 0.999), ε = 1e-8) over the flattened parameter tensors.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64, t: i32, m: Vec<Vec<f64>>, v: Vec<Vec<f64>> },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &Params) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::Adam => {
                let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
                Self::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
            }
        }
    }

    pub fn step(&mut self, model: &mut GnnModel, grads: &Params, lr: f64) {
        let grads = grads.tensors();
        let mut params = model.params.tensors_mut();
        match self {
            Self::Sgd => {
                for (p, g) in params.iter_mut().zip(&grads) {
                    for (w, &dw) in p.iter_mut().zip(g.iter()) {
                        *w -= lr * dw;
                    }
                }
            }
            Self::Adam { beta1, beta2, eps, t, m, v } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for (((p, g), m), v) in params.iter_mut().zip(&grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    for (((w, &dw), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = *beta1 * *mi + (1.0 - *beta1) * dw;
                        *vi = *beta2 * *vi + (1.0 - *beta2) * dw * dw;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + *eps);
                    }
                }
            }
        }
        model.touch();
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GnnModel,
    pub embeddings: EmbeddingSet,
    /// Mean loss over each epoch's steps.
    pub loss_history: Vec<f64>,
}

/// Full-batch training from a freshly initialized model.
pub fn train(graph: &MultiScaleGraph, d: &DistanceMatrix, config: &TrainConfig) -> Result<TrainOutcome, GnnError> {
    let (model, input) = init_model(graph, config)?;
    train_from(model, &input, graph, d, config)
}

pub fn train_from(
    mut model: GnnModel,
    input: &Array2<f64>,
    graph: &MultiScaleGraph,
    d: &DistanceMatrix,
    config: &TrainConfig,
) -> Result<TrainOutcome, GnnError> {
    config.validate()?;
    if d.n != graph.n {
        return Err(GnnError::Shape(format!("graph has {} nodes, matrix has {}", graph.n, d.n)));
    }
    let nbs = neighborhoods(graph, model.config.edge_bias);
    let mut optimizer = Optimizer::new(config.optimizer, &model.params);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut total = 0.0;
        for _ in 0..config.steps_per_epoch {
            let state = forward(&model, &nbs, input)?;
            let loss = cosine_loss(&state.output, d)?;
            if !loss.value.is_finite() {
                return Err(GnnError::NonFiniteLoss { epoch });
            }
            total += loss.value;
            let grads = backward(&model, &nbs, &state, &loss.grad)?;
            optimizer.step(&mut model, &grads, lr);
        }
        let mean = total / config.steps_per_epoch as f64;
        log::debug!("epoch {epoch}: loss {mean:.6} (lr {lr:e})");
        history.push(mean);
    }
    let state = forward(&model, &nbs, input)?;
    let embeddings = EmbeddingSet::new(
        graph.node_ids.clone(),
        model.config.out_dim,
        state.output.iter().copied().collect(),
    )
    .map_err(|e| GnnError::Shape(e.to_string()))?;
    Ok(TrainOutcome { model, embeddings, loss_history: history })
}
