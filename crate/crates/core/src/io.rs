//! Little-endian binary artifacts.
//!
//! | file | magic      | body |
//! |------|------------|------|
//! | TSM1 | `TSMATRX1` | u32 n, u8 kind, u8 normalized, f64 scale, n·n f64 row-major |
//! | TSG1 | `TSGRAPH1` | u32 n, u32 m, (m+1) f64 thresholds, per layer: u64 count, (u32 i, u32 j, f64 w)… |
//! | TSN1 | `TSNMODL1` | model config block, then shape-prefixed f64 tensors |
//! | TSE1 | `TSEMBED1` | u32 n, u32 D, n length-prefixed UTF-8 IDs, n·D f64 row-major |

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::distance::{DistanceKind, DistanceMatrix, RawDistanceMatrix};
use crate::gnn::{GnnModel, LayerParams, Mlp, ModelConfig, Params};
use crate::graph::{Edge, GraphLayer, MultiScaleGraph, Thresholds};
use crate::search::EmbeddingSet;

pub const MATRIX_MAGIC: &[u8; 8] = b"TSMATRX1";
pub const GRAPH_MAGIC: &[u8; 8] = b"TSGRAPH1";
pub const MODEL_MAGIC: &[u8; 8] = b"TSNMODL1";
pub const EMBED_MAGIC: &[u8; 8] = b"TSEMBED1";

const ACTIVATION_RELU: u8 = 0;
const FLAG_EDGE_BIAS: u8 = 1;
const FLAG_SEQUENTIAL: u8 = 2;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: String },
    #[error("file ends early")]
    Truncated,
    #[error("invalid contents: {0}")]
    Invalid(String),
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("value fits in u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.0.reserve(vs.len() * 8);
        for &v in vs {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(FormatError::Truncated)?;
        self.pos = end;
        Ok(out)
    }
    fn magic(&mut self, expected: &[u8; 8]) -> Result<(), FormatError> {
        if self.take(8)? != expected {
            return Err(FormatError::BadMagic { expected: String::from_utf8_lossy(expected).into() });
        }
        Ok(())
    }
    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = self.take(n.checked_mul(8).ok_or(FormatError::Truncated)?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::Invalid(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    fs::write(path, bytes).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })
}

fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })
}

fn matrix_bytes(n: usize, kind: DistanceKind, normalized: bool, scale: f64, values: &[f64]) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MATRIX_MAGIC);
    w.u32(n);
    w.u8(kind.tag());
    w.u8(normalized as u8);
    w.f64(scale);
    w.f64s(values);
    w.0
}

/// `scale` is the divisor the normalization step uses (or would use) for this matrix.
pub fn encode_raw_matrix(m: &RawDistanceMatrix, scale: f64) -> Vec<u8> {
    matrix_bytes(m.n, m.kind, false, scale, &m.values)
}

pub fn encode_distance_matrix(m: &DistanceMatrix) -> Vec<u8> {
    matrix_bytes(m.n, m.kind, true, m.scale, &m.values)
}

/// Either flavor of TSM1 file.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixFile {
    Raw { matrix: RawDistanceMatrix, scale: f64 },
    Normalized(DistanceMatrix),
}

pub fn decode_matrix(bytes: &[u8]) -> Result<MatrixFile, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MATRIX_MAGIC)?;
    let n = r.u32()?;
    let tag = r.u8()?;
    let kind = DistanceKind::from_tag(tag).ok_or_else(|| FormatError::Invalid(format!("kind tag {tag}")))?;
    let normalized = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(FormatError::Invalid(format!("normalized flag {other}"))),
    };
    let scale = r.f64()?;
    let values = r.f64s(n * n)?;
    r.finish()?;
    Ok(if normalized {
        MatrixFile::Normalized(DistanceMatrix { n, kind, scale, values })
    } else {
        MatrixFile::Raw { matrix: RawDistanceMatrix { n, kind, values }, scale }
    })
}

pub fn write_raw_matrix(path: &Path, m: &RawDistanceMatrix, scale: f64) -> Result<(), FormatError> {
    write_file(path, &encode_raw_matrix(m, scale))
}

pub fn write_distance_matrix(path: &Path, m: &DistanceMatrix) -> Result<(), FormatError> {
    write_file(path, &encode_distance_matrix(m))
}

pub fn read_raw_matrix(path: &Path) -> Result<RawDistanceMatrix, FormatError> {
    match decode_matrix(&read_file(path)?)? {
        MatrixFile::Raw { matrix, .. } => Ok(matrix),
        MatrixFile::Normalized(_) => Err(FormatError::Invalid("expected a raw matrix".into())),
    }
}

pub fn read_distance_matrix(path: &Path) -> Result<DistanceMatrix, FormatError> {
    match decode_matrix(&read_file(path)?)? {
        MatrixFile::Normalized(m) => Ok(m),
        MatrixFile::Raw { .. } => Err(FormatError::Invalid("expected a normalized matrix".into())),
    }
}

pub fn encode_graph(g: &MultiScaleGraph) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(GRAPH_MAGIC);
    w.u32(g.n);
    w.u32(g.layers.len());
    w.f64s(g.thresholds.values());
    for layer in &g.layers {
        w.u64(layer.edges.len() as u64);
        for e in &layer.edges {
            w.u32(e.i as usize);
            w.u32(e.j as usize);
            w.f64(e.w);
        }
    }
    w.0
}

/// Node IDs are not part of the file; pass them in row order.
pub fn decode_graph(bytes: &[u8], node_ids: Vec<String>) -> Result<MultiScaleGraph, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(GRAPH_MAGIC)?;
    let n = r.u32()?;
    let m = r.u32()?;
    if m == 0 {
        return Err(FormatError::Invalid("graph without layers".into()));
    }
    if node_ids.len() != n {
        return Err(FormatError::Invalid(format!("{} node ids for {n} nodes", node_ids.len())));
    }
    let c = r.f64s(m + 1)?;
    let thresholds = Thresholds::doubling(c[0], m).map_err(|e| FormatError::Invalid(e.to_string()))?;
    if thresholds.values() != c.as_slice() {
        return Err(FormatError::Invalid("thresholds do not double".into()));
    }
    let mut layers = Vec::with_capacity(m);
    for _ in 0..m {
        let count = r.u64()? as usize;
        let mut edges = Vec::with_capacity(count.min(bytes.len() / 16));
        for _ in 0..count {
            let (i, j, w) = (r.u32()?, r.u32()?, r.f64()?);
            if i >= j || j >= n {
                return Err(FormatError::Invalid(format!("bad edge ({i}, {j})")));
            }
            edges.push(Edge { i: i as u32, j: j as u32, w });
        }
        layers.push(GraphLayer { n, edges });
    }
    r.finish()?;
    Ok(MultiScaleGraph { n, thresholds, layers, node_ids })
}

pub fn write_graph(path: &Path, g: &MultiScaleGraph) -> Result<(), FormatError> {
    write_file(path, &encode_graph(g))
}

pub fn read_graph(path: &Path, node_ids: Vec<String>) -> Result<MultiScaleGraph, FormatError> {
    decode_graph(&read_file(path)?, node_ids)
}

fn put_tensor(w: &mut Writer, shape: &[usize], data: &[f64]) {
    w.u32(shape.len());
    for &d in shape {
        w.u32(d);
    }
    w.f64s(data);
}

fn get_tensor(r: &mut Reader<'_>, expected: &[usize]) -> Result<Vec<f64>, FormatError> {
    let ndim = r.u32()?;
    let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    if shape != expected {
        return Err(FormatError::Invalid(format!("tensor shape {shape:?}, expected {expected:?}")));
    }
    r.f64s(shape.iter().product())
}

/// Checkpoint holding the model and the input embeddings it was trained on.
pub fn encode_model(model: &GnnModel, input: &Array2<f64>) -> Vec<u8> {
    let cfg = &model.config;
    let mut w = Writer::default();
    w.bytes(MODEL_MAGIC);
    w.u32(cfg.input_dim);
    w.u32(cfg.layers());
    for &d in &cfg.layer_dims {
        w.u32(d);
    }
    w.u32(cfg.mlp_hidden);
    w.u32(cfg.out_dim);
    w.u64(cfg.seed);
    w.u8(ACTIVATION_RELU);
    let mut flags = 0;
    if cfg.edge_bias {
        flags |= FLAG_EDGE_BIAS;
    }
    if cfg.sequential {
        flags |= FLAG_SEQUENTIAL;
    }
    w.u8(flags);
    for (shape, data) in model.params.tensor_shapes().iter().zip(model.params.tensors()) {
        put_tensor(&mut w, shape, data);
    }
    let standard = input.as_standard_layout();
    put_tensor(&mut w, input.shape(), standard.as_slice().expect("standard layout"));
    w.0
}

pub fn decode_model(bytes: &[u8]) -> Result<(GnnModel, Array2<f64>), FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MODEL_MAGIC)?;
    let input_dim = r.u32()?;
    let m = r.u32()?;
    let layer_dims = (0..m).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    let mlp_hidden = r.u32()?;
    let out_dim = r.u32()?;
    let seed = r.u64()?;
    let activation = r.u8()?;
    if activation != ACTIVATION_RELU {
        return Err(FormatError::Invalid(format!("activation tag {activation}")));
    }
    let flags = r.u8()?;
    let config = ModelConfig {
        input_dim,
        layer_dims,
        mlp_hidden,
        out_dim,
        seed,
        edge_bias: flags & FLAG_EDGE_BIAS != 0,
        sequential: flags & FLAG_SEQUENTIAL != 0,
    };

    let mut layers = Vec::with_capacity(m);
    for k in 0..m {
        let (din, dout) = (config.layer_input_dim(k), config.layer_dims[k]);
        let weight = Array2::from_shape_vec((din, dout), get_tensor(&mut r, &[din, dout])?).unwrap();
        let attn = Array1::from_vec(get_tensor(&mut r, &[2 * dout])?);
        layers.push(LayerParams { weight, attn });
    }
    let (cat, hid) = (config.concat_dim(), mlp_hidden);
    let mlp = Mlp {
        w1: Array2::from_shape_vec((cat, hid), get_tensor(&mut r, &[cat, hid])?).unwrap(),
        b1: Array1::from_vec(get_tensor(&mut r, &[hid])?),
        w2: Array2::from_shape_vec((hid, out_dim), get_tensor(&mut r, &[hid, out_dim])?).unwrap(),
        b2: Array1::from_vec(get_tensor(&mut r, &[out_dim])?),
    };
    let ndim = r.u32()?;
    if ndim != 2 {
        return Err(FormatError::Invalid("input embeddings must be 2-D".into()));
    }
    let (rows, cols) = (r.u32()?, r.u32()?);
    if cols != input_dim {
        return Err(FormatError::Invalid("input embedding width mismatch".into()));
    }
    let input = Array2::from_shape_vec((rows, cols), r.f64s(rows * cols)?).unwrap();
    r.finish()?;
    let model = GnnModel::from_parts(config, Params { layers, mlp }).map_err(|e| FormatError::Invalid(e.to_string()))?;
    Ok((model, input))
}

pub fn write_model(path: &Path, model: &GnnModel, input: &Array2<f64>) -> Result<(), FormatError> {
    write_file(path, &encode_model(model, input))
}

pub fn read_model(path: &Path) -> Result<(GnnModel, Array2<f64>), FormatError> {
    decode_model(&read_file(path)?)
}

pub fn encode_embeddings(e: &EmbeddingSet) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(EMBED_MAGIC);
    w.u32(e.len());
    w.u32(e.dim());
    for id in e.ids() {
        w.u32(id.len());
        w.bytes(id.as_bytes());
    }
    w.f64s(e.vectors());
    w.0
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingSet, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(EMBED_MAGIC)?;
    let n = r.u32()?;
    let dim = r.u32()?;
    let mut ids = Vec::with_capacity(n.min(bytes.len() / 4));
    for _ in 0..n {
        let len = r.u32()?;
        let raw = r.take(len)?;
        ids.push(String::from_utf8(raw.to_vec()).map_err(|e| FormatError::Invalid(e.to_string()))?);
    }
    let vectors = r.f64s(n * dim)?;
    r.finish()?;
    EmbeddingSet::new(ids, dim, vectors).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn write_embeddings(path: &Path, e: &EmbeddingSet) -> Result<(), FormatError> {
    write_file(path, &encode_embeddings(e))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet, FormatError> {
    decode_embeddings(&read_file(path)?)
}
