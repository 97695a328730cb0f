//! Pairwise trajectory distances and the softmax-normalized distance matrix.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Point;

#[derive(Debug, Error, PartialEq)]
pub enum DistanceError {
    #[error("trajectory {0} is empty")]
    EmptySequence(usize),
    #[error("need at least 2 trajectories, got {0}")]
    TooFew(usize),
    #[error("non-finite raw distance at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("unknown distance kind `{0}` (expected frechet or hausdorff)")]
    UnknownKind(String),
    #[error("failed to start worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Frechet,
    Hausdorff,
}

impl DistanceKind {
    pub fn tag(self) -> u8 {
        match self {
            Self::Frechet => 0,
            Self::Hausdorff => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::Frechet),
            1 => Some(Self::Hausdorff),
            _ => None,
        }
    }
}

impl FromStr for DistanceKind {
    type Err = DistanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "frechet" => Ok(Self::Frechet),
            "hausdorff" => Ok(Self::Hausdorff),
            other => Err(DistanceError::UnknownKind(other.to_string())),
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Frechet => "frechet",
            Self::Hausdorff => "hausdorff",
        })
    }
}

#[inline]
pub fn euclidean(p: &Point, q: &Point) -> f64 {
    let dx = p[0] - q[0];
    let dy = p[1] - q[1];
    (dx * dx + dy * dy).sqrt()
}

/// Reusable row buffers for the Fréchet dynamic program.
#[derive(Debug, Default, Clone)]
pub struct FrechetScratch {
    prev: Vec<f64>,
    curr: Vec<f64>,
}

impl FrechetScratch {
    /// Discrete Fréchet distance, keeping two rows of the `|a| x |b|` table.
    pub fn distance(&mut self, a: &[Point], b: &[Point]) -> f64 {
        debug_assert!(!a.is_empty() && !b.is_empty());
        let m = b.len();
        self.prev.clear();
        self.prev.resize(m, 0.0);
        self.curr.clear();
        self.curr.resize(m, 0.0);

        self.prev[0] = euclidean(&a[0], &b[0]);
        for j in 1..m {
            self.prev[j] = self.prev[j - 1].max(euclidean(&a[0], &b[j]));
        }
        for p in &a[1..] {
            self.curr[0] = self.prev[0].max(euclidean(p, &b[0]));
            for j in 1..m {
                let reach = self.prev[j].min(self.prev[j - 1]).min(self.curr[j - 1]);
                self.curr[j] = reach.max(euclidean(p, &b[j]));
            }
            std::mem::swap(&mut self.prev, &mut self.curr);
        }
        self.prev[m - 1]
    }
}

pub fn discrete_frechet(a: &[Point], b: &[Point]) -> Result<f64, DistanceError> {
    check_non_empty(a, b)?;
    Ok(FrechetScratch::default().distance(a, b))
}

pub fn hausdorff(a: &[Point], b: &[Point]) -> Result<f64, DistanceError> {
    check_non_empty(a, b)?;
    Ok(hausdorff_unchecked(a, b))
}

fn hausdorff_unchecked(a: &[Point], b: &[Point]) -> f64 {
    directed_hausdorff(a, b).max(directed_hausdorff(b, a))
}

fn directed_hausdorff(from: &[Point], to: &[Point]) -> f64 {
    from.iter()
        .map(|p| to.iter().map(|q| euclidean(p, q)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

fn check_non_empty(a: &[Point], b: &[Point]) -> Result<(), DistanceError> {
    if a.is_empty() {
        return Err(DistanceError::EmptySequence(0));
    }
    if b.is_empty() {
        return Err(DistanceError::EmptySequence(1));
    }
    Ok(())
}

/// Dense symmetric matrix of raw distances in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDistanceMatrix {
    pub n: usize,
    pub kind: DistanceKind,
    /// Row-major, `n * n`.
    pub values: Vec<f64>,
}

impl RawDistanceMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// Median of the strictly-upper-triangle entries.
    pub fn median_off_diagonal(&self) -> f64 {
        let mut upper: Vec<f64> = (0..self.n)
            .flat_map(|i| ((i + 1)..self.n).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .collect();
        if upper.is_empty() {
            return 0.0;
        }
        upper.sort_by(f64::total_cmp);
        let mid = upper.len() / 2;
        if upper.len() % 2 == 1 {
            upper[mid]
        } else {
            0.5 * (upper[mid - 1] + upper[mid])
        }
    }
}

/// All pairwise distances, computed on `workers` threads (0 = rayon default).
///
/// Every entry depends only on its two trajectories, so the result is bit-identical for any
/// worker count.
pub fn raw_distance_matrix(
    trajs: &[Vec<Point>],
    kind: DistanceKind,
    workers: usize,
) -> Result<RawDistanceMatrix, DistanceError> {
    let n = trajs.len();
    if n < 2 {
        return Err(DistanceError::TooFew(n));
    }
    if let Some(i) = trajs.iter().position(Vec::is_empty) {
        return Err(DistanceError::EmptySequence(i));
    }

    let compute_rows = || -> Vec<Vec<f64>> {
        (0..n)
            .into_par_iter()
            .map_init(FrechetScratch::default, |scratch, i| {
                ((i + 1)..n)
                    .map(|j| match kind {
                        DistanceKind::Frechet => scratch.distance(&trajs[i], &trajs[j]),
                        DistanceKind::Hausdorff => hausdorff_unchecked(&trajs[i], &trajs[j]),
                    })
                    .collect()
            })
            .collect()
    };
    let upper = if workers == 0 {
        compute_rows()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| DistanceError::Pool(e.to_string()))?
            .install(compute_rows)
    };

    let mut values = vec![0.0; n * n];
    for (i, row) in upper.iter().enumerate() {
        for (offset, &d) in row.iter().enumerate() {
            let j = i + 1 + offset;
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    Ok(RawDistanceMatrix { n, kind, values })
}

/// Row-softmax normalized distances, `d_ij = 1 - exp(-r_ij/s) / sum_k exp(-r_ik/s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub n: usize,
    pub kind: DistanceKind,
    /// The divisor `s` applied to raw distances before exponentiation.
    pub scale: f64,
    /// Row-major, `n * n`. Not symmetric.
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// `(d_ij + d_ji) / 2`.
    #[inline]
    pub fn symmetric(&self, i: usize, j: usize) -> f64 {
        0.5 * (self.get(i, j) + self.get(j, i))
    }
}

/// Picks the divisor applied to raw distances: the off-diagonal median, falling back to the
/// mean of the positive entries when more than half the pairs coincide, and to 1 when all do.
pub fn scale_divisor(raw: &RawDistanceMatrix) -> f64 {
    let median = raw.median_off_diagonal();
    if median > 0.0 {
        return median;
    }
    let positive: Vec<f64> = raw.values.iter().copied().filter(|&v| v > 0.0).collect();
    if positive.is_empty() {
        1.0
    } else {
        positive.iter().sum::<f64>() / positive.len() as f64
    }
}

pub fn normalize_distances(raw: &RawDistanceMatrix) -> Result<DistanceMatrix, DistanceError> {
    if let Some(pos) = raw.values.iter().position(|v| !v.is_finite()) {
        return Err(DistanceError::NonFinite(pos / raw.n, pos % raw.n));
    }
    let scale = scale_divisor(raw);
    Ok(normalize_with_scale(raw, scale))
}

/// Same as [`normalize_distances`] with an explicit divisor.
pub fn normalize_with_scale(raw: &RawDistanceMatrix, scale: f64) -> DistanceMatrix {
    let n = raw.n;
    let mut values = vec![0.0; n * n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        for (w, &r) in weights.iter_mut().zip(raw.row(i)) {
            *w = (-r / scale).exp();
        }
        let total: f64 = weights.iter().sum();
        for (out, &w) in values[i * n..(i + 1) * n].iter_mut().zip(&weights) {
            *out = 1.0 - w / total;
        }
    }
    DistanceMatrix { n, kind: raw.kind, scale, values }
}
