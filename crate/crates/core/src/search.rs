//! Exact top-K retrieval over embeddings and the hit-ratio / recall metrics.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distance::{DistanceKind, RawDistanceMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum SearchError {
    #[error("unknown trajectory id `{0}`")]
    UnknownId(String),
    #[error("duplicate trajectory id `{0}`")]
    DuplicateId(String),
    #[error("requested {k} neighbors but only {available} candidates exist")]
    TooMany { k: usize, available: usize },
    #[error("embedding row {0} is not finite")]
    NonFinite(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("HR@K needs K == N, got K = {k}, N = {n}")]
    DepthMismatch { k: usize, n: usize },
    #[error("RN@K needs K >= N, got K = {k}, N = {n}")]
    RecallDepth { k: usize, n: usize },
    #[error("retrieval and ground truth cover different queries")]
    QueryMismatch,
}

/// Row-major `n x dim` embeddings with one trajectory ID per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<String>,
    dim: usize,
    vectors: Vec<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, dim: usize, vectors: Vec<f64>) -> Result<Self, SearchError> {
        if vectors.len() != ids.len() * dim {
            return Err(SearchError::Shape(format!(
                "{} ids x {dim} dims needs {} values, got {}",
                ids.len(),
                ids.len() * dim,
                vectors.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), row).is_some() {
                return Err(SearchError::DuplicateId(id.clone()));
            }
        }
        if dim > 0 {
            if let Some(row) = vectors.chunks(dim).position(|r| r.iter().any(|v| !v.is_finite())) {
                return Err(SearchError::NonFinite(row));
            }
        }
        Ok(Self { ids, dim, vectors, index })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Indices of the `k` nearest rows to row `query` by Euclidean distance, query excluded,
    /// ties broken by ascending ID.
    pub fn nearest(&self, query: usize, k: usize) -> Result<Vec<usize>, SearchError> {
        let available = self.len().saturating_sub(1);
        if k > available {
            return Err(SearchError::TooMany { k, available });
        }
        let q = self.row(query);
        let mut cands: Vec<(f64, usize)> = (0..self.len())
            .filter(|&j| j != query)
            .map(|j| (squared_distance(q, self.row(j)), j))
            .collect();
        Ok(top_k(&mut cands, k, &self.ids))
    }
}

#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rank_order(ids: &[String]) -> impl Fn(&(f64, usize), &(f64, usize)) -> Ordering + '_ {
    move |a, b| a.0.total_cmp(&b.0).then_with(|| ids[a.1].cmp(&ids[b.1]))
}

fn top_k(cands: &mut [(f64, usize)], k: usize, ids: &[String]) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let cmp = rank_order(ids);
    if k < cands.len() {
        cands.select_nth_unstable_by(k - 1, &cmp);
    }
    let head = &mut cands[..k];
    head.sort_by(&cmp);
    head.iter().map(|&(_, j)| j).collect()
}

/// Returns the IDs of the `k` nearest neighbors of `query_id`.
pub fn knn_search(emb: &EmbeddingSet, query_id: &str, k: usize) -> Result<Vec<String>, SearchError> {
    let query = emb.position(query_id).ok_or_else(|| SearchError::UnknownId(query_id.into()))?;
    Ok(emb.nearest(query, k)?.into_iter().map(|j| emb.ids[j].clone()).collect())
}

/// Per-query ranked neighbor lists (row indices), all of the same depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedLists {
    pub depth: usize,
    pub queries: Vec<usize>,
    pub lists: Vec<Vec<usize>>,
}

/// Top-N lists from the raw distance matrix.
pub type GroundTruth = RankedLists;
/// Top-K lists from embedding distance.
pub type Retrieval = RankedLists;

pub fn ground_truth_topn(
    raw: &RawDistanceMatrix,
    ids: &[String],
    n_top: usize,
    queries: &[usize],
) -> Result<GroundTruth, SearchError> {
    if ids.len() != raw.n {
        return Err(SearchError::Shape(format!("{} ids for a {}-row matrix", ids.len(), raw.n)));
    }
    let available = raw.n.saturating_sub(1);
    if n_top > available {
        return Err(SearchError::TooMany { k: n_top, available });
    }
    let lists = queries
        .par_iter()
        .map(|&q| {
            let mut cands: Vec<(f64, usize)> =
                (0..raw.n).filter(|&j| j != q).map(|j| (raw.get(q, j), j)).collect();
            top_k(&mut cands, n_top, ids)
        })
        .collect();
    Ok(RankedLists { depth: n_top, queries: queries.to_vec(), lists })
}

pub fn retrieve_all(emb: &EmbeddingSet, k: usize, queries: &[usize]) -> Result<Retrieval, SearchError> {
    let lists = queries
        .par_iter()
        .map(|&q| emb.nearest(q, k))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RankedLists { depth: k, queries: queries.to_vec(), lists })
}

fn mean_overlap(x: &RankedLists, y: &RankedLists, denom: usize) -> Result<f64, SearchError> {
    if x.queries != y.queries {
        return Err(SearchError::QueryMismatch);
    }
    if x.lists.is_empty() || denom == 0 {
        return Ok(0.0);
    }
    let total: f64 = x
        .lists
        .iter()
        .zip(&y.lists)
        .map(|(xs, ys)| {
            let truth: HashSet<usize> = ys.iter().copied().collect();
            xs.iter().filter(|j| truth.contains(j)).count() as f64 / denom as f64
        })
        .sum();
    Ok(total / x.lists.len() as f64)
}

/// HR@K: mean `|X ∩ Y| / K` with `K == N`.
pub fn hit_ratio(x: &Retrieval, y: &GroundTruth) -> Result<f64, SearchError> {
    if x.depth != y.depth {
        return Err(SearchError::DepthMismatch { k: x.depth, n: y.depth });
    }
    mean_overlap(x, y, x.depth)
}

/// RN@K: mean `|X ∩ Y| / N` with `K >= N`.
pub fn recall_n_at_k(x: &Retrieval, y: &GroundTruth) -> Result<f64, SearchError> {
    if x.depth < y.depth {
        return Err(SearchError::RecallDepth { k: x.depth, n: y.depth });
    }
    mean_overlap(x, y, y.depth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric_distance: DistanceKind,
    #[serde(rename = "HR@10")]
    pub hr10: f64,
    #[serde(rename = "HR@50")]
    pub hr50: f64,
    #[serde(rename = "R10@50")]
    pub r10_at_50: f64,
    pub n: usize,
    pub seed: u64,
}

/// HR@10, HR@50 and R10@50 over the given query rows (leave-one-out against all rows).
///
/// Embedding rows and matrix rows must describe the same trajectories in the same order.
pub fn evaluate(
    emb: &EmbeddingSet,
    raw: &RawDistanceMatrix,
    queries: &[usize],
    seed: u64,
) -> Result<EvalReport, SearchError> {
    if emb.len() != raw.n {
        return Err(SearchError::Shape(format!(
            "{} embeddings vs {}-row distance matrix",
            emb.len(),
            raw.n
        )));
    }
    let truth10 = ground_truth_topn(raw, emb.ids(), 10, queries)?;
    let truth50 = ground_truth_topn(raw, emb.ids(), 50, queries)?;
    let got10 = retrieve_all(emb, 10, queries)?;
    let got50 = retrieve_all(emb, 50, queries)?;
    Ok(EvalReport {
        metric_distance: raw.kind,
        hr10: hit_ratio(&got10, &truth10)?,
        hr50: hit_ratio(&got50, &truth50)?,
        r10_at_50: recall_n_at_k(&got50, &truth10)?,
        n: raw.n,
        seed,
    })
}

/// A seeded subset of `ceil(fraction * n)` query rows, in ascending order.
///
/// `fraction >= 1` returns every row (the default leave-one-out protocol).
pub fn held_out_queries(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..n).collect();
    if fraction >= 1.0 {
        return rows;
    }
    let take = ((fraction.max(0.0) * n as f64).ceil() as usize).min(n);
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    rows.truncate(take);
    rows.sort_unstable();
    rows
}
