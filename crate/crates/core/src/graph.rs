//! Multi-scale similarity graph.
//!
//! Layer `k` (1-based) holds every unordered pair whose symmetrized normalized distance falls in
//! the half-open band `[c_{k-1}, c_k)`, weighted by `1 - d`. The thresholds double from one
//! layer to the next, so two nodes that share a neighbor in layer `k` are at most `2 c_k` apart
//! and land in some layer up to `k + 1`.

use serde::Serialize;
use thiserror::Error;

use crate::distance::DistanceMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("layer count must be at least 1")]
    NoLayers,
    #[error("percentile must be in [0, 100], got {0}")]
    BadPercentile(f64),
    #[error("need at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("base threshold must be positive and finite, got {0}")]
    BadBase(f64),
    #[error("node id count {ids} does not match matrix size {n}")]
    IdCount { ids: usize, n: usize },
}

/// `c_0 < c_1 < ... < c_m` with `c_k = 2 c_{k-1}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Thresholds(Vec<f64>);

impl Thresholds {
    pub fn doubling(c0: f64, layers: usize) -> Result<Self, GraphError> {
        if layers == 0 {
            return Err(GraphError::NoLayers);
        }
        if !(c0 > 0.0 && c0.is_finite()) {
            return Err(GraphError::BadBase(c0));
        }
        let mut c = Vec::with_capacity(layers + 1);
        c.push(c0);
        for k in 1..=layers {
            c.push(2.0 * c[k - 1]);
        }
        Ok(Self(c))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn layers(&self) -> usize {
        self.0.len() - 1
    }

    pub fn base(&self) -> f64 {
        self.0[0]
    }

    pub fn top(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    /// 1-based layer whose band contains `d`, if any.
    pub fn band_of(&self, d: f64) -> Option<usize> {
        if !(d >= self.base() && d < self.top()) {
            return None;
        }
        self.0.windows(2).position(|w| w[0] <= d && d < w[1]).map(|k| k + 1)
    }
}

/// Outcome of [`choose_thresholds`].
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdChoice {
    pub thresholds: Thresholds,
    /// All off-diagonal distances agree to 15 decimal places.
    pub degenerate: bool,
    /// Share of pairs at or above `c_m`; those pairs get no edge.
    pub fraction_above_top: f64,
}

/// Linear-interpolated percentile of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

fn upper_symmetric(d: &DistanceMatrix) -> Vec<f64> {
    let n = d.n;
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(d.symmetric(i, j));
        }
    }
    out
}

/// `c_0` is the `q`-th percentile of the symmetrized off-diagonal distances; the rest double.
pub fn choose_thresholds(
    d: &DistanceMatrix,
    layers: usize,
    q: f64,
) -> Result<ThresholdChoice, GraphError> {
    if layers == 0 {
        return Err(GraphError::NoLayers);
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(GraphError::BadPercentile(q));
    }
    if d.n < 2 {
        return Err(GraphError::TooFewNodes(d.n));
    }
    let mut values = upper_symmetric(d);
    values.sort_by(f64::total_cmp);
    let (lo, hi) = (values[0], values[values.len() - 1]);
    let degenerate = (hi - lo).abs() < 1e-15;

    let thresholds = Thresholds::doubling(percentile(&values, q), layers)?;
    let above = values.iter().filter(|&&v| v >= thresholds.top()).count();
    let fraction_above_top = above as f64 / values.len() as f64;
    if above > 0 {
        log::warn!(
            "{:.2}% of pairs lie at or above c_m = {} and get no edge",
            100.0 * fraction_above_top,
            thresholds.top()
        );
    }
    if degenerate {
        log::warn!("all pairwise distances are identical; thresholds are degenerate");
    }
    Ok(ThresholdChoice { thresholds, degenerate, fraction_above_top })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Edge {
    pub i: u32,
    pub j: u32,
    pub w: f64,
}

/// One band of the graph. Edges are stored once, with `i < j`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphLayer {
    pub n: usize,
    pub edges: Vec<Edge>,
}

impl GraphLayer {
    /// Neighbor lists in both directions, each sorted by node index.
    pub fn neighbors(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.n];
        for e in &self.edges {
            adj[e.i as usize].push((e.j as usize, e.w));
            adj[e.j as usize].push((e.i as usize, e.w));
        }
        for list in &mut adj {
            list.sort_by_key(|&(j, _)| j);
        }
        adj
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiScaleGraph {
    pub n: usize,
    pub thresholds: Thresholds,
    pub layers: Vec<GraphLayer>,
    pub node_ids: Vec<String>,
}

impl MultiScaleGraph {
    pub fn edge_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.edges.len()).collect()
    }

    /// `n * n` table of the 1-based layer holding each pair, 0 for none.
    pub fn layer_lookup(&self) -> Vec<u32> {
        let mut lookup = vec![0u32; self.n * self.n];
        for (k, layer) in self.layers.iter().enumerate() {
            for e in &layer.edges {
                let (i, j) = (e.i as usize, e.j as usize);
                lookup[i * self.n + j] = k as u32 + 1;
                lookup[j * self.n + i] = k as u32 + 1;
            }
        }
        lookup
    }

    /// Collapses every layer into one, keeping the thresholds' outer bounds.
    pub fn merged(&self) -> MultiScaleGraph {
        let mut edges: Vec<Edge> = self.layers.iter().flat_map(|l| l.edges.iter().copied()).collect();
        edges.sort_by_key(|e| (e.i, e.j));
        let thresholds = Thresholds(vec![self.thresholds.base(), self.thresholds.top()]);
        MultiScaleGraph {
            n: self.n,
            thresholds,
            layers: vec![GraphLayer { n: self.n, edges }],
            node_ids: self.node_ids.clone(),
        }
    }
}

/// Places each unordered pair into the layer whose band holds its symmetrized distance.
///
/// Pairs whose weight `1 - d` is not strictly positive (the exponential underflowed) get no edge.
pub fn build_graph(
    d: &DistanceMatrix,
    thresholds: &Thresholds,
    node_ids: Vec<String>,
) -> Result<MultiScaleGraph, GraphError> {
    let n = d.n;
    if node_ids.len() != n {
        return Err(GraphError::IdCount { ids: node_ids.len(), n });
    }
    let mut layers = vec![GraphLayer { n, edges: Vec::new() }; thresholds.layers()];
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = d.symmetric(i, j);
            let w = 1.0 - dist;
            if w <= 0.0 {
                continue;
            }
            if let Some(k) = thresholds.band_of(dist) {
                layers[k - 1].edges.push(Edge { i: i as u32, j: j as u32, w });
            }
        }
    }
    Ok(MultiScaleGraph { n, thresholds: thresholds.clone(), layers, node_ids })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CoverageReport {
    /// Neighbor pairs `(p, q)` sharing a node `r` in some layer.
    pub pairs_checked: u64,
    /// Pairs with `d_pq >= c_0` that have no edge in any layer up to `k + 1`.
    pub violations: u64,
}

/// Checks that whenever `(p, r)` and `(q, r)` are edges of layer `k`, the pair `(p, q)` is an
/// edge of a layer `<= k + 1` or is closer than `c_0`.
pub fn coverage_check(g: &MultiScaleGraph, d: &DistanceMatrix) -> CoverageReport {
    let lookup = g.layer_lookup();
    let c0 = g.thresholds.base();
    let mut report = CoverageReport::default();
    for (k0, layer) in g.layers.iter().enumerate() {
        let k = k0 as u32 + 1;
        for nbrs in layer.neighbors() {
            for (a, &(p, _)) in nbrs.iter().enumerate() {
                for &(q, _) in &nbrs[a + 1..] {
                    report.pairs_checked += 1;
                    let found = lookup[p * g.n + q];
                    let covered = (found != 0 && found <= k + 1) || d.symmetric(p, q) < c0;
                    if !covered {
                        report.violations += 1;
                    }
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::{normalize_distances, raw_distance_matrix, DistanceKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    fn symmetric_matrix(n: usize, mut upper: impl FnMut(usize, usize) -> f64) -> DistanceMatrix {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = upper(i, j);
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        DistanceMatrix { n, kind: DistanceKind::Frechet, scale: 1.0, values }
    }

    fn random_dataset(rng: &mut impl Rng, n: usize) -> DistanceMatrix {
        let trajs: Vec<Vec<[f64; 2]>> = (0..n)
            .map(|_| {
                (0..rng.random_range(1..6))
                    .map(|_| [rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0)])
                    .collect()
            })
            .collect();
        normalize_distances(&raw_distance_matrix(&trajs, DistanceKind::Hausdorff, 1).unwrap()).unwrap()
    }

    #[test]
    fn doubling_thresholds() {
        let t = Thresholds::doubling(0.25, 2).unwrap();
        assert_eq!(t.values(), &[0.25, 0.5, 1.0]);
        assert_eq!(Thresholds::doubling(0.25, 0), Err(GraphError::NoLayers));
        assert_eq!(Thresholds::doubling(0.0, 2), Err(GraphError::BadBase(0.0)));
    }

    #[test]
    fn chosen_thresholds_double_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = random_dataset(&mut rng, 30);
        for m in 1..6 {
            let t = choose_thresholds(&d, m, 10.0).unwrap().thresholds;
            assert_eq!(t.layers(), m);
            for w in t.values().windows(2) {
                assert_eq!(w[1] / w[0], 2.0);
            }
        }
    }

    #[test]
    fn base_threshold_matches_sort_oracle() {
        // 15 nodes -> 105 pairs; q = 10 -> rank 10.4 between sorted[10] and sorted[11].
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = symmetric_matrix(15, |_, _| rng.random_range(0.1..0.9));
        let mut all = Vec::new();
        for i in 0..15 {
            for j in 0..15 {
                if i < j {
                    all.push(d.get(i, j));
                }
            }
        }
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected = all[10] + 0.4 * (all[11] - all[10]);
        let got = choose_thresholds(&d, 3, 10.0).unwrap().thresholds.base();
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn threshold_errors_and_degeneracy() {
        let d = symmetric_matrix(4, |_, _| 0.7);
        assert_eq!(choose_thresholds(&d, 0, 10.0), Err(GraphError::NoLayers));
        assert_eq!(choose_thresholds(&d, 2, 120.0), Err(GraphError::BadPercentile(120.0)));
        let choice = choose_thresholds(&d, 2, 10.0).unwrap();
        assert!(choice.degenerate);
        assert_eq!(choice.thresholds.base(), 0.7);
    }

    #[test]
    fn fraction_above_top_is_reported() {
        // 0th percentile of {0.125, 0.25, ..., 0.75} is 0.125; one layer tops out at 0.25,
        // leaving 5 of 6 pairs above.
        let vals = [0.125, 0.25, 0.375, 0.5, 0.625, 0.75];
        let mut it = vals.iter();
        let d = symmetric_matrix(4, |_, _| *it.next().unwrap());
        let choice = choose_thresholds(&d, 1, 0.0).unwrap();
        assert_eq!(choice.thresholds.values(), &[0.125, 0.25]);
        assert_eq!(choice.fraction_above_top, 5.0 / 6.0);
    }

    #[test]
    fn band_assignment_and_weight() {
        let t = Thresholds::doubling(0.25, 2).unwrap();
        let d = symmetric_matrix(2, |_, _| 0.3);
        let g = build_graph(&d, &t, ids(2)).unwrap();
        assert_eq!(g.edge_counts(), vec![1, 0]);
        assert!((g.layers[0].edges[0].w - 0.7).abs() < 1e-15);

        let d = symmetric_matrix(2, |_, _| 0.5);
        let g = build_graph(&d, &t, ids(2)).unwrap();
        assert_eq!(g.edge_counts(), vec![0, 1]);

        for v in [0.2, 1.0, 1.5] {
            let d = symmetric_matrix(2, |_, _| v);
            assert_eq!(build_graph(&d, &t, ids(2)).unwrap().edge_counts(), vec![0, 0]);
        }
    }

    #[test]
    fn asymmetric_input_is_averaged() {
        let t = Thresholds::doubling(0.25, 2).unwrap();
        let d = DistanceMatrix {
            n: 2,
            kind: DistanceKind::Frechet,
            scale: 1.0,
            values: vec![0.0, 0.4, 0.6, 0.0],
        };
        let g = build_graph(&d, &t, ids(2)).unwrap();
        assert_eq!(g.edge_counts(), vec![0, 1]);
        assert!((g.layers[1].edges[0].w - 0.5).abs() < 1e-15);
    }

    #[test]
    fn id_count_must_match() {
        let d = symmetric_matrix(3, |_, _| 0.5);
        let t = Thresholds::doubling(0.25, 1).unwrap();
        assert_eq!(build_graph(&d, &t, ids(2)), Err(GraphError::IdCount { ids: 2, n: 3 }));
    }

    #[test]
    fn random_graph_partitions_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = symmetric_matrix(20, |_, _| rng.random_range(0.05..0.99));
        let t = Thresholds::doubling(0.1, 3).unwrap();
        let g = build_graph(&d, &t, ids(20)).unwrap();
        let mut seen = std::collections::HashMap::new();
        for (k, layer) in g.layers.iter().enumerate() {
            for e in &layer.edges {
                assert!(e.i < e.j);
                assert!(seen.insert((e.i, e.j), k).is_none(), "pair in two layers");
                assert!(e.w > 0.0 && e.w <= 1.0);
            }
        }
        let mut expected = 0;
        for i in 0..20 {
            for j in (i + 1)..20 {
                let v = d.symmetric(i, j);
                let inside = v >= 0.1 && v < 0.8;
                assert_eq!(inside, seen.contains_key(&(i as u32, j as u32)));
                expected += inside as usize;
            }
        }
        assert_eq!(seen.len(), expected);
    }

    #[test]
    fn weights_decrease_with_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_dataset(&mut rng, 25);
        let t = choose_thresholds(&d, 3, 10.0).unwrap().thresholds;
        let g = build_graph(&d, &t, ids(25)).unwrap();
        for layer in &g.layers {
            for a in &layer.edges {
                for b in &layer.edges {
                    let (da, db) =
                        (d.symmetric(a.i as usize, a.j as usize), d.symmetric(b.i as usize, b.j as usize));
                    if da < db {
                        assert!(a.w > b.w);
                    }
                }
            }
        }
    }

    #[test]
    fn coverage_collinear_triple() {
        // r in the middle, p and q on either side: d_rp = d_rq = 0.3, d_pq = 0.6.
        let t = Thresholds::doubling(0.25, 2).unwrap();
        let d = symmetric_matrix(3, |i, j| match (i, j) {
            (0, 2) => 0.6,
            _ => 0.3,
        });
        let g = build_graph(&d, &t, ids(3)).unwrap();
        assert_eq!(g.edge_counts(), vec![2, 1]);
        let report = coverage_check(&g, &d);
        assert_eq!(report.pairs_checked, 1);
        assert_eq!(report.violations, 0);
    }

    #[test]
    fn coverage_flags_missing_pair() {
        // Non-metric input: d_pq far beyond 2 c_1 breaks the guarantee.
        let t = Thresholds::doubling(0.25, 1).unwrap();
        let d = symmetric_matrix(3, |i, j| match (i, j) {
            (0, 2) => 0.9,
            _ => 0.3,
        });
        let g = build_graph(&d, &t, ids(3)).unwrap();
        assert_eq!(coverage_check(&g, &d).violations, 1);
    }

    #[test]
    fn coverage_vacuous_without_shared_nodes() {
        let t = Thresholds::doubling(0.25, 2).unwrap();
        let d = symmetric_matrix(4, |i, j| if (i, j) == (0, 1) || (i, j) == (2, 3) { 0.3 } else { 0.1 });
        let g = build_graph(&d, &t, ids(4)).unwrap();
        let report = coverage_check(&g, &d);
        assert_eq!(report.pairs_checked, 0);
        assert_eq!(report.violations, 0);
    }

    #[test]
    fn coverage_holds_on_random_metric_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for m in 1..=4 {
            let d = random_dataset(&mut rng, 40);
            let t = choose_thresholds(&d, m, 10.0).unwrap().thresholds;
            let g = build_graph(&d, &t, ids(40)).unwrap();
            assert_eq!(coverage_check(&g, &d).violations, 0);
        }
    }

    #[test]
    fn merged_graph_keeps_all_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = symmetric_matrix(12, |_, _| rng.random_range(0.05..0.99));
        let g = build_graph(&d, &Thresholds::doubling(0.1, 3).unwrap(), ids(12)).unwrap();
        let merged = g.merged();
        assert_eq!(merged.layers.len(), 1);
        assert_eq!(merged.layers[0].edges.len(), g.edge_counts().iter().sum::<usize>());
    }
}
