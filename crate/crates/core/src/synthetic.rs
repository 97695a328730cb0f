//! Seeded synthetic datasets of clustered GPS trajectories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ingest::{RawPoint, Trajectory, METERS_PER_DEG_LAT, METERS_PER_DEG_LON};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub clusters: usize,
    pub per_cluster: usize,
    pub points: usize,
    /// Distance between neighboring cluster centers, meters.
    pub spacing_m: f64,
    /// Length of each cluster's base route, meters.
    pub route_len_m: f64,
    /// Std of the per-trajectory rigid offset from the base route, meters.
    pub offset_std_m: f64,
    /// Std of independent per-point noise, meters.
    pub point_noise_m: f64,
    pub origin_lon: f64,
    pub origin_lat: f64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            clusters: 3,
            per_cluster: 100,
            points: 60,
            spacing_m: 5_000.0,
            route_len_m: 1_500.0,
            offset_std_m: 300.0,
            point_noise_m: 5.0,
            origin_lon: -8.70,
            origin_lat: 41.10,
        }
    }
}

/// Trajectories ordered cluster by cluster, IDs `c{cluster}_{index:03}`, one point every 15 s.
pub fn clustered_trajectories(spec: &ClusterSpec, seed: u64) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = Normal::new(0.0, spec.offset_std_m).expect("finite std");
    let noise = Normal::new(0.0, spec.point_noise_m).expect("finite std");
    let lon_scale = spec.origin_lat.to_radians().cos() * METERS_PER_DEG_LON;

    let mut out = Vec::with_capacity(spec.clusters * spec.per_cluster);
    for c in 0..spec.clusters {
        // Centers on a line, far apart compared to the routes and offsets.
        let center = [spec.spacing_m * (c as f64 + 1.0), spec.spacing_m];
        let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let bend: f64 = rng.random_range(-1.0..1.0);
        let step = spec.route_len_m / (spec.points - 1).max(1) as f64;
        let mut base = Vec::with_capacity(spec.points);
        let mut xy = center;
        for k in 0..spec.points {
            base.push(xy);
            let angle = heading + bend * k as f64 / spec.points as f64;
            xy = [xy[0] + step * angle.cos(), xy[1] + step * angle.sin()];
        }
        for t in 0..spec.per_cluster {
            let shift = [offset.sample(&mut rng), offset.sample(&mut rng)];
            let points = base
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let x = p[0] + shift[0] + noise.sample(&mut rng);
                    let y = p[1] + shift[1] + noise.sample(&mut rng);
                    RawPoint::with_time(
                        spec.origin_lon + x / lon_scale,
                        spec.origin_lat + y / METERS_PER_DEG_LAT,
                        1_400_000_000.0 + 15.0 * k as f64,
                    )
                })
                .collect();
            out.push(Trajectory::new(format!("c{c}_{t:03}"), points));
        }
    }
    out
}
