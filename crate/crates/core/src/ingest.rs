//! Dataset parsing, the minimum-length filter and 2-D gridding.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Point;

/// Meters per degree of latitude.
pub const METERS_PER_DEG_LAT: f64 = 110_540.0;
/// Meters per degree of longitude at the equator.
pub const METERS_PER_DEG_LON: f64 = 111_320.0;

/// Days between the OLE automation epoch (1899-12-30) and the Unix epoch.
const OLE_TO_UNIX_DAYS: f64 = 25_569.0;
/// Sampling period of the Porto taxi data.
const PORTO_SAMPLE_SECS: f64 = 15.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("zero trajectories parsed from {0}")]
    Empty(PathBuf),
    #[error("unknown dataset format `{0}` (expected porto_csv, geolife_plt or canonical_jsonl)")]
    UnknownFormat(String),
    #[error("grid cell size must be positive, got {0}")]
    BadCellSize(f64),
    #[error("no trajectories to grid")]
    NothingToGrid,
    #[error("trajectory {id}: point {index} lies west or south of the grid origin")]
    OutsideGrid { id: String, index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawPoint {
    pub lon: f64,
    pub lat: f64,
    pub t: Option<f64>,
}

impl RawPoint {
    pub fn new(lon: f64, lat: f64) -> Self {
        Self { lon, lat, t: None }
    }

    pub fn with_time(lon: f64, lat: f64, t: f64) -> Self {
        Self { lon, lat, t: Some(t) }
    }

    fn is_valid(&self) -> bool {
        self.lon.is_finite()
            && self.lat.is_finite()
            && (-180.0..=180.0).contains(&self.lon)
            && (-90.0..=90.0).contains(&self.lat)
            && self.t.is_none_or(f64::is_finite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub points: Vec<RawPoint>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, points: Vec<RawPoint>) -> Self {
        Self { id: id.into(), points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Non-empty, every coordinate in range, timestamps (where present) non-decreasing.
    pub fn is_valid(&self) -> bool {
        if self.points.is_empty() || !self.points.iter().all(RawPoint::is_valid) {
            return false;
        }
        let times: Vec<f64> = self.points.iter().filter_map(|p| p.t).collect();
        times.windows(2).all(|w| w[0] <= w[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    PortoCsv,
    GeolifePlt,
    CanonicalJsonl,
}

impl FromStr for DatasetFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "porto_csv" => Ok(Self::PortoCsv),
            "geolife_plt" => Ok(Self::GeolifePlt),
            "canonical_jsonl" => Ok(Self::CanonicalJsonl),
            other => Err(IngestError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PortoCsv => "porto_csv",
            Self::GeolifePlt => "geolife_plt",
            Self::CanonicalJsonl => "canonical_jsonl",
        })
    }
}

/// Parsed trajectories plus the number of input records that were dropped as malformed.
#[derive(Debug, Clone)]
pub struct ParsedDataset {
    pub trajectories: Vec<Trajectory>,
    pub skipped: usize,
}

pub fn parse_dataset(path: &Path, format: DatasetFormat) -> Result<ParsedDataset, IngestError> {
    let parsed = match format {
        DatasetFormat::CanonicalJsonl => parse_canonical_jsonl(path)?,
        DatasetFormat::PortoCsv => parse_porto_csv(path)?,
        DatasetFormat::GeolifePlt => parse_geolife(path)?,
    };
    if parsed.skipped > 0 {
        log::warn!("{}: skipped {} malformed record(s)", path.display(), parsed.skipped);
    }
    if parsed.trajectories.is_empty() {
        return Err(IngestError::Empty(path.to_path_buf()));
    }
    Ok(parsed)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.to_path_buf(), source }
}

#[derive(Serialize, Deserialize)]
struct CanonicalRecord {
    id: String,
    points: Vec<Vec<f64>>,
}

impl CanonicalRecord {
    fn into_trajectory(self) -> Option<Trajectory> {
        let points = self
            .points
            .iter()
            .map(|p| match p.as_slice() {
                [lon, lat] => Some(RawPoint::new(*lon, *lat)),
                [lon, lat, t] => Some(RawPoint::with_time(*lon, *lat, *t)),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()?;
        let traj = Trajectory::new(self.id, points);
        traj.is_valid().then_some(traj)
    }

    fn from_trajectory(traj: &Trajectory) -> Self {
        let points = traj
            .points
            .iter()
            .map(|p| match p.t {
                Some(t) => vec![p.lon, p.lat, t],
                None => vec![p.lon, p.lat],
            })
            .collect();
        Self { id: traj.id.clone(), points }
    }
}

fn parse_canonical_jsonl(path: &Path) -> Result<ParsedDataset, IngestError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut trajectories = Vec::new();
    let mut skipped = 0;
    for line in reader.lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CanonicalRecord>(&line)
            .ok()
            .and_then(CanonicalRecord::into_trajectory)
        {
            Some(traj) => trajectories.push(traj),
            None => skipped += 1,
        }
    }
    Ok(ParsedDataset { trajectories, skipped })
}

pub fn write_canonical_jsonl(path: &Path, trajs: &[Trajectory]) -> Result<(), IngestError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for traj in trajs {
        let line = serde_json::to_string(&CanonicalRecord::from_trajectory(traj))
            .expect("trajectory records always serialize");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

fn parse_porto_csv(path: &Path) -> Result<ParsedDataset, IngestError> {
    let csv_err = |source| IngestError::Csv { path: path.to_path_buf(), source };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let polyline_col = headers
        .iter()
        .position(|h| h.trim() == "POLYLINE")
        .unwrap_or(headers.len().saturating_sub(1));
    let id_col = headers.iter().position(|h| h.trim() == "TRIP_ID").unwrap_or(0);
    let time_col = headers.iter().position(|h| h.trim() == "TIMESTAMP");

    let mut trajectories = Vec::new();
    let mut skipped = 0;
    for record in reader.records() {
        let Ok(record) = record else {
            skipped += 1;
            continue;
        };
        let parsed = (|| {
            let id = record.get(id_col)?.trim();
            let coords: Vec<[f64; 2]> = serde_json::from_str(record.get(polyline_col)?).ok()?;
            let start = time_col
                .and_then(|c| record.get(c))
                .and_then(|s| s.trim().parse::<f64>().ok());
            let points = coords
                .iter()
                .enumerate()
                .map(|(k, &[lon, lat])| RawPoint {
                    lon,
                    lat,
                    t: start.map(|t0| t0 + PORTO_SAMPLE_SECS * k as f64),
                })
                .collect();
            let traj = Trajectory::new(id, points);
            (!id.is_empty() && traj.is_valid()).then_some(traj)
        })();
        match parsed {
            Some(traj) => trajectories.push(traj),
            None => skipped += 1,
        }
    }
    Ok(ParsedDataset { trajectories, skipped })
}

/// Accepts either one `.plt` file or a directory searched recursively for them.
fn parse_geolife(path: &Path) -> Result<ParsedDataset, IngestError> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut files: Vec<PathBuf> = walkdir::WalkDir::new(path)
            .into_iter()
            .filter_map(Result::ok)
            .filter(|e| {
                e.file_type().is_file()
                    && e.path().extension().is_some_and(|x| x.eq_ignore_ascii_case("plt"))
            })
            .map(|e| e.into_path())
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };

    let mut trajectories = Vec::new();
    let mut skipped = 0;
    for file in files {
        let reader = BufReader::new(File::open(&file).map_err(io_err(&file))?);
        let mut points = Vec::new();
        for line in reader.lines().skip(6) {
            let line = line.map_err(io_err(&file))?;
            if line.trim().is_empty() {
                continue;
            }
            match parse_plt_line(&line) {
                Some(p) => points.push(p),
                None => skipped += 1,
            }
        }
        let id = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let traj = Trajectory::new(id, points);
        if traj.is_valid() {
            trajectories.push(traj);
        } else {
            skipped += 1;
        }
    }
    Ok(ParsedDataset { trajectories, skipped })
}

fn parse_plt_line(line: &str) -> Option<RawPoint> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() < 5 {
        return None;
    }
    let lat = fields[0].parse().ok()?;
    let lon = fields[1].parse().ok()?;
    let days: f64 = fields[4].parse().ok()?;
    let p = RawPoint::with_time(lon, lat, (days - OLE_TO_UNIX_DAYS) * 86_400.0);
    p.is_valid().then_some(p)
}

/// Keeps trajectories with at least `min_points` points, in input order.
pub fn filter_by_length(trajs: Vec<Trajectory>, min_points: usize) -> Vec<Trajectory> {
    trajs.into_iter().filter(|t| t.len() >= min_points).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub cell_size_m: f64,
}

impl GridSpec {
    pub fn new(origin_lon: f64, origin_lat: f64, cell_size_m: f64) -> Result<Self, IngestError> {
        if !(cell_size_m > 0.0 && cell_size_m.is_finite()) {
            return Err(IngestError::BadCellSize(cell_size_m));
        }
        Ok(Self { origin_lon, origin_lat, cell_size_m })
    }

    /// Grid anchored at the south-west corner of the dataset bounding box.
    pub fn covering(trajs: &[Trajectory], cell_size_m: f64) -> Result<Self, IngestError> {
        let mut points = trajs.iter().flat_map(|t| &t.points);
        let first = points.next().ok_or(IngestError::NothingToGrid)?;
        let (lon, lat) = points.fold((first.lon, first.lat), |(lon, lat), p| {
            (lon.min(p.lon), lat.min(p.lat))
        });
        Self::new(lon, lat, cell_size_m)
    }

    /// Equirectangular projection to meters east/north of the origin.
    pub fn project(&self, lon: f64, lat: f64) -> Point {
        let east = (lon - self.origin_lon) * self.origin_lat.to_radians().cos() * METERS_PER_DEG_LON;
        let north = (lat - self.origin_lat) * METERS_PER_DEG_LAT;
        [east, north]
    }

    pub fn cell_of(&self, p: Point) -> (i64, i64) {
        (
            (p[0] / self.cell_size_m).floor() as i64,
            (p[1] / self.cell_size_m).floor() as i64,
        )
    }

    pub fn cell_center(&self, (col, row): (i64, i64)) -> Point {
        [
            (col as f64 + 0.5) * self.cell_size_m,
            (row as f64 + 0.5) * self.cell_size_m,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GriddedTrajectory {
    pub id: String,
    pub cells: Vec<(i64, i64)>,
    pub centroids: Vec<Point>,
}

/// Snaps every point to its grid cell, collapsing consecutive repeats of the same cell.
pub fn grid_trajectories(
    trajs: &[Trajectory],
    spec: &GridSpec,
) -> Result<Vec<GriddedTrajectory>, IngestError> {
    if trajs.is_empty() {
        return Err(IngestError::NothingToGrid);
    }
    trajs
        .iter()
        .map(|traj| {
            let mut cells: Vec<(i64, i64)> = Vec::with_capacity(traj.len());
            for (index, p) in traj.points.iter().enumerate() {
                let cell = spec.cell_of(spec.project(p.lon, p.lat));
                if cell.0 < 0 || cell.1 < 0 {
                    return Err(IngestError::OutsideGrid { id: traj.id.clone(), index });
                }
                if cells.last() != Some(&cell) {
                    cells.push(cell);
                }
            }
            let centroids = cells.iter().map(|&c| spec.cell_center(c)).collect();
            Ok(GriddedTrajectory { id: traj.id.clone(), cells, centroids })
        })
        .collect()
}

pub fn write_gridded_jsonl(path: &Path, trajs: &[GriddedTrajectory]) -> Result<(), IngestError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for traj in trajs {
        let line = serde_json::to_string(traj).expect("gridded records always serialize");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn read_gridded_jsonl(path: &Path) -> Result<Vec<GriddedTrajectory>, IngestError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut trajs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: GriddedTrajectory = serde_json::from_str(&line).map_err(|e| IngestError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("line {}: {e}", lineno + 1),
            ),
        })?;
        trajs.push(traj);
    }
    if trajs.is_empty() {
        return Err(IngestError::Empty(path.to_path_buf()));
    }
    Ok(trajs)
}
