use std::path::{Path, PathBuf};

use clap::Args;
use trajsim::distance::DistanceKind;
use trajsim::gnn::OptimizerKind;
use trajsim::ingest::DatasetFormat;
use trajsim::pipeline::PipelineConfig;

use crate::error::Failure;

/// Flags shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Global {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out_dir: PathBuf,
}

/// Per-run overrides of the configuration file; a flag that is present wins.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// porto_csv, geolife_plt or canonical_jsonl.
    #[arg(long)]
    pub format: Option<DatasetFormat>,
    #[arg(long)]
    pub min_points: Option<usize>,
    #[arg(long)]
    pub cell_size_m: Option<f64>,
    /// frechet or hausdorff.
    #[arg(long)]
    pub distance: Option<DistanceKind>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub c0_percentile: Option<f64>,
    #[arg(long)]
    pub single_scale: bool,
    #[arg(long)]
    pub no_sequential_connection: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// sgd or adam.
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub eval_fraction: Option<f64>,
}

pub fn load_file(path: &Path) -> Result<PipelineConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str::<serde_json::Value>(&text)
            .and_then(|mut v| {
                // A `.meta.json` sidecar wraps the configuration next to the command name.
                if v.get("command").is_some() {
                    if let Some(inner) = v.get_mut("config") {
                        v = inner.take();
                    }
                }
                serde_json::from_value(v)
            })
            .map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Failure::BadInput(format!("{}: {e}", path.display())))
}

/// Configuration file (or defaults), then global flags, then command flags.
pub fn resolve(global: &Global, o: &Overrides) -> Result<PipelineConfig, Failure> {
    let mut c = match &global.config {
        Some(path) => load_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = global.seed {
        c.seed = v;
    }
    if let Some(v) = global.workers {
        c.workers = v;
    }
    if let Some(v) = &o.input {
        c.input = Some(v.clone());
    }
    if let Some(v) = o.format {
        c.format = v;
    }
    if let Some(v) = o.min_points {
        c.min_points = v;
    }
    if let Some(v) = o.cell_size_m {
        c.cell_size_m = v;
    }
    if let Some(v) = o.distance {
        c.distance = v;
    }
    if let Some(v) = o.layers {
        c.layers = v;
    }
    if let Some(v) = o.c0_percentile {
        c.c0_percentile = v;
    }
    c.single_scale |= o.single_scale;
    c.no_sequential_connection |= o.no_sequential_connection;
    if let Some(v) = o.epochs {
        c.train.epochs = v;
    }
    if let Some(v) = o.lr {
        c.train.lr = v;
    }
    if let Some(v) = o.optimizer {
        c.train.optimizer = v;
    }
    if let Some(v) = o.steps_per_epoch {
        c.train.steps_per_epoch = v;
    }
    if let Some(v) = o.eval_fraction {
        c.eval_fraction = v;
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn global(config: Option<PathBuf>) -> Global {
        Global { config, seed: None, workers: None, out_dir: PathBuf::from("out") }
    }

    #[test]
    fn defaults_without_file_or_flags() {
        assert_eq!(resolve(&global(None), &Overrides::default()).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 1\nlayers = 2\n[train]\nlr = 0.5\nepochs = 9\n").unwrap();
        let g = Global { seed: Some(7), ..global(Some(path)) };
        let o = Overrides { lr: Some(0.25), single_scale: true, ..Overrides::default() };
        let c = resolve(&g, &o).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.layers, 2);
        assert!(c.single_scale);
        assert_eq!(c.train.lr, 0.25);
        assert_eq!(c.train.epochs, 9);
    }

    #[test]
    fn json_config_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"distance": "hausdorff"}"#).unwrap();
        let c = load_file(&path).unwrap();
        assert_eq!(c.distance, DistanceKind::Hausdorff);
    }
}
