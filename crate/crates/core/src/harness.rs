//! Experiment plumbing: metric reports, cached spectral bases, and sweeps over
//! train fractions and seeds.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GesfError, Result};
use crate::graph::{load_graph, make_split, Graph, LabelMode, Split};
use crate::model::{evaluate, train_with_basis, ConfigPatch, GesfModel, TrainConfig};
use crate::spectral::{eigh_truncated_with, matrix_hash, normalized_adjacency, SpectralBasis};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub fraction: f64,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// Mean and unbiased standard deviation of one (dataset, fraction, metric) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dataset: String,
    pub fraction: f64,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

/// A grid cell that did not produce metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub dataset: String,
    pub fraction: f64,
    pub seed: u64,
    pub class: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub aggregates: Vec<Aggregate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<CellFailure>,
}

/// `(mean, std)` with the `n - 1` denominator; a single value has std 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl MetricsReport {
    /// Builds the report and its aggregates; rows keep their order.
    pub fn from_rows(rows: Vec<MetricsRow>, failures: Vec<CellFailure>) -> Self {
        let mut groups: BTreeMap<(String, u64, String), Vec<f64>> = BTreeMap::new();
        let mut order = Vec::new();
        for r in &rows {
            let key = (r.dataset.clone(), r.fraction.to_bits(), r.metric.clone());
            let entry = groups.entry(key.clone()).or_default();
            if entry.is_empty() {
                order.push(key);
            }
            entry.push(r.value);
        }
        let aggregates = order
            .into_iter()
            .map(|key| {
                let values = &groups[&key];
                let (mean, std) = mean_std(values);
                Aggregate {
                    dataset: key.0,
                    fraction: f64::from_bits(key.1),
                    metric: key.2,
                    n: values.len(),
                    mean,
                    std,
                }
            })
            .collect();
        MetricsReport {
            rows,
            aggregates,
            failures,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,fraction,seed,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                csv_field(&r.dataset),
                r.fraction,
                r.seed,
                csv_field(&r.metric),
                r.value
            );
        }
        out
    }

    /// Writes `metrics.json` and `metrics.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| GesfError::io(dir, e))?;
        let json = dir.join("metrics.json");
        std::fs::write(&json, self.to_json()?).map_err(|e| GesfError::io(&json, e))?;
        let csv = dir.join("metrics.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| GesfError::io(&csv, e))
    }

    /// One line per aggregate: `dataset fraction metric mean ± std (n)`.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for a in &self.aggregates {
            let _ = writeln!(
                out,
                "{:<16} {:>5.2} {:<10} {:>7.2} ± {:.2} (n={})",
                a.dataset,
                a.fraction,
                a.metric,
                100.0 * a.mean,
                100.0 * a.std,
                a.n
            );
        }
        out
    }
}

/// Spectral bases kept in memory and, optionally, as JSON files in a directory.
#[derive(Debug, Default)]
pub struct BasisCache {
    dir: Option<PathBuf>,
    memory: HashMap<String, SpectralBasis>,
}

impl BasisCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Self {
        BasisCache {
            dir: Some(dir.into()),
            memory: HashMap::new(),
        }
    }

    /// Returns the basis for `g` under `cfg`, computing it only on a miss.
    pub fn get(&mut self, g: &Graph, cfg: &TrainConfig) -> Result<SpectralBasis> {
        let mut a = g.adjacency();
        if cfg.normalize_adjacency {
            a = normalized_adjacency(&a);
        }
        let hash = matrix_hash(&a);
        let opts = cfg.spectral_options();
        let key = format!(
            "{}-r{}-{}-{}",
            &hash[..16],
            cfg.rank,
            serde_json::to_value(opts.selection)?.as_str().unwrap_or("sel"),
            serde_json::to_value(opts.solver)?.as_str().unwrap_or("solver"),
        );
        if let Some(b) = self.memory.get(&key) {
            return Ok(b.clone());
        }
        let file = self.dir.as_ref().map(|d| d.join(format!("basis-{key}.json")));
        if let Some(path) = file.as_ref().filter(|p| p.exists()) {
            let b = SpectralBasis::load(path)?;
            if b.source_hash == hash && b.rank() == cfg.rank && b.node_count() == g.node_count() {
                self.memory.insert(key, b.clone());
                return Ok(b);
            }
        }
        let b = eigh_truncated_with(&a, cfg.rank, opts)?;
        if let (Some(dir), Some(path)) = (&self.dir, &file) {
            std::fs::create_dir_all(dir).map_err(|e| GesfError::io(dir, e))?;
            b.save(path)?;
        }
        self.memory.insert(key, b.clone());
        Ok(b)
    }
}

/// Input files of one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub name: String,
    pub edges: PathBuf,
    pub types: Option<PathBuf>,
    pub labels: PathBuf,
    pub mode: LabelMode,
}

impl DatasetPaths {
    pub fn load(&self) -> Result<Graph> {
        load_graph(&self.edges, self.types.as_deref(), &self.labels, self.mode)
    }
}

/// A fractions x seeds grid over one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dataset: DatasetPaths,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub overrides: ConfigPatch,
    pub out: PathBuf,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.fractions.is_empty() {
            return Err(GesfError::Config("fractions and seeds must be non-empty".into()));
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
            return Err(GesfError::Config(format!("fraction {f} outside (0, 1)")));
        }
        Ok(())
    }
}

/// Effective configuration for one cell.
pub fn cell_config(g: &Graph, overrides: &ConfigPatch, seed: u64) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::defaults(g, g.mode());
    overrides.apply(&mut cfg);
    cfg.seed = seed;
    cfg.validate(g)?;
    Ok(cfg)
}

/// Outcome of one trained and evaluated cell.
pub struct CellResult {
    pub model: GesfModel,
    pub split: Split,
    pub history: Vec<f64>,
    pub metrics: Vec<(String, f64)>,
}

pub fn run_cell(
    g: &Graph,
    cache: &mut BasisCache,
    cfg: &TrainConfig,
    fraction: f64,
) -> Result<CellResult> {
    let split = make_split(g, fraction, cfg.seed)?;
    let basis = cache.get(g, cfg)?;
    let (model, history) = train_with_basis(g, &basis, &split, cfg)?;
    let metrics = evaluate(&model, g, &split, cfg.mode)?;
    Ok(CellResult {
        model,
        split,
        history,
        metrics,
    })
}

/// Trains and evaluates every cell; failing cells are recorded, not fatal.
pub fn sweep_graph(
    name: &str,
    g: &Graph,
    fractions: &[f64],
    seeds: &[u64],
    overrides: &ConfigPatch,
    cache: &mut BasisCache,
) -> MetricsReport {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &fraction in fractions {
        for &seed in seeds {
            let outcome = cell_config(g, overrides, seed)
                .and_then(|cfg| run_cell(g, cache, &cfg, fraction));
            match outcome {
                Ok(cell) => rows.extend(cell.metrics.into_iter().map(|(metric, value)| MetricsRow {
                    dataset: name.to_string(),
                    fraction,
                    seed,
                    metric,
                    value,
                })),
                Err(e) => failures.push(CellFailure {
                    dataset: name.to_string(),
                    fraction,
                    seed,
                    class: e.class().to_string(),
                    message: e.to_string(),
                }),
            }
        }
    }
    MetricsReport::from_rows(rows, failures)
}

/// Loads the dataset, runs the grid, and writes the report into `spec.out`.
pub fn sweep(spec: &ExperimentSpec) -> Result<MetricsReport> {
    spec.validate()?;
    let g = spec.dataset.load()?;
    let mut cache = BasisCache::on_disk(spec.out.join("cache"));
    let report = sweep_graph(
        &spec.dataset.name,
        &g,
        &spec.fractions,
        &spec.seeds,
        &spec.overrides,
        &mut cache,
    );
    report.write(&spec.out)?;
    Ok(report)
}
