//! Exhaustive sweeps over (patch length, horizon, width) with append-only
//! JSON-lines results, so an interrupted sweep picks up where it stopped.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{ExpError, Result};
use crate::metrics::MetricsRecord;
use crate::pipeline::run_experiment;
use crate::plots::{write_heatmap, Heatmap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub patch_lens: Vec<usize>,
    pub horizons: Vec<usize>,
    pub d_models: Vec<usize>,
    /// Each cell uses a context of `context_multiple · p` steps.
    pub context_multiple: usize,
}

impl GridSpec {
    /// p ∈ {80, …, 130}, H ∈ {10, …, 30}, one width, P = 2p.
    pub fn patch_horizon(d_model: usize) -> Self {
        Self {
            patch_lens: vec![80, 90, 100, 110, 120, 130],
            horizons: vec![10, 15, 20, 25, 30],
            d_models: vec![d_model],
            context_multiple: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_lens.is_empty() || self.horizons.is_empty() || self.d_models.is_empty() {
            return Err(ExpError::Config("every grid axis needs at least one value".into()));
        }
        if self.context_multiple == 0 {
            return Err(ExpError::Config("context multiple must be positive".into()));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.patch_lens.len() * self.horizons.len() * self.d_models.len()
    }

    /// Cells in table order: width, then horizon, then patch length.
    pub fn cells(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.cell_count());
        for &d in &self.d_models {
            for &h in &self.horizons {
                for &p in &self.patch_lens {
                    out.push((p, h, d));
                }
            }
        }
        out
    }
}

/// Independent, reproducible seed for one cell.
pub fn cell_seed(base_seed: u64, patch_len: usize, horizon: usize, d_model: usize) -> u64 {
    let mut hasher = Sha256::new();
    for v in [base_seed, patch_len as u64, horizon as u64, d_model as u64] {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn cell_config(base: &ExperimentConfig, spec: &GridSpec, patch_len: usize, horizon: usize, d_model: usize) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.patch_len = patch_len;
    cfg.horizon = horizon;
    cfg.d_model = d_model;
    cfg.context_len = spec.context_multiple * patch_len;
    cfg.seed = cell_seed(base.seed, patch_len, horizon, d_model);
    cfg.output_dir = base
        .output_dir
        .as_ref()
        .map(|dir| dir.join(format!("cell_p{patch_len}_h{horizon}_d{d_model}")));
    cfg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Completed { train: MetricsRecord, test: MetricsRecord },
    Failed { error: String, exit_code: i32 },
}

/// One line of the results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub patch_len: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub context_len: usize,
    pub seed: u64,
    pub fingerprint: String,
    pub outcome: CellOutcome,
}

impl GridCell {
    pub fn test_record(&self) -> Option<&MetricsRecord> {
        match &self.outcome {
            CellOutcome::Completed { test, .. } => Some(test),
            CellOutcome::Failed { .. } => None,
        }
    }

    /// Equal up to wall-clock times.
    pub fn same_outcome(&self, other: &GridCell) -> bool {
        let head = |c: &GridCell| (c.patch_len, c.horizon, c.d_model, c.context_len, c.seed, c.fingerprint.clone());
        if head(self) != head(other) {
            return false;
        }
        match (&self.outcome, &other.outcome) {
            (CellOutcome::Completed { train: a, test: b }, CellOutcome::Completed { train: c, test: d }) => {
                a.same_outcome(c) && b.same_outcome(d)
            }
            (a, b) => a == b,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GridOptions {
    /// JSON-lines file; existing cells in it are reused.
    pub results: PathBuf,
    /// Fault injection: stop with [`ExpError::Interrupted`] once this many
    /// cells have been newly computed.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Mse,
    Mae,
}

#[derive(Clone, Debug)]
pub struct GridTable {
    pub spec: GridSpec,
    /// In [`GridSpec::cells`] order regardless of execution order.
    pub cells: Vec<GridCell>,
    pub computed: usize,
    pub reused: usize,
}

impl GridTable {
    pub fn cell(&self, patch_len: usize, horizon: usize, d_model: usize) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| c.patch_len == patch_len && c.horizon == horizon && c.d_model == d_model)
    }

    fn value(&self, metric: Metric, p: usize, h: usize, d: usize) -> Option<f64> {
        self.cell(p, h, d).and_then(GridCell::test_record).map(|r| match metric {
            Metric::Mse => r.mse,
            Metric::Mae => r.mae,
        })
    }

    /// Test metric with horizons as rows and patch lengths as columns, at one width.
    pub fn heatmap_by_patch(&self, metric: Metric, d_model: usize) -> Heatmap {
        let s = &self.spec;
        Heatmap {
            row_label: "H".into(),
            col_label: "p".into(),
            rows: s.horizons.clone(),
            cols: s.patch_lens.clone(),
            cells: s
                .horizons
                .iter()
                .map(|&h| s.patch_lens.iter().map(|&p| self.value(metric, p, h, d_model)).collect())
                .collect(),
        }
    }

    /// Test metric with horizons as rows and widths as columns, at one patch length.
    pub fn heatmap_by_width(&self, metric: Metric, patch_len: usize) -> Heatmap {
        let s = &self.spec;
        Heatmap {
            row_label: "H".into(),
            col_label: "d_model".into(),
            rows: s.horizons.clone(),
            cols: s.d_models.clone(),
            cells: s
                .horizons
                .iter()
                .map(|&h| s.d_models.iter().map(|&d| self.value(metric, patch_len, h, d)).collect())
                .collect(),
        }
    }
}

/// Heatmap CSVs for MSE and MAE. Width sweeps with a single patch length are
/// laid out by width; otherwise one file per width, laid out by patch length.
pub fn emit_grid_plots(table: &GridTable, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| ExpError::io(dir, e))?;
    let s = &table.spec;
    let mut paths = Vec::new();
    for (metric, name) in [(Metric::Mse, "mse"), (Metric::Mae, "mae")] {
        if s.d_models.len() > 1 && s.patch_lens.len() == 1 {
            let path = dir.join(format!("heatmap_{name}.csv"));
            write_heatmap(&path, &table.heatmap_by_width(metric, s.patch_lens[0]))?;
            paths.push(path);
        } else if s.d_models.len() == 1 {
            let path = dir.join(format!("heatmap_{name}.csv"));
            write_heatmap(&path, &table.heatmap_by_patch(metric, s.d_models[0]))?;
            paths.push(path);
        } else {
            for &d in &s.d_models {
                let path = dir.join(format!("heatmap_{name}_d{d}.csv"));
                write_heatmap(&path, &table.heatmap_by_patch(metric, d))?;
                paths.push(path);
            }
        }
    }
    Ok(paths)
}

/// Reads every complete line; a torn final line from an interrupted write is
/// cut off so later appends start on a fresh line.
pub fn load_results(path: &Path) -> Result<Vec<GridCell>> {
    let mut text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(ExpError::io(path, e)),
    };
    if !text.is_empty() && !text.ends_with('\n') {
        let keep = text.rfind('\n').map_or(0, |i| i + 1);
        text.truncate(keep);
        std::fs::write(path, &text).map_err(|e| ExpError::io(path, e))?;
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ExpError::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

fn append_line(path: &Path, cell: &GridCell) -> Result<()> {
    let mut line = serde_json::to_string(cell).expect("cell serializes");
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| ExpError::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| ExpError::io(path, e))?;
    f.sync_data().map_err(|e| ExpError::io(path, e))
}

/// Runs every cell not already in the results file. A failing cell is
/// recorded and the sweep continues.
pub fn grid_search(base: &ExperimentConfig, spec: &GridSpec, opts: &GridOptions) -> Result<GridTable> {
    spec.validate()?;
    if let Some(parent) = opts.results.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| ExpError::io(parent, e))?;
    }
    let mut done: HashMap<String, GridCell> = load_results(&opts.results)?
        .into_iter()
        .map(|c| (c.fingerprint.clone(), c))
        .collect();

    let mut table = GridTable {
        spec: spec.clone(),
        cells: Vec::with_capacity(spec.cell_count()),
        computed: 0,
        reused: 0,
    };
    for (p, h, d) in spec.cells() {
        let cfg = cell_config(base, spec, p, h, d);
        let fingerprint = cfg.fingerprint();
        if let Some(cell) = done.remove(&fingerprint) {
            table.cells.push(cell);
            table.reused += 1;
            continue;
        }
        if opts.stop_after == Some(table.computed) {
            return Err(ExpError::Interrupted(table.computed));
        }
        let outcome = match run_experiment(&cfg) {
            Ok(run) => CellOutcome::Completed {
                train: run.train,
                test: run.test,
            },
            Err(e) => CellOutcome::Failed {
                error: e.to_string(),
                exit_code: e.exit_code(),
            },
        };
        let cell = GridCell {
            patch_len: p,
            horizon: h,
            d_model: d,
            context_len: cfg.context_len,
            seed: cfg.seed,
            fingerprint,
            outcome,
        };
        append_line(&opts.results, &cell)?;
        table.cells.push(cell);
        table.computed += 1;
    }
    Ok(table)
}
