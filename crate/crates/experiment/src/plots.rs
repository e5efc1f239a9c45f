//! Plain CSV plot data; nothing here renders.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use koopcast_core::train::TrainingTrace;

use crate::error::{ExpError, Result};
use crate::pipeline::{PredictionDump, RunOutput, EIGEN_TRACE_FILE};

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| ExpError::io(path, e))
}

fn file_stem(channel: &str) -> String {
    channel
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// One CSV per channel with columns `window,step,t,truth,prediction`.
pub fn write_predictions(dir: &Path, dump: &PredictionDump) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(dump.channel_names.len());
    for (c, name) in dump.channel_names.iter().enumerate() {
        let mut text = String::from("window,step,t,truth,prediction\n");
        for (w, (pred, truth)) in dump.y_hat.iter().zip(&dump.y).enumerate() {
            for step in 0..dump.horizon {
                let _ = writeln!(
                    text,
                    "{w},{step},{},{},{}",
                    dump.time_index(w, step),
                    truth[(step, c)],
                    pred[(step, c)]
                );
            }
        }
        let path = dir.join(format!("predictions_{}.csv", file_stem(name)));
        write_file(&path, &text)?;
        paths.push(path);
    }
    Ok(paths)
}

/// `epoch,spectral_radius`, one row per epoch.
pub fn write_eigen_trace(path: &Path, trace: &TrainingTrace) -> Result<()> {
    let mut text = String::from("epoch,spectral_radius\n");
    for r in &trace.records {
        let _ = writeln!(text, "{},{}", r.epoch, r.spectral_radius);
    }
    write_file(path, &text)
}

/// Reads back a trace written by [`write_eigen_trace`] or the full training trace CSV.
pub fn read_eigen_trace(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| ExpError::io(path, e))?;
    let bad = |line: usize, message: String| ExpError::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let col = header
        .iter()
        .position(|h| *h == "spectral_radius")
        .ok_or_else(|| bad(1, "no spectral_radius column".into()))?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        let epoch = fields[0].parse().map_err(|e| bad(i + 2, format!("{e}")))?;
        let radius = fields
            .get(col)
            .ok_or_else(|| bad(i + 2, "missing field".into()))?
            .parse()
            .map_err(|e| bad(i + 2, format!("{e}")))?;
        out.push((epoch, radius));
    }
    Ok(out)
}

/// A metric laid out with horizons as rows and a swept width-like value as columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub row_label: String,
    pub col_label: String,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    /// `cells[row][col]`; `None` for a failed cell.
    pub cells: Vec<Vec<Option<f64>>>,
}

pub fn write_heatmap(path: &Path, map: &Heatmap) -> Result<()> {
    let mut text = format!("{}\\{}", map.row_label, map.col_label);
    for c in &map.cols {
        let _ = write!(text, ",{c}");
    }
    text.push('\n');
    for (r, row) in map.rows.iter().zip(&map.cells) {
        let _ = write!(text, "{r}");
        for cell in row {
            match cell {
                Some(v) => {
                    let _ = write!(text, ",{v}");
                }
                None => text.push(','),
            }
        }
        text.push('\n');
    }
    write_file(path, &text)
}

/// Per-channel predictions and the eigenvalue trace of one run.
pub fn emit_plot_data(run: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| ExpError::io(dir, e))?;
    let mut paths = write_predictions(dir, &run.predictions)?;
    let trace = dir.join(EIGEN_TRACE_FILE);
    write_eigen_trace(&trace, &run.trace)?;
    paths.push(trace);
    Ok(paths)
}
