use std::fmt;

use koopcast_core::encoder::Variant;
use koopcast_core::linalg::Matrix;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{ExpError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// Entry-wise mean squared and absolute error over all windows, steps and channels.
pub fn compute_metrics(y_hat: &[Matrix], y: &[Matrix]) -> Result<Metrics> {
    if y_hat.len() != y.len() {
        return Err(ExpError::Shape(format!(
            "{} predictions for {} targets",
            y_hat.len(),
            y.len()
        )));
    }
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut count = 0usize;
    for (i, (a, b)) in y_hat.iter().zip(y).enumerate() {
        if a.shape() != b.shape() {
            return Err(ExpError::Shape(format!(
                "window {i}: prediction {:?} vs target {:?}",
                a.shape(),
                b.shape()
            )));
        }
        for (p, t) in a.as_slice().iter().zip(b.as_slice()) {
            let e = p - t;
            sq += e * e;
            abs += e.abs();
        }
        count += a.as_slice().len();
    }
    if count == 0 {
        return Err(ExpError::Shape("no entries to score".into()));
    }
    Ok(Metrics {
        mse: sq / count as f64,
        mae: abs / count as f64,
    })
}

/// One scored split of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub fingerprint: String,
    pub split: Split,
    pub variant: Variant,
    pub context_len: usize,
    pub patch_len: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub seed: u64,
    pub epochs: usize,
    pub mse: f64,
    pub mae: f64,
    pub wall_seconds: f64,
    /// Power-iteration norm of the final operator.
    pub final_spectral_radius: f64,
    /// Where the per-epoch spectral trace was written, if anywhere.
    pub trace_file: Option<String>,
}

impl MetricsRecord {
    pub fn new(cfg: &ExperimentConfig, split: Split, metrics: Metrics, wall_seconds: f64, radius: f64) -> Self {
        Self {
            fingerprint: cfg.fingerprint(),
            split,
            variant: cfg.variant,
            context_len: cfg.context_len,
            patch_len: cfg.patch_len,
            horizon: cfg.horizon,
            d_model: cfg.d_model,
            seed: cfg.seed,
            epochs: cfg.epochs,
            mse: metrics.mse,
            mae: metrics.mae,
            wall_seconds,
            final_spectral_radius: radius,
            trace_file: None,
        }
    }

    /// Bitwise equality on everything except the wall-clock time.
    pub fn same_outcome(&self, other: &MetricsRecord) -> bool {
        let timeless = |r: &MetricsRecord| MetricsRecord {
            wall_seconds: 0.0,
            ..r.clone()
        };
        let (a, b) = (timeless(self), timeless(other));
        a == b
            && a.mse.to_bits() == b.mse.to_bits()
            && a.mae.to_bits() == b.mae.to_bits()
            && a.final_spectral_radius.to_bits() == b.final_spectral_radius.to_bits()
    }
}
