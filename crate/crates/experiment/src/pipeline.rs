//! Load or simulate, split, scale, window, train, evaluate, persist.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use koopcast_core::data::{load_csv, make_windows, simulate, train_test_split, MinMaxScaler, TimeSeries, WindowBatch};
use koopcast_core::forecaster::KoopmanForecaster;
use koopcast_core::linalg::{spectral_norm, Matrix};
use koopcast_core::train::{train, TrainingTrace};
use koopcast_core::Error as CoreError;

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{ExpError, Result};
use crate::metrics::{compute_metrics, Metrics, MetricsRecord, Split};
use crate::plots;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRACE_FILE: &str = "trace.csv";
pub const EIGEN_TRACE_FILE: &str = "eigen_trace.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: WindowBatch,
    pub test: WindowBatch,
    pub scaler: Option<MinMaxScaler>,
    pub channel_names: Vec<String>,
    /// Index of the first test step in the full series.
    pub test_offset: usize,
}

pub fn load_series(source: &DataSource) -> Result<TimeSeries> {
    Ok(match source {
        DataSource::Simulator(sim) => simulate(sim)?,
        DataSource::Csv { path, columns } => load_csv(path, columns, None)?,
    })
}

/// Chronological split, scaler fit on the training side only, then windows
/// per side.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let series = load_series(&cfg.data)?;
    let (train_s, test_s) = train_test_split(&series, cfg.split_fraction)?;
    let test_offset = train_s.len();
    let (train_s, test_s, scaler) = if cfg.scale {
        let sc = MinMaxScaler::fitted(&train_s.values);
        (sc.transform_series(&train_s)?, sc.transform_series(&test_s)?, Some(sc))
    } else {
        (train_s, test_s, None)
    };
    let windows = |s: &TimeSeries, side: &str| {
        make_windows(s, cfg.context_len, cfg.horizon)
            .map_err(|e| CoreError::TooShort(format!("{side} split: {e}")))
    };
    Ok(PreparedData {
        train: windows(&train_s, "training")?,
        test: windows(&test_s, "test")?,
        scaler,
        channel_names: series.channel_names.clone(),
        test_offset,
    })
}

/// Test-split forecasts next to the truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionDump {
    pub channel_names: Vec<String>,
    pub context_len: usize,
    pub horizon: usize,
    /// Index of the first test step in the full series.
    pub offset: usize,
    /// Window start within the test split.
    pub starts: Vec<usize>,
    pub y_hat: Vec<Matrix>,
    pub y: Vec<Matrix>,
}

impl PredictionDump {
    /// Series index of forecast step `step` of window `w`.
    pub fn time_index(&self, w: usize, step: usize) -> usize {
        self.offset + self.starts[w] + self.context_len + step
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub train: MetricsRecord,
    pub test: MetricsRecord,
    pub trace: TrainingTrace,
    pub predictions: PredictionDump,
    pub model: KoopmanForecaster,
}

/// Forecasts every window and scores them, optionally in original units.
pub fn evaluate(
    model: &KoopmanForecaster,
    windows: &WindowBatch,
    scaler: Option<&MinMaxScaler>,
    inverse: bool,
) -> Result<(Metrics, Vec<Matrix>, Vec<Matrix>)> {
    let mut y_hat = windows
        .x
        .iter()
        .map(|x| model.forward(x).map(|o| o.y_hat))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut y = windows.y.clone();
    if let (true, Some(sc)) = (inverse, scaler) {
        y_hat = y_hat.iter().map(|m| sc.inverse(m)).collect::<std::result::Result<_, _>>()?;
        y = y.iter().map(|m| sc.inverse(m)).collect::<std::result::Result<_, _>>()?;
    }
    let metrics = compute_metrics(&y_hat, &y)?;
    if !(metrics.mse.is_finite() && metrics.mae.is_finite()) {
        return Err(CoreError::NonFinite("forecast metrics".into()).into());
    }
    Ok((metrics, y_hat, y))
}

pub fn final_spectral_radius(model: &KoopmanForecaster) -> Result<f64> {
    Ok(spectral_norm(&model.koopman.materialize()?.k)?)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let fingerprint = cfg.fingerprint();
    let tag = |e: ExpError| match e {
        ExpError::Core(source) => ExpError::Run {
            fingerprint: fingerprint.clone(),
            source,
        },
        other => other,
    };
    let run = run_inner(cfg).map_err(tag)?;
    if let Some(dir) = &cfg.output_dir {
        persist(&run, dir)?;
    }
    Ok(run)
}

fn run_inner(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let data = prepare_data(cfg)?;
    let mut model = KoopmanForecaster::init(cfg.model_config(data.train.channels()), cfg.seed)?;

    let started = Instant::now();
    let trace = train(&mut model, &data.train, &cfg.training_config())?;
    let radius = final_spectral_radius(&model)?;
    let (train_metrics, _, _) = evaluate(&model, &data.train, data.scaler.as_ref(), cfg.report_inverse)?;
    let train_seconds = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let (test_metrics, y_hat, y) = evaluate(&model, &data.test, data.scaler.as_ref(), cfg.report_inverse)?;
    let test_seconds = started.elapsed().as_secs_f64();

    let mut train_rec = MetricsRecord::new(cfg, Split::Train, train_metrics, train_seconds, radius);
    let mut test_rec = MetricsRecord::new(cfg, Split::Test, test_metrics, test_seconds, radius);
    if cfg.output_dir.is_some() {
        train_rec.trace_file = Some(EIGEN_TRACE_FILE.into());
        test_rec.trace_file = Some(EIGEN_TRACE_FILE.into());
    }
    Ok(RunOutput {
        config: cfg.clone(),
        train: train_rec,
        test: test_rec,
        trace,
        predictions: PredictionDump {
            channel_names: data.channel_names,
            context_len: cfg.context_len,
            horizon: cfg.horizon,
            offset: data.test_offset,
            starts: data.test.starts.clone(),
            y_hat,
            y,
        },
        model,
    })
}

/// Scores a saved model on the data its config describes.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, model: &KoopmanForecaster) -> Result<(MetricsRecord, MetricsRecord)> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let expected = cfg.model_config(data.train.channels());
    if model.config != expected {
        return Err(ExpError::Config(
            "checkpoint model configuration does not match the experiment configuration".into(),
        ));
    }
    let radius = final_spectral_radius(model)?;
    let mut out = Vec::with_capacity(2);
    for (split, windows) in [(Split::Train, &data.train), (Split::Test, &data.test)] {
        let started = Instant::now();
        let (metrics, _, _) = evaluate(model, windows, data.scaler.as_ref(), cfg.report_inverse)?;
        out.push(MetricsRecord::new(cfg, split, metrics, started.elapsed().as_secs_f64(), radius));
    }
    let test = out.pop().expect("two records");
    let train = out.pop().expect("two records");
    Ok((train, test))
}

/// Writes config, records, traces, checkpoint and plot data into `dir`.
pub fn persist(run: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ExpError::io(dir, e))?;
    run.config.save(&dir.join(CONFIG_FILE))?;
    write_records(&dir.join(METRICS_FILE), &[&run.train, &run.test])?;
    let trace_path = dir.join(TRACE_FILE);
    run.trace.save_csv(&trace_path)?;
    run.model.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    plots::emit_plot_data(run, dir)?;
    Ok(())
}

pub fn write_records(path: &Path, records: &[&MetricsRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| ExpError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| ExpError::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| ExpError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| ExpError::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        })
        .collect()
}
