//! Time series sources and window construction.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// A `T×d` multichannel series sampled every `dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub values: Matrix,
    pub dt: f64,
    pub channel_names: Vec<String>,
}

impl TimeSeries {
    pub fn new(values: Matrix, dt: f64, channel_names: Vec<String>) -> Result<Self> {
        if values.rows() == 0 {
            return Err(Error::TooShort("a series needs at least one step".into()));
        }
        if channel_names.len() != values.cols() {
            return Err(Error::shape("TimeSeries channel names", values.cols(), channel_names.len()));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("time series values".into()));
        }
        Ok(Self { values, dt, channel_names })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    /// Steps `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> TimeSeries {
        TimeSeries {
            values: self.values.row_block(start, end - start),
            dt: self.dt,
            channel_names: self.channel_names.clone(),
        }
    }

    /// Writes the series as CSV: one header row of channel names, one row per step.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(&self.channel_names).map_err(|e| csv_io(path, e))?;
        for r in 0..self.len() {
            w.write_record(self.values.row(r).iter().map(|v| format!("{v:?}")))
                .map_err(|e| csv_io(path, e))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Csv {
            path: path.to_path_buf(),
            row: 0,
            column: String::new(),
            message: format!("{other:?}"),
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    VanDerPol,
    Lorenz,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatorConfig {
    pub system: System,
    pub mu: f64,
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub dt: f64,
    pub t_end: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub initial_state: Vec<f64>,
}

impl SimulatorConfig {
    /// μ = 1, Δt = 0.01 over 20 s, σ_n = 0.02, starting at (2, 0).
    pub fn van_der_pol(seed: u64) -> Self {
        Self {
            system: System::VanDerPol,
            mu: 1.0,
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: 0.01,
            t_end: 20.0,
            noise_std: 0.02,
            seed,
            initial_state: vec![2.0, 0.0],
        }
    }

    /// σ = 10, ρ = 28, β = 8/3, Δt = 0.01 over 20 s, σ_n = 0.1, starting at (1, 1, 1).
    pub fn lorenz(seed: u64) -> Self {
        Self {
            system: System::Lorenz,
            noise_std: 0.1,
            initial_state: vec![1.0, 1.0, 1.0],
            ..Self::van_der_pol(seed)
        }
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::Config(format!("t_end must be positive, got {}", self.t_end)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if self.initial_state.len() != dim {
            return Err(Error::shape("initial state", dim, self.initial_state.len()));
        }
        Ok(())
    }
}

pub fn van_der_pol_rhs(mu: f64, x: &[f64]) -> [f64; 2] {
    [x[1], mu * (1.0 - x[0] * x[0]) * x[1] - x[0]]
}

pub fn lorenz_rhs(sigma: f64, rho: f64, beta: f64, x: &[f64]) -> [f64; 3] {
    [
        sigma * (x[1] - x[0]),
        x[0] * (rho - x[2]) - x[1],
        x[0] * x[1] - beta * x[2],
    ]
}

fn euler_with_noise<const D: usize>(
    cfg: &SimulatorConfig,
    names: [&str; D],
    rhs: impl Fn(&[f64]) -> [f64; D],
) -> Result<TimeSeries> {
    cfg.validate(D)?;
    let steps = cfg.steps();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity((steps + 1) * D);
    let mut x = cfg.initial_state.clone();
    data.extend_from_slice(&x);
    for _ in 0..steps {
        let f = rhs(&x);
        for i in 0..D {
            x[i] += cfg.dt * f[i];
        }
        if cfg.noise_std > 0.0 {
            for xi in x.iter_mut() {
                *xi += noise.sample(&mut rng);
            }
        }
        data.extend_from_slice(&x);
    }
    let values = Matrix::new(steps + 1, D, data)?;
    TimeSeries::new(values, cfg.dt, names.iter().map(|s| s.to_string()).collect())
}

/// Explicit Euler on the Van der Pol oscillator with additive process noise
/// after every step.
pub fn simulate_van_der_pol(cfg: &SimulatorConfig) -> Result<TimeSeries> {
    if cfg.system != System::VanDerPol {
        return Err(Error::Config("simulator config is not a Van der Pol system".into()));
    }
    euler_with_noise(cfg, ["x1", "x2"], |x| van_der_pol_rhs(cfg.mu, x))
}

/// Explicit Euler on the Lorenz system with additive process noise.
pub fn simulate_lorenz(cfg: &SimulatorConfig) -> Result<TimeSeries> {
    if cfg.system != System::Lorenz {
        return Err(Error::Config("simulator config is not a Lorenz system".into()));
    }
    euler_with_noise(cfg, ["x1", "x2", "x3"], |x| lorenz_rhs(cfg.sigma, cfg.rho, cfg.beta, x))
}

pub fn simulate(cfg: &SimulatorConfig) -> Result<TimeSeries> {
    match cfg.system {
        System::VanDerPol => simulate_van_der_pol(cfg),
        System::Lorenz => simulate_lorenz(cfg),
    }
}

/// Paired context/target windows.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    /// Context windows, each `P×d`.
    pub x: Vec<Matrix>,
    /// Targets, each `H×d`.
    pub y: Vec<Matrix>,
    pub context_len: usize,
    pub horizon: usize,
    /// Start index of each context window in the source series.
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.x.first().map_or(0, Matrix::cols)
    }

    /// Sub-batch with the given window indices, in that order.
    pub fn select(&self, indices: &[usize]) -> WindowBatch {
        WindowBatch {
            x: indices.iter().map(|&i| self.x[i].clone()).collect(),
            y: indices.iter().map(|&i| self.y[i].clone()).collect(),
            context_len: self.context_len,
            horizon: self.horizon,
            starts: indices.iter().map(|&i| self.starts[i]).collect(),
        }
    }
}

/// All `T − P − H + 1` windows: context `[t, t+P)`, target `[t+P, t+P+H)`.
pub fn make_windows(series: &TimeSeries, context_len: usize, horizon: usize) -> Result<WindowBatch> {
    let t = series.len();
    if context_len == 0 || horizon == 0 {
        return Err(Error::Config("context length and horizon must be positive".into()));
    }
    if t < context_len + horizon {
        return Err(Error::TooShort(format!(
            "{t} steps cannot hold a context of {context_len} plus a horizon of {horizon}"
        )));
    }
    let count = t - context_len - horizon + 1;
    let mut batch = WindowBatch {
        x: Vec::with_capacity(count),
        y: Vec::with_capacity(count),
        context_len,
        horizon,
        starts: Vec::with_capacity(count),
    };
    for start in 0..count {
        batch.x.push(series.values.row_block(start, context_len));
        batch.y.push(series.values.row_block(start + context_len, horizon));
        batch.starts.push(start);
    }
    Ok(batch)
}

/// Per-channel affine map of the fitted range onto `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    range: Option<(Vec<f64>, Vec<f64>)>,
}

impl MinMaxScaler {
    pub fn fitted(values: &Matrix) -> Self {
        let mut s = Self::default();
        s.fit(values);
        s
    }

    pub fn fit(&mut self, values: &Matrix) {
        let d = values.cols();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for r in 0..values.rows() {
            for (c, v) in values.row(r).iter().enumerate() {
                min[c] = min[c].min(*v);
                max[c] = max[c].max(*v);
            }
        }
        self.range = Some((min, max));
    }

    pub fn min(&self) -> Option<&[f64]> {
        self.range.as_ref().map(|(m, _)| m.as_slice())
    }

    pub fn max(&self) -> Option<&[f64]> {
        self.range.as_ref().map(|(_, m)| m.as_slice())
    }

    fn check(&self, values: &Matrix) -> Result<(&[f64], &[f64])> {
        let (min, max) = self.range.as_ref().ok_or(Error::ScalerNotFitted)?;
        if values.cols() != min.len() {
            return Err(Error::shape("MinMaxScaler channels", min.len(), values.cols()));
        }
        Ok((min, max))
    }

    /// Constant channels (max = min) map to 0.
    pub fn transform(&self, values: &Matrix) -> Result<Matrix> {
        let (min, max) = self.check(values)?;
        Ok(Matrix::from_fn(values.rows(), values.cols(), |r, c| {
            let span = max[c] - min[c];
            if span > 0.0 {
                (values[(r, c)] - min[c]) / span
            } else {
                0.0
            }
        }))
    }

    pub fn inverse(&self, values: &Matrix) -> Result<Matrix> {
        let (min, max) = self.check(values)?;
        Ok(Matrix::from_fn(values.rows(), values.cols(), |r, c| {
            values[(r, c)] * (max[c] - min[c]) + min[c]
        }))
    }

    pub fn transform_series(&self, series: &TimeSeries) -> Result<TimeSeries> {
        Ok(TimeSeries {
            values: self.transform(&series.values)?,
            dt: series.dt,
            channel_names: series.channel_names.clone(),
        })
    }
}

/// Loads a CSV with a header row. `columns` selects channels by header name
/// (empty selects every column). With `split_into = Some(n)` each selected
/// column is cut into `n` consecutive equal-length segments which become
/// parallel channels; trailing rows that do not fill a segment are dropped.
pub fn load_csv(path: &Path, columns: &[String], split_into: Option<usize>) -> Result<TimeSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_io(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let selected: Vec<usize> = if columns.is_empty() {
        (0..headers.len()).collect()
    } else {
        columns
            .iter()
            .map(|name| {
                headers.iter().position(|h| h == name).ok_or_else(|| Error::Csv {
                    path: path.to_path_buf(),
                    row: 1,
                    column: name.clone(),
                    message: "column not found in header".into(),
                })
            })
            .collect::<Result<_>>()?
    };

    let mut data = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let record = record.map_err(|e| csv_io(path, e))?;
        if record.len() != headers.len() {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                row: line,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for &c in &selected {
            let cell = &record[c];
            let value: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::Csv {
                    path: path.to_path_buf(),
                    row: line,
                    column: headers[c].clone(),
                    message: format!("cannot parse {cell:?} as a finite number"),
                })?;
            data.push(value);
        }
        rows += 1;
    }
    let names: Vec<String> = selected.iter().map(|&c| headers[c].clone()).collect();
    let values = Matrix::new(rows, selected.len(), data)?;
    match split_into {
        None | Some(1) => TimeSeries::new(values, 1.0, names),
        Some(0) => Err(Error::Config("split_into must be at least 1".into())),
        Some(n) => {
            let seg = rows / n;
            if seg == 0 {
                return Err(Error::TooShort(format!("{rows} rows cannot be split into {n} segments")));
            }
            let d = selected.len();
            let split = Matrix::from_fn(seg, d * n, |r, c| {
                let (col, part) = (c / n, c % n);
                values[(part * seg + r, col)]
            });
            let split_names = names
                .iter()
                .flat_map(|name| (0..n).map(move |p| format!("{name}_{p}")))
                .collect();
            TimeSeries::new(split, 1.0, split_names)
        }
    }
}

/// Chronological split: the first `round(T · fraction)` steps train, the rest test.
pub fn train_test_split(series: &TimeSeries, fraction: f64) -> Result<(TimeSeries, TimeSeries)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let t = series.len();
    let cut = (t as f64 * fraction).round() as usize;
    if cut == 0 || cut >= t {
        return Err(Error::TooShort(format!("{t} steps leave an empty side at fraction {fraction}")));
    }
    Ok((series.slice(0, cut), series.slice(cut, t)))
}

/// Splits chronologically, then windows each side independently so no window
/// straddles the boundary.
pub fn windowed_split(
    series: &TimeSeries,
    fraction: f64,
    context_len: usize,
    horizon: usize,
) -> Result<(WindowBatch, WindowBatch)> {
    let (train, test) = train_test_split(series, fraction)?;
    let train_w = make_windows(&train, context_len, horizon)
        .map_err(|e| Error::TooShort(format!("training split: {e}")))?;
    let test_w = make_windows(&test, context_len, horizon)
        .map_err(|e| Error::TooShort(format!("test split: {e}")))?;
    Ok((train_w, test_w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn series(t: usize, d: usize) -> TimeSeries {
        let values = Matrix::from_fn(t, d, |r, c| (r * 10 + c) as f64);
        TimeSeries::new(values, 1.0, (0..d).map(|c| format!("c{c}")).collect()).unwrap()
    }

    #[test]
    fn van_der_pol_fixed_point_and_length() {
        let mut cfg = SimulatorConfig::van_der_pol(0);
        cfg.noise_std = 0.0;
        cfg.initial_state = vec![0.0, 0.0];
        let s = simulate_van_der_pol(&cfg).unwrap();
        assert!(s.values.as_slice().iter().all(|v| *v == 0.0));
        assert_eq!(simulate(&SimulatorConfig::van_der_pol(1)).unwrap().len(), 2001);
    }

    #[test]
    fn lorenz_fixed_point_and_determinism() {
        let mut cfg = SimulatorConfig::lorenz(0);
        cfg.noise_std = 0.0;
        cfg.initial_state = vec![0.0; 3];
        assert!(simulate_lorenz(&cfg).unwrap().values.as_slice().iter().all(|v| *v == 0.0));
        let a = simulate(&SimulatorConfig::lorenz(5)).unwrap();
        let b = simulate(&SimulatorConfig::lorenz(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, simulate(&SimulatorConfig::lorenz(6)).unwrap());
    }

    #[test]
    fn simulator_rejects_bad_config() {
        let mut cfg = SimulatorConfig::van_der_pol(0);
        cfg.dt = 0.0;
        assert!(simulate(&cfg).is_err());
        assert!(simulate_lorenz(&SimulatorConfig::van_der_pol(0)).is_err());
    }

    #[test]
    fn windows_examples() {
        let w = make_windows(&series(10, 1), 3, 2).unwrap();
        assert_eq!(w.len(), 6);
        assert_eq!(w.x[0].as_slice(), &[0.0, 10.0, 20.0]);
        assert_eq!(w.y[0].as_slice(), &[30.0, 40.0]);
        assert_eq!(make_windows(&series(5, 2), 3, 2).unwrap().len(), 1);

        let w = make_windows(&series(5, 1), 2, 1).unwrap();
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = w
            .x
            .iter()
            .zip(&w.y)
            .map(|(x, y)| (x.as_slice().to_vec(), y.as_slice().to_vec()))
            .collect();
        assert_eq!(
            pairs,
            vec![
                (vec![0.0, 10.0], vec![20.0]),
                (vec![10.0, 20.0], vec![30.0]),
                (vec![20.0, 30.0], vec![40.0]),
            ]
        );
        assert!(make_windows(&series(4, 1), 3, 2).is_err());
    }

    #[test]
    fn scaler_cases() {
        let m = Matrix::new(3, 2, vec![0.0, 4.0, 5.0, 4.0, 10.0, 4.0]).unwrap();
        let s = MinMaxScaler::fitted(&m);
        let t = s.transform(&m).unwrap();
        assert_eq!(t.column(0), vec![0.0, 0.5, 1.0]);
        assert_eq!(t.column(1), vec![0.0, 0.0, 0.0]);
        assert!(matches!(MinMaxScaler::default().inverse(&m), Err(Error::ScalerNotFitted)));
        assert!(matches!(MinMaxScaler::default().transform(&m), Err(Error::ScalerNotFitted)));
    }

    #[test]
    fn csv_loading_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.csv");
        std::fs::write(&good, "a,b,c\n1,2,3\n4,5,6\n7,8,9\n").unwrap();
        let s = load_csv(&good, &["a".into(), "c".into()], None).unwrap();
        assert_eq!(s.values.shape(), (3, 2));
        assert_eq!(s.values.column(1), vec![3.0, 6.0, 9.0]);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "a,b\n1,2\n3,abc\n").unwrap();
        match load_csv(&bad, &[], None) {
            Err(Error::Csv { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "b");
            }
            other => panic!("expected a CSV error, got {other:?}"),
        }

        let ragged = dir.path().join("ragged.csv");
        std::fs::write(&ragged, "a,b\n1,2\n3\n").unwrap();
        assert!(matches!(load_csv(&ragged, &[], None), Err(Error::Csv { row: 3, .. })));
        assert!(matches!(load_csv(&good, &["zzz".into()], None), Err(Error::Csv { .. })));
    }

    #[test]
    fn csv_column_split() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("price.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "price").unwrap();
        for i in 0..5800 {
            writeln!(f, "{i}").unwrap();
        }
        drop(f);
        let s = load_csv(&path, &["price".into()], Some(2)).unwrap();
        assert_eq!(s.values.shape(), (2900, 2));
        assert_eq!(s.values.row(0), &[0.0, 2900.0]);
        assert_eq!(s.channel_names, vec!["price_0", "price_1"]);
    }

    #[test]
    fn split_sizes_and_boundary() {
        let (train, test) = train_test_split(&series(100, 1), 0.8).unwrap();
        assert_eq!((train.len(), test.len()), (80, 20));
        let (train, test) = train_test_split(&series(3500, 6), 0.8).unwrap();
        assert_eq!((train.len(), test.len()), (2800, 700));
        assert!(train_test_split(&series(10, 1), 1.0).is_err());

        let s = series(100, 1);
        let (tr, te) = windowed_split(&s, 0.8, 5, 3).unwrap();
        let last_train_target = tr.y.last().unwrap().as_slice().last().copied().unwrap();
        assert_eq!(last_train_target, 790.0);
        // test windows only ever see steps 80..100
        assert!(te.x.iter().chain(&te.y).all(|m| m.as_slice().iter().all(|v| *v >= 800.0)));
        assert!(windowed_split(&s, 0.95, 5, 3).is_err());
    }

    #[test]
    fn csv_round_trip_of_simulation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vdp.csv");
        let s = simulate(&SimulatorConfig::van_der_pol(3)).unwrap();
        s.write_csv(&path).unwrap();
        let back = load_csv(&path, &[], None).unwrap();
        assert_eq!(back.values, s.values);
        assert_eq!(back.channel_names, s.channel_names);
    }
}
