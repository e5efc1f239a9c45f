//! Gradients, Adam, the training loop and gradient audits.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionKind, QrGradient, Tape, Var};
use crate::data::WindowBatch;
use crate::encoder::{decompose, encode, patchify, sinusoidal_pe, Variant};
use crate::error::{Error, Result};
use crate::forecaster::{KoopmanForecaster, LossBreakdown, LyapunovMode};
use crate::linalg::{spectral_norm, Matrix};

/// Named tensors in the model's parameter order. Used both for parameter
/// snapshots and for gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    pub entries: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: (usize, usize),
    pub data: Vec<f64>,
}

impl ParameterSet {
    pub fn of(model: &KoopmanForecaster) -> Self {
        Self {
            entries: model
                .parameters()
                .into_iter()
                .map(|(name, shape, data)| NamedTensor {
                    name,
                    shape,
                    data: data.to_vec(),
                })
                .collect(),
        }
    }

    pub fn zeros_like(model: &KoopmanForecaster) -> Self {
        let mut set = Self::of(model);
        for e in &mut set.entries {
            e.data.iter_mut().for_each(|v| *v = 0.0);
        }
        set
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Total number of scalar coordinates.
    pub fn coordinate_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Largest absolute entry across all tensors.
    pub fn max_abs(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.data.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Loss options shared by training and gradient evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    /// Weight of the Lyapunov penalty.
    pub lambda: f64,
    pub lyapunov: LyapunovMode,
    pub qr_gradient: QrGradient,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lyapunov: LyapunovMode::AllPairs,
            qr_gradient: QrGradient::Exact,
        }
    }
}

/// A window batch converted into the stacked layout the graph consumes:
/// tokens of all windows stacked row-wise, targets and trends one row per window.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    /// `(B·N) × token_width`.
    tokens: Matrix,
    /// `B × (P·d)`, decomp variant only.
    trend: Option<Matrix>,
    /// `B × (H·d)`, horizon-major.
    targets: Matrix,
    count: usize,
    tokens_per_window: usize,
}

impl PreparedBatch {
    pub fn new(model: &KoopmanForecaster, batch: &WindowBatch) -> Result<Self> {
        let cfg = &model.config;
        if batch.is_empty() {
            return Err(Error::TooShort("empty window batch".into()));
        }
        if batch.context_len != cfg.context_len || batch.horizon != cfg.horizon || batch.channels() != cfg.channels {
            return Err(Error::shape(
                "window batch",
                format!("P={} H={} d={}", cfg.context_len, cfg.horizon, cfg.channels),
                format!("P={} H={} d={}", batch.context_len, batch.horizon, batch.channels()),
            ));
        }
        let enc = &cfg.encoder;
        let n_tok = enc.token_count(cfg.context_len);
        let width = enc.token_width(cfg.channels);
        let b = batch.len();
        let mut tokens = Vec::with_capacity(b * n_tok * width);
        let mut trend = (enc.variant == Variant::Decomp).then(|| Vec::with_capacity(b * cfg.context_len * cfg.channels));
        let mut targets = Vec::with_capacity(b * cfg.horizon * cfg.channels);
        for (x, y) in batch.x.iter().zip(&batch.y) {
            let input = match enc.variant {
                Variant::Decomp => {
                    let (t, seasonal) = decompose(x, enc.ma_kernel)?;
                    if let Some(tr) = trend.as_mut() {
                        tr.extend_from_slice(t.as_slice());
                    }
                    seasonal
                }
                Variant::Patch => patchify(x, enc.patch_len)?,
                Variant::ProbSparse => x.clone(),
            };
            tokens.extend_from_slice(input.as_slice());
            targets.extend_from_slice(y.as_slice());
        }
        Ok(Self {
            tokens: Matrix::new(b * n_tok, width, tokens)?,
            trend: trend
                .map(|t| Matrix::new(b, cfg.context_len * cfg.channels, t))
                .transpose()?,
            targets: Matrix::new(b, cfg.horizon * cfg.channels, targets)?,
            count: b,
            tokens_per_window: n_tok,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// The windows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> PreparedBatch {
        let n = self.tokens_per_window;
        let rows = |m: &Matrix, per: usize| {
            let mut data = Vec::with_capacity(indices.len() * per * m.cols());
            for &i in indices {
                for r in i * per..(i + 1) * per {
                    data.extend_from_slice(m.row(r));
                }
            }
            Matrix::from_raw(indices.len() * per, m.cols(), data)
        };
        PreparedBatch {
            tokens: rows(&self.tokens, n),
            trend: self.trend.as_ref().map(|t| rows(t, 1)),
            targets: rows(&self.targets, 1),
            count: indices.len(),
            tokens_per_window: n,
        }
    }
}

/// The recorded batched forward pass of a model.
pub struct ModelGraph {
    pub tape: Tape,
    /// One node per model parameter, in parameter order.
    pub params: Vec<(String, Var)>,
    pub total: Var,
    pub mse: Var,
    pub lyap: Var,
    /// `B × (H·d)`, horizon-major.
    pub y_hat: Var,
    /// `z_t, …, z_{t+H}`, each `B × d_latent`.
    pub latents: Vec<Var>,
}

impl ModelGraph {
    pub fn loss(&self) -> LossBreakdown {
        LossBreakdown {
            total: self.tape.scalar(self.total),
            mse: self.tape.scalar(self.mse),
            lyap: self.tape.scalar(self.lyap),
        }
    }
}

pub fn build_graph(model: &KoopmanForecaster, batch: &PreparedBatch, opts: &LossOptions) -> Result<ModelGraph> {
    let cfg = &model.config;
    let enc = &cfg.encoder;
    let mut tape = Tape::new();
    let mut params = Vec::new();
    let mut by_name: HashMap<String, Var> = HashMap::new();
    for (name, (rows, cols), data) in model.parameters() {
        let v = tape.param(Matrix::new(rows, cols, data.to_vec())?);
        by_name.insert(name.clone(), v);
        params.push((name, v));
    }
    let p = |name: &str| by_name[name];
    let n_tok = batch.tokens_per_window;

    let x = tape.constant(batch.tokens.clone());
    let mut h = tape.matmul(x, p("encoder.embed.weight"))?;
    h = tape.add_row(h, p("encoder.embed.bias"))?;
    let pe = match by_name.get("encoder.pos") {
        Some(v) => *v,
        None => tape.constant(sinusoidal_pe(n_tok, enc.d_model)),
    };
    h = tape.add_tiled(h, pe)?;

    let kind = match enc.variant {
        Variant::ProbSparse => AttentionKind::ProbSparse(enc.probsparse_factor),
        _ => AttentionKind::Full,
    };
    for i in 0..enc.n_layers {
        let lp = |s: &str| by_name[&format!("encoder.layers.{i}.{s}")];
        let q = tape.matmul(h, lp("attn.wq"))?;
        let k = tape.matmul(h, lp("attn.wk"))?;
        let v = tape.matmul(h, lp("attn.wv"))?;
        let att = tape.attention(q, k, v, n_tok, enc.n_heads, kind)?;
        let o = tape.matmul(att, lp("attn.wo"))?;
        let s1 = tape.add(h, o)?;
        let h1 = tape.layer_norm(s1, lp("ln1.gamma"), lp("ln1.beta"))?;
        let f = tape.matmul(h1, lp("ffn.w1"))?;
        let f = tape.add_row(f, lp("ffn.b1"))?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, lp("ffn.w2"))?;
        let f = tape.add_row(f, lp("ffn.b2"))?;
        let s2 = tape.add(h1, f)?;
        h = tape.layer_norm(s2, lp("ln2.gamma"), lp("ln2.beta"))?;
    }
    let z0 = tape.block_mean(h, n_tok)?;

    let u = tape.householder_q(p("koopman.u_raw"), opts.qr_gradient)?;
    let v = if cfg.tie_factors {
        u
    } else {
        tape.householder_q(p("koopman.v_raw"), opts.qr_gradient)?
    };
    let s = tape.sigmoid(p("koopman.sigma_raw"));
    let sigma = tape.scale(s, cfg.rho_max);
    let us = tape.col_scale(u, sigma)?;
    let koop = tape.matmul_t(us, v)?;

    let w = p("decoder.weight");
    let mut latents = vec![z0];
    let mut steps = Vec::with_capacity(cfg.horizon);
    let mut z = z0;
    for _ in 0..cfg.horizon {
        z = tape.matmul_t(z, koop)?;
        steps.push(tape.matmul_t(z, w)?);
        latents.push(z);
    }
    let mut y_hat = tape.concat_cols(&steps)?;
    if let (Some(wt), Some(trend)) = (by_name.get("trend_head.weight"), &batch.trend) {
        let t = tape.constant(trend.clone());
        let contribution = tape.trend_head(*wt, t, cfg.channels)?;
        y_hat = tape.add(y_hat, contribution)?;
    }

    let target = tape.constant(batch.targets.clone());
    let diff = tape.sub(y_hat, target)?;
    let sq = tape.mul(diff, diff)?;
    let mse = tape.mean(sq);

    let pairs = match opts.lyapunov {
        LyapunovMode::AllPairs => cfg.horizon,
        LyapunovMode::FirstPair => 1,
    };
    let mut penalties = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let next = tape.row_sq_norm(latents[i + 1]);
        let prev = tape.row_sq_norm(latents[i]);
        let growth = tape.sub(next, prev)?;
        penalties.push(tape.relu(growth));
    }
    let stacked = tape.concat_cols(&penalties)?;
    let lyap = tape.mean(stacked);
    let weighted = tape.scale(lyap, opts.lambda);
    let total = tape.add(mse, weighted)?;

    Ok(ModelGraph {
        tape,
        params,
        total,
        mse,
        lyap,
        y_hat,
        latents,
    })
}

/// Loss and its gradient with respect to every parameter. A non-finite
/// gradient entry is reported with the parameter's name.
pub fn grad(model: &KoopmanForecaster, batch: &PreparedBatch, opts: &LossOptions) -> Result<(LossBreakdown, ParameterSet)> {
    let graph = build_graph(model, batch, opts)?;
    let loss = graph.loss();
    if !loss.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = graph.tape.backward(graph.total)?;
    let mut set = ParameterSet::zeros_like(model);
    for (entry, (name, var)) in set.entries.iter_mut().zip(&graph.params) {
        debug_assert_eq!(&entry.name, name);
        if let Some(g) = grads.get(*var) {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            entry.data.copy_from_slice(g.as_slice());
        }
    }
    Ok((loss, set))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    /// Seeds mini-batch shuffling.
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossOptions,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            learning_rate: 1e-3,
            batch_size: None,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossOptions::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.loss.lambda >= 0.0 && self.loss.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.loss.lambda)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &KoopmanForecaster) -> Self {
        let zeros: Vec<Vec<f64>> = model.parameters().iter().map(|(_, _, d)| vec![0.0; d.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Nothing is written if any updated value
/// would be non-finite.
pub fn adam_step(model: &mut KoopmanForecaster, grads: &ParameterSet, state: &mut AdamState, cfg: &TrainingConfig) -> Result<()> {
    let t = state.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut params = model.parameters_mut();
    if params.len() != grads.entries.len() || state.m.len() != params.len() {
        return Err(Error::shape("adam_step", params.len(), grads.entries.len()));
    }
    let mut updated = Vec::with_capacity(params.len());
    for (i, ((name, values), g)) in params.iter().zip(&grads.entries).enumerate() {
        if g.name != *name || g.data.len() != values.len() || state.m[i].len() != values.len() {
            return Err(Error::shape("adam_step", name.clone(), g.name.clone()));
        }
        let mut m = state.m[i].clone();
        let mut v = state.v[i].clone();
        let mut p = values.to_vec();
        for j in 0..p.len() {
            let gj = g.data[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("Adam update of {name}")));
        }
        updated.push((p, m, v));
    }
    for (i, (p, m, v)) in updated.into_iter().enumerate() {
        params[i].1.copy_from_slice(&p);
        state.m[i] = m;
        state.v[i] = v;
    }
    state.step = t;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub total_loss: f64,
    pub mse: f64,
    pub lyap: f64,
    /// Largest singular value of the operator after the epoch's updates.
    pub spectral_radius: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainingTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total_loss).collect()
    }

    pub fn max_spectral_radius(&self) -> f64 {
        self.records.iter().fold(0.0, |m, r| m.max(r.spectral_radius))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["epoch", "total_loss", "mse", "lyap", "spectral_radius", "seconds"])
            .map_err(io)?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.total_loss.to_string(),
                r.mse.to_string(),
                r.lyap.to_string(),
                r.spectral_radius.to_string(),
                r.seconds.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Trains in place and returns the per-epoch trace.
pub fn train(model: &mut KoopmanForecaster, windows: &WindowBatch, cfg: &TrainingConfig) -> Result<TrainingTrace> {
    train_with_observer(model, windows, cfg, |_| {})
}

/// Like [`train`], calling `observer` after every epoch.
pub fn train_with_observer(
    model: &mut KoopmanForecaster,
    windows: &WindowBatch,
    cfg: &TrainingConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<TrainingTrace> {
    cfg.validate()?;
    let prepared = PreparedBatch::new(model, windows)?;
    let mut state = AdamState::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut trace = TrainingTrace::default();
    let chunk = cfg.batch_size.unwrap_or(prepared.len()).min(prepared.len());

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let with_epoch = |e: Error| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}")),
            other => other,
        };
        let mut sum = LossBreakdown::default();
        if chunk == prepared.len() {
            let (loss, g) = grad(model, &prepared, &cfg.loss).map_err(with_epoch)?;
            adam_step(model, &g, &mut state, cfg).map_err(with_epoch)?;
            sum = loss;
        } else {
            order.shuffle(&mut rng);
            for idx in order.chunks(chunk) {
                let sub = prepared.subset(idx);
                let (loss, g) = grad(model, &sub, &cfg.loss).map_err(with_epoch)?;
                adam_step(model, &g, &mut state, cfg).map_err(with_epoch)?;
                let wgt = idx.len() as f64 / prepared.len() as f64;
                sum.total += loss.total * wgt;
                sum.mse += loss.mse * wgt;
                sum.lyap += loss.lyap * wgt;
            }
        }
        let record = EpochRecord {
            epoch,
            total_loss: sum.total,
            mse: sum.mse,
            lyap: sum.lyap,
            spectral_radius: model.koopman.spectral_trace_entry(),
            seconds: start.elapsed().as_secs_f64(),
        };
        observer(&record);
        trace.records.push(record);
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdOptions {
    pub epsilon: f64,
    /// Cap on the number of coordinates checked.
    pub max_coordinates: usize,
    /// Seeds the choice of coordinates.
    pub seed: u64,
    /// Only parameters whose name starts with one of these prefixes.
    pub only: Option<Vec<String>>,
    /// Differences below this are treated as agreement.
    pub abs_tolerance: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_coordinates: 500,
            seed: 0,
            only: None,
            abs_tolerance: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_relative_error: f64,
    /// Largest `|analytic − numeric|`, before the absolute tolerance applies.
    pub max_abs_error: f64,
    pub coordinates_checked: usize,
    /// `(parameter, index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares reverse-mode gradients with central differences of the
/// single-window reference loss, on a seeded subset of coordinates.
pub fn finite_difference_check(
    model: &KoopmanForecaster,
    windows: &WindowBatch,
    loss: &LossOptions,
    opts: &FdOptions,
) -> Result<FdReport> {
    if !(opts.epsilon > 0.0) {
        return Err(Error::Config("finite-difference epsilon must be positive".into()));
    }
    let prepared = PreparedBatch::new(model, windows)?;
    let (_, analytic) = grad(model, &prepared, loss)?;

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (ti, e) in analytic.entries.iter().enumerate() {
        let keep = opts
            .only
            .as_ref()
            .is_none_or(|prefixes| prefixes.iter().any(|p| e.name.starts_with(p.as_str())));
        if keep {
            coords.extend((0..e.data.len()).map(|j| (ti, j)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    if coords.len() > opts.max_coordinates {
        coords.shuffle(&mut rng);
        coords.truncate(opts.max_coordinates);
        coords.sort_unstable();
    }

    let mut probe = model.clone();
    let mut eval = |ti: usize, j: usize, value: f64| -> Result<f64> {
        probe.parameters_mut()[ti].1[j] = value;
        Ok(probe.batch_loss(windows, loss.lambda, loss.lyapunov)?.total)
    };
    let mut report = FdReport {
        max_relative_error: 0.0,
        max_abs_error: 0.0,
        coordinates_checked: coords.len(),
        worst: None,
    };
    for (ti, j) in coords {
        let original = model.parameters()[ti].2[j];
        let plus = eval(ti, j, original + opts.epsilon)?;
        let minus = eval(ti, j, original - opts.epsilon)?;
        eval(ti, j, original)?;
        let numeric = (plus - minus) / (2.0 * opts.epsilon);
        let a = analytic.entries[ti].data[j];
        let diff = (a - numeric).abs();
        report.max_abs_error = report.max_abs_error.max(diff);
        let err = if diff <= opts.abs_tolerance {
            0.0
        } else {
            diff / a.abs().max(numeric.abs())
        };
        if report.worst.is_none() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some((analytic.entries[ti].name.clone(), j, a, numeric));
        }
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaGradientAudit {
    /// `max_{i,j} |∂x̂_{t+1,j} / ∂Σ_raw_i|` with the latent held fixed.
    pub measured: f64,
    /// `‖W‖₂ · ρ_max · ‖z_t‖ / 4`.
    pub bound: f64,
}

impl SigmaGradientAudit {
    pub fn holds(&self) -> bool {
        self.measured <= self.bound
    }
}

/// Differentiates the one-step decoded forecast with respect to the raw
/// singular values and compares against the sigmoid-slope bound.
pub fn sigma_gradient_bound_audit(model: &KoopmanForecaster, x: &Matrix) -> Result<SigmaGradientAudit> {
    let enc = encode(x, &model.config.encoder, &model.encoder)?;
    let op = model.koopman.materialize()?;
    let d = model.koopman.dim();

    let mut measured: f64 = 0.0;
    for j in 0..model.config.channels {
        let mut tape = Tape::new();
        let raw = tape.param(Matrix::new(1, d, model.koopman.sigma_raw.as_slice().to_vec())?);
        let u = tape.constant(op.u.clone());
        let v = tape.constant(op.v.clone());
        let z = tape.constant(enc.z.to_row());
        // row j of the decoder alone gives output channel j
        let w = tape.constant(model.decoder.row_block(j, 1));
        let s = tape.sigmoid(raw);
        let sigma = tape.scale(s, model.config.rho_max);
        let us = tape.col_scale(u, sigma)?;
        let k = tape.matmul_t(us, v)?;
        let z1 = tape.matmul_t(z, k)?;
        let y = tape.matmul_t(z1, w)?;
        if let Some(g) = tape.backward(y)?.get(raw) {
            measured = measured.max(g.max_abs());
        }
    }
    let bound = spectral_norm(&model.decoder)? * model.config.rho_max * enc.z.norm() / 4.0;
    Ok(SigmaGradientAudit { measured, bound })
}
