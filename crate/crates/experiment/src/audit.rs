//! Seeded invariant and bound audits over random operators and models.

use std::fmt;
use std::time::Instant;

use koopcast_core::data::WindowBatch;
use koopcast_core::encoder::{encode, EncoderConfig, PeKind, Variant};
use koopcast_core::forecaster::{KoopmanForecaster, ModelConfig};
use koopcast_core::koopman::{MaterializedOperator, StableKoopmanOperator};
use koopcast_core::linalg::{spectral_norm, Matrix, Vector};
use koopcast_core::train::{finite_difference_check, sigma_gradient_bound_audit, FdOptions, LossOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;

pub const SPECTRAL_SLACK: f64 = 1e-8;
pub const DECAY_SLACK: f64 = 1e-8;
pub const ORTHOGONALITY_TOL: f64 = 1e-10;
pub const GRADIENT_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// Largest measured value over its bound (relative error for the gradient audit).
    pub worst: f64,
    pub seconds: f64,
    pub detail: Option<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} cases, {} failures, worst {:.3e}, {:.1}s",
            self.name, self.cases, self.failures, self.worst, self.seconds
        )?;
        match &self.detail {
            Some(d) => write!(f, " ({d})"),
            None => Ok(()),
        }
    }
}

/// Factor orthogonality across every materialization an audit performs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct OrthogonalityLog {
    pub materializations: usize,
    pub worst_defect: f64,
}

impl OrthogonalityLog {
    pub fn record(&mut self, op: &MaterializedOperator) {
        self.materializations += 1;
        self.worst_defect = self
            .worst_defect
            .max(op.u.orthogonality_defect())
            .max(op.v.orthogonality_defect());
    }

    pub fn holds(&self) -> bool {
        self.materializations > 0 && self.worst_defect <= ORTHOGONALITY_TOL
    }
}

fn gaussian_vector<R: Rng>(n: usize, std: f64, rng: &mut R) -> Vector {
    Vector::new((0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()).expect("finite draws")
}

fn random_sigma_raw<R: Rng>(n: usize, spread: f64, rng: &mut R) -> Vector {
    Vector::new((0..n).map(|_| rng.random_range(-spread..=spread)).collect()).expect("finite draws")
}

/// Operator of size 2..=64 with raw factors of random scale and raw singular
/// values spread up to saturation.
pub fn random_operator<R: Rng>(rng: &mut R) -> StableKoopmanOperator {
    let d = rng.random_range(2..=64);
    let rho = rng.random_range(0.1..0.999);
    let tie = rng.random_bool(0.25);
    let mut op = StableKoopmanOperator::init(d, rho, tie, rng).expect("valid rho");
    let std = 10f64.powf(rng.random_range(-1.0..1.0));
    op.u_raw = Matrix::gaussian(d, d, std, rng);
    op.v_raw = Matrix::gaussian(d, d, std, rng);
    let spread = rng.random_range(0.0..20.0);
    op.sigma_raw = random_sigma_raw(d, spread, rng);
    op
}

/// Small model of a random variant with non-trivial singular values.
pub fn random_model<R: Rng>(rng: &mut R) -> KoopmanForecaster {
    let d_model = [4, 8, 16][rng.random_range(0..3)];
    let enc = EncoderConfig {
        variant: Variant::ALL[rng.random_range(0..3)],
        d_model,
        n_layers: rng.random_range(1..=2),
        n_heads: 2,
        ffn_width: 2 * d_model,
        patch_len: 4,
        pe_kind: if rng.random_bool(0.5) { PeKind::Sinusoidal } else { PeKind::Learnable },
        ma_kernel: 3,
        probsparse_factor: 1.0,
    };
    let mut cfg = ModelConfig::new(enc, rng.random_range(1..=3), 16, 4);
    cfg.rho_max = rng.random_range(0.5..0.999);
    let mut model = KoopmanForecaster::init(cfg, rng.random()).expect("valid model");
    // keep sigmoid(raw) strictly below 1 in floating point
    let spread = rng.random_range(0.0..10.0);
    model.koopman.sigma_raw = random_sigma_raw(d_model, spread, rng);
    model
}

fn random_window<R: Rng>(model: &KoopmanForecaster, rng: &mut R) -> Matrix {
    let c = &model.config;
    Matrix::from_fn(c.context_len, c.channels, |_, _| rng.random_range(-1.0..1.0))
}

fn timed<F: FnOnce() -> Result<(usize, usize, f64)>>(name: &'static str, f: F) -> Result<AuditReport> {
    let started = Instant::now();
    let (cases, failures, worst) = f()?;
    Ok(AuditReport {
        name,
        cases,
        failures,
        worst,
        seconds: started.elapsed().as_secs_f64(),
        detail: None,
    })
}

/// `‖K‖₂ ≤ ρ_max + 1e-8` by power iteration; `worst` is `max ‖K‖₂ / ρ_max`.
pub fn spectral_cap(cases: usize, seed: u64, log: &mut OrthogonalityLog) -> Result<AuditReport> {
    timed("spectral cap", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut failures, mut worst) = (0, 0.0f64);
        for _ in 0..cases {
            let op = random_operator(&mut rng);
            let m = op.materialize()?;
            log.record(&m);
            let norm = spectral_norm(&m.k)?;
            worst = worst.max(norm / op.rho_max);
            if norm > op.rho_max + SPECTRAL_SLACK {
                failures += 1;
            }
        }
        Ok((cases, failures, worst))
    })
}

/// `‖K^h z₀‖ ≤ ρ_max^h ‖z₀‖ (1 + 1e-8)` at every step up to `steps`.
pub fn geometric_decay(cases: usize, steps: usize, seed: u64, log: &mut OrthogonalityLog) -> Result<AuditReport> {
    timed("geometric decay", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut failures, mut worst) = (0, 0.0f64);
        for _ in 0..cases {
            let op = random_operator(&mut rng);
            let m = op.materialize()?;
            log.record(&m);
            let scale = 10f64.powf(rng.random_range(-3.0..3.0));
            let z0 = gaussian_vector(m.dim(), scale, &mut rng);
            let n0 = z0.norm();
            let mut bound = n0;
            let mut ok = true;
            for z in m.rollout(&z0, steps)? {
                bound *= op.rho_max;
                worst = worst.max(z.norm() / bound);
                ok &= z.norm() <= bound * (1.0 + DECAY_SLACK);
            }
            failures += usize::from(!ok);
        }
        Ok((cases, failures, worst))
    })
}

/// Decoded deviation after `h` steps against `‖W‖₂ ρ_max^h ‖Δz‖`, for
/// `h = 1..=steps`, on random full models with encoded latents.
pub fn perturbation_bound(cases: usize, steps: usize, seed: u64, log: &mut OrthogonalityLog) -> Result<AuditReport> {
    timed("perturbation bound", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut failures, mut worst) = (0, 0.0f64);
        for _ in 0..cases {
            let model = random_model(&mut rng);
            let x = random_window(&model, &mut rng);
            let z = encode(&x, &model.config.encoder, &model.encoder)?.z;
            let scale = 10f64.powf(rng.random_range(-3.0..0.0)) * z.norm().max(1e-12);
            let dz = gaussian_vector(z.len(), scale / (z.len() as f64).sqrt(), &mut rng);
            let shifted = Vector::new(z.as_slice().iter().zip(dz.as_slice()).map(|(a, b)| a + b).collect())?;

            let m = model.koopman.materialize()?;
            log.record(&m);
            let w_norm = spectral_norm(&model.decoder)?;
            let base = m.rollout(&z, steps)?;
            let moved = m.rollout(&shifted, steps)?;
            let mut ok = true;
            for (h, (a, b)) in base.iter().zip(&moved).enumerate() {
                let ya = model.decoder.matvec(a)?;
                let yb = model.decoder.matvec(b)?;
                let dev = ya.as_slice().iter().zip(yb.as_slice()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                let bound = model.koopman.perturbation_bound(w_norm, h + 1, dz.norm());
                worst = worst.max(dev / bound);
                ok &= dev <= bound;
            }
            failures += usize::from(!ok);
        }
        Ok((cases, failures, worst))
    })
}

/// `|∂x̂/∂Σ_raw| ≤ ‖W‖₂ ρ_max ‖z_t‖ / 4` on random models and windows.
pub fn sigma_bound(cases: usize, seed: u64) -> Result<AuditReport> {
    timed("sigma gradient bound", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut failures, mut worst) = (0, 0.0f64);
        for _ in 0..cases {
            let model = random_model(&mut rng);
            let x = random_window(&model, &mut rng);
            let audit = sigma_gradient_bound_audit(&model, &x)?;
            worst = worst.max(audit.measured / audit.bound);
            failures += usize::from(!audit.holds());
        }
        Ok((cases, failures, worst))
    })
}

/// The tiny model of the gradient audit: two channels, width 4, P = 8, H = 2.
pub fn tiny_model(variant: Variant, seed: u64) -> Result<KoopmanForecaster> {
    let enc = EncoderConfig {
        variant,
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        ffn_width: 8,
        patch_len: 4,
        pe_kind: PeKind::Sinusoidal,
        ma_kernel: 3,
        probsparse_factor: 1.0,
    };
    Ok(KoopmanForecaster::init(ModelConfig::new(enc, 2, 8, 2), seed)?)
}

/// Reverse-mode gradients against central differences (ε = 1e-5) of the
/// full loss; one sample is one seeded model and a batch of three windows.
/// `worst` is the largest relative error seen.
pub fn gradient_check(samples: usize, seed: u64) -> Result<AuditReport> {
    let mut max_abs = 0.0f64;
    let mut coordinates = 0;
    let mut report = timed("gradient check", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut failures, mut worst) = (0, 0.0f64);
        for s in 0..samples {
            let model = tiny_model(Variant::ALL[s % 3], rng.random())?;
            let mut window = |rows: usize| Matrix::from_fn(rows, 2, |_, _| rng.random_range(0.0..1.0));
            let batch = WindowBatch {
                x: (0..3).map(|_| window(8)).collect(),
                y: (0..3).map(|_| window(2)).collect(),
                context_len: 8,
                horizon: 2,
                starts: vec![0, 1, 2],
            };
            let opts = FdOptions {
                seed: rng.random(),
                ..FdOptions::default()
            };
            let report = finite_difference_check(&model, &batch, &LossOptions::default(), &opts)?;
            worst = worst.max(report.max_relative_error);
            max_abs = max_abs.max(report.max_abs_error);
            coordinates += report.coordinates_checked;
            failures += usize::from(report.max_relative_error > GRADIENT_TOL);
        }
        Ok((samples, failures, worst))
    })?;
    report.detail = Some(format!("{coordinates} coordinates, max |analytic - numeric| {max_abs:.3e}"));
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditSuite {
    pub reports: Vec<AuditReport>,
    pub orthogonality: OrthogonalityLog,
}

impl AuditSuite {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(AuditReport::passed) && self.orthogonality.holds()
    }
}

/// Every audit at the sizes used by the acceptance gate.
pub fn run_all(seed: u64) -> Result<AuditSuite> {
    let mut log = OrthogonalityLog::default();
    let reports = vec![
        spectral_cap(1000, seed, &mut log)?,
        geometric_decay(200, 100, seed.wrapping_add(1), &mut log)?,
        perturbation_bound(100, 50, seed.wrapping_add(2), &mut log)?,
        sigma_bound(100, seed.wrapping_add(3))?,
        gradient_check(20, seed.wrapping_add(4))?,
    ];
    Ok(AuditSuite {
        reports,
        orthogonality: log,
    })
}
