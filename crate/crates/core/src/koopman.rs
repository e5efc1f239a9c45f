//! Spectrally capped linear latent propagator.
//!
//! The operator is stored as unconstrained raw parameters and materialized as
//! `K = U · diag(Σ) · Vᵀ`, where `U`, `V` are the Q factors of the raw
//! matrices and `Σᵢ = sigmoid(Σᵢ_raw) · ρ_max`. Every singular value of `K`
//! therefore lies in `(0, ρ_max)`, so `‖K‖₂ < 1` regardless of the raw values.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{householder_qr, stable_sigmoid, Matrix, Vector};

pub const DEFAULT_RHO_MAX: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct StableKoopmanOperator {
    pub u_raw: Matrix,
    pub v_raw: Matrix,
    pub sigma_raw: Vector,
    pub rho_max: f64,
    /// When set, `V := U` and the materialized operator is normal.
    pub tie_factors: bool,
}

/// The factors and the dense operator produced by one materialization.
#[derive(Clone, Debug)]
pub struct MaterializedOperator {
    pub k: Matrix,
    pub u: Matrix,
    pub v: Matrix,
    pub sigma: Vector,
}

impl MaterializedOperator {
    pub fn dim(&self) -> usize {
        self.sigma.len()
    }

    pub fn apply(&self, z: &Vector) -> Result<Vector> {
        if z.len() != self.dim() {
            return Err(Error::shape("koopman apply", self.dim(), z.len()));
        }
        self.k.matvec(z)
    }

    /// `[K z0, K² z0, …, K^h z0]` by repeated application.
    pub fn rollout(&self, z0: &Vector, h: usize) -> Result<Vec<Vector>> {
        if z0.len() != self.dim() {
            return Err(Error::shape("koopman rollout", self.dim(), z0.len()));
        }
        let mut out = Vec::with_capacity(h);
        let mut z = z0.clone();
        for _ in 0..h {
            z = self.k.matvec(&z)?;
            out.push(z.clone());
        }
        Ok(out)
    }

    pub fn max_sigma(&self) -> f64 {
        self.sigma.as_slice().iter().fold(0.0, |m, s| m.max(*s))
    }
}

impl StableKoopmanOperator {
    pub fn new(
        u_raw: Matrix,
        v_raw: Matrix,
        sigma_raw: Vector,
        rho_max: f64,
        tie_factors: bool,
    ) -> Result<Self> {
        let d = sigma_raw.len();
        for (name, m) in [("u_raw", &u_raw), ("v_raw", &v_raw)] {
            if m.shape() != (d, d) {
                return Err(Error::shape(
                    "StableKoopmanOperator",
                    format!("{name} {d}x{d}"),
                    format!("{}x{}", m.rows(), m.cols()),
                ));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(name.into()));
            }
        }
        if sigma_raw.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sigma_raw".into()));
        }
        validate_rho(rho_max)?;
        Ok(Self {
            u_raw,
            v_raw,
            sigma_raw,
            rho_max,
            tie_factors,
        })
    }

    /// Gaussian raw factors and `Σ_raw = 0`, so every singular value starts at `ρ_max / 2`.
    pub fn init<R: Rng + ?Sized>(dim: usize, rho_max: f64, tie_factors: bool, rng: &mut R) -> Result<Self> {
        validate_rho(rho_max)?;
        let u_raw = Matrix::gaussian(dim, dim, 1.0, rng);
        let v_raw = Matrix::gaussian(dim, dim, 1.0, rng);
        Ok(Self {
            u_raw,
            v_raw,
            sigma_raw: Vector::zeros(dim),
            rho_max,
            tie_factors,
        })
    }

    pub fn dim(&self) -> usize {
        self.sigma_raw.len()
    }

    /// Re-orthogonalizes the raw factors and assembles `K`.
    pub fn materialize(&self) -> Result<MaterializedOperator> {
        let u = householder_qr(&self.u_raw)?.q;
        let v = if self.tie_factors {
            u.clone()
        } else {
            householder_qr(&self.v_raw)?.q
        };
        let sigma = self.singular_values();
        let d = self.dim();
        let mut us = u.clone();
        for r in 0..d {
            for c in 0..d {
                us[(r, c)] *= sigma[c];
            }
        }
        let k = us.matmul_t(&v)?;
        Ok(MaterializedOperator { k, u, v, sigma })
    }

    /// `Σᵢ = sigmoid(Σᵢ_raw) · ρ_max`.
    pub fn singular_values(&self) -> Vector {
        Vector::from_raw(
            self.sigma_raw
                .as_slice()
                .iter()
                .map(|s| stable_sigmoid(*s) * self.rho_max)
                .collect(),
        )
    }

    pub fn apply(&self, z: &Vector) -> Result<Vector> {
        self.materialize()?.apply(z)
    }

    pub fn rollout(&self, z0: &Vector, h: usize) -> Result<Vec<Vector>> {
        self.materialize()?.rollout(z0, h)
    }

    /// Certified cap on the decoded deviation after `h` steps:
    /// `‖W‖₂ · ρ_max^h · ‖Δz‖`.
    pub fn perturbation_bound(&self, decoder_norm: f64, h: usize, delta_z_norm: f64) -> f64 {
        perturbation_bound(self.rho_max, decoder_norm, h, delta_z_norm)
    }

    /// Largest singular value of the materialized operator; this is what the
    /// training trace logs as the operator's spectral radius bound.
    pub fn spectral_trace_entry(&self) -> f64 {
        self.singular_values()
            .as_slice()
            .iter()
            .fold(0.0, |m, s| m.max(*s))
    }
}

pub fn perturbation_bound(rho_max: f64, decoder_norm: f64, h: usize, delta_z_norm: f64) -> f64 {
    decoder_norm * rho_max.powi(h as i32) * delta_z_norm
}

pub(crate) fn validate_rho(rho_max: f64) -> Result<()> {
    if !(rho_max > 0.0 && rho_max < 1.0) {
        return Err(Error::Config(format!("rho_max must lie in (0, 1), got {rho_max}")));
    }
    Ok(())
}
