//! Encoder → Koopman rollout → linear decoder.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowBatch;
use crate::encoder::{encode, EncoderConfig, EncoderParams, Variant};
use crate::error::{Error, Result};
use crate::koopman::{validate_rho, StableKoopmanOperator, DEFAULT_RHO_MAX};
use crate::linalg::{spectral_norm, Matrix, Vector};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Observed channels `d`.
    pub channels: usize,
    /// Context length `P`.
    pub context_len: usize,
    /// Forecast horizon `H`.
    pub horizon: usize,
    pub rho_max: f64,
    pub tie_factors: bool,
    /// Linear map from the trend window to the horizon (decomp variant only).
    pub trend_head: bool,
}

impl ModelConfig {
    /// Defaults for a variant: the trend head is on for `Decomp` only.
    pub fn new(encoder: EncoderConfig, channels: usize, context_len: usize, horizon: usize) -> Self {
        let trend_head = encoder.variant == Variant::Decomp;
        Self {
            encoder,
            channels,
            context_len,
            horizon,
            rho_max: DEFAULT_RHO_MAX,
            tie_factors: false,
            trend_head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate(self.context_len)?;
        validate_rho(self.rho_max)?;
        if self.channels == 0 || self.horizon == 0 {
            return Err(Error::Config("channels and horizon must be positive".into()));
        }
        if self.trend_head && self.encoder.variant != Variant::Decomp {
            return Err(Error::Config("a trend head requires the decomp variant".into()));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.d_model
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KoopmanForecaster {
    pub config: ModelConfig,
    pub seed: u64,
    pub encoder: EncoderParams,
    pub koopman: StableKoopmanOperator,
    /// `W`, `d × d_latent`.
    pub decoder: Matrix,
    /// `W_t`, `H × P`, shared across channels.
    pub trend_head: Option<Matrix>,
}

#[derive(Clone, Debug)]
pub struct ForecastOutput {
    /// `H × d`.
    pub y_hat: Matrix,
    /// `z_t, z_{t+1}, …, z_{t+H}`.
    pub latent_trajectory: Vec<Vector>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LyapunovMode {
    /// Penalize every consecutive pair of the rollout.
    #[default]
    AllPairs,
    /// Penalize only `(z_t, z_{t+1})`.
    FirstPair,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub lyap: f64,
}

impl KoopmanForecaster {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(&config.encoder, config.context_len, config.channels, &mut rng)?;
        let dl = config.latent_dim();
        let koopman = StableKoopmanOperator::init(dl, config.rho_max, config.tie_factors, &mut rng)?;
        let decoder = Matrix::gaussian(config.channels, dl, 1.0 / (dl as f64).sqrt(), &mut rng);
        let trend_head = config.trend_head.then(|| {
            Matrix::filled(config.horizon, config.context_len, 1.0 / config.context_len as f64)
        });
        Ok(Self {
            config,
            seed,
            encoder,
            koopman,
            decoder,
            trend_head,
        })
    }

    /// Every trainable tensor with a stable name and its shape.
    pub fn parameters(&self) -> Vec<(String, (usize, usize), &[f64])> {
        let mut out = self.encoder.named();
        let d = self.koopman.dim();
        out.push(("koopman.u_raw".into(), (d, d), self.koopman.u_raw.as_slice()));
        out.push(("koopman.v_raw".into(), (d, d), self.koopman.v_raw.as_slice()));
        out.push(("koopman.sigma_raw".into(), (1, d), self.koopman.sigma_raw.as_slice()));
        out.push(("decoder.weight".into(), self.decoder.shape(), self.decoder.as_slice()));
        if let Some(w) = &self.trend_head {
            out.push(("trend_head.weight".into(), w.shape(), w.as_slice()));
        }
        out
    }

    /// Mutable view in the same order as [`KoopmanForecaster::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = self.encoder.named_mut();
        out.push(("koopman.u_raw".into(), self.koopman.u_raw.as_mut_slice()));
        out.push(("koopman.v_raw".into(), self.koopman.v_raw.as_mut_slice()));
        out.push(("koopman.sigma_raw".into(), self.koopman.sigma_raw.as_mut_slice()));
        out.push(("decoder.weight".into(), self.decoder.as_mut_slice()));
        if let Some(w) = &mut self.trend_head {
            out.push(("trend_head.weight".into(), w.as_mut_slice()));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, _, p)| p.len()).sum()
    }

    fn check_window(&self, x: &Matrix) -> Result<()> {
        let expected = (self.config.context_len, self.config.channels);
        if x.shape() != expected {
            return Err(Error::shape(
                "forecast input",
                format!("{}x{}", expected.0, expected.1),
                format!("{}x{}", x.rows(), x.cols()),
            ));
        }
        Ok(())
    }

    /// Forecast for one `P×d` window.
    pub fn forward(&self, x: &Matrix) -> Result<ForecastOutput> {
        self.check_window(x)?;
        let enc = encode(x, &self.config.encoder, &self.encoder)?;
        let op = self.koopman.materialize()?;
        let h = self.config.horizon;
        let d = self.config.channels;

        let mut trajectory = Vec::with_capacity(h + 1);
        trajectory.push(enc.z.clone());
        let mut y_hat = Matrix::zeros(h, d);
        let mut z = enc.z;
        for step in 0..h {
            z = op.apply(&z)?;
            let decoded = self.decoder.matvec(&z)?;
            y_hat.row_mut(step).copy_from_slice(decoded.as_slice());
            trajectory.push(z.clone());
        }
        if let (Some(wt), Some(trend)) = (&self.trend_head, &enc.trend) {
            let contribution = wt.matmul(trend)?;
            y_hat = y_hat.add(&contribution)?;
        }
        Ok(ForecastOutput {
            y_hat,
            latent_trajectory: trajectory,
        })
    }

    /// Mean per-sample loss over a batch.
    pub fn batch_loss(&self, batch: &WindowBatch, lambda: f64, mode: LyapunovMode) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::TooShort("empty window batch".into()));
        }
        let mut acc = LossBreakdown::default();
        for (x, y) in batch.x.iter().zip(&batch.y) {
            let out = self.forward(x)?;
            let l = training_loss(&out.y_hat, y, &out.latent_trajectory, lambda, mode)?;
            acc.total += l.total;
            acc.mse += l.mse;
            acc.lyap += l.lyap;
        }
        let n = batch.len() as f64;
        Ok(LossBreakdown {
            total: acc.total / n,
            mse: acc.mse / n,
            lyap: acc.lyap / n,
        })
    }

    /// `‖W‖₂ · ρ_max^h · ‖Δz‖`.
    pub fn certified_output_bound(&self, h: usize, delta_z_norm: f64) -> Result<f64> {
        let w = spectral_norm(&self.decoder)?;
        Ok(self.koopman.perturbation_bound(w, h, delta_z_norm))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            params: self
                .parameters()
                .into_iter()
                .map(|(name, (rows, cols), data)| ParamRecord {
                    name,
                    shape: [rows, cols],
                    data: data.to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let fail = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path)?;
        let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
        if file.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(fail(format!(
                "unsupported format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                file.format_version
            )));
        }
        let mut model = KoopmanForecaster::init(file.config, file.seed).map_err(|e| fail(e.to_string()))?;
        let expected: Vec<(String, (usize, usize))> = model
            .parameters()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if expected.len() != file.params.len() {
            return Err(fail(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                file.params.len()
            )));
        }
        for ((name, shape), (slot_name, slot)) in expected.iter().zip(model.parameters_mut()) {
            debug_assert_eq!(name, &slot_name);
            let record = file
                .params
                .iter()
                .find(|p| &p.name == name)
                .ok_or_else(|| fail(format!("missing parameter {name}")))?;
            if record.shape != [shape.0, shape.1] || record.data.len() != slot.len() {
                return Err(Error::shape(
                    "checkpoint parameter",
                    format!("{name} {}x{}", shape.0, shape.1),
                    format!(
                        "{}x{} with {} values",
                        record.shape[0],
                        record.shape[1],
                        record.data.len()
                    ),
                ));
            }
            if record.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("checkpoint parameter {name}")));
            }
            slot.copy_from_slice(&record.data);
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    seed: u64,
    config: ModelConfig,
    params: Vec<ParamRecord>,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

/// Per-sample loss: mean squared error over all `H·d` entries plus `λ` times
/// the mean of `ReLU(‖z_next‖² − ‖z_prev‖²)` over consecutive latent pairs.
pub fn training_loss(
    y_hat: &Matrix,
    y: &Matrix,
    trajectory: &[Vector],
    lambda: f64,
    mode: LyapunovMode,
) -> Result<LossBreakdown> {
    if y_hat.shape() != y.shape() {
        return Err(Error::shape(
            "training_loss",
            format!("{:?}", y.shape()),
            format!("{:?}", y_hat.shape()),
        ));
    }
    let n = (y.rows() * y.cols()).max(1) as f64;
    let mse = y_hat
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let pairs = match mode {
        LyapunovMode::AllPairs => trajectory.len().saturating_sub(1),
        LyapunovMode::FirstPair => trajectory.len().min(2).saturating_sub(1),
    };
    let lyap = if pairs == 0 {
        0.0
    } else {
        (0..pairs)
            .map(|i| (trajectory[i + 1].norm_squared() - trajectory[i].norm_squared()).max(0.0))
            .sum::<f64>()
            / pairs as f64
    };
    Ok(LossBreakdown {
        total: mse + lambda * lyap,
        mse,
        lyap,
    })
}
