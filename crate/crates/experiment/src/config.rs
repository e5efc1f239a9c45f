use std::path::{Path, PathBuf};

use koopcast_core::data::SimulatorConfig;
use koopcast_core::encoder::{EncoderConfig, PeKind, Variant};
use koopcast_core::forecaster::{LyapunovMode, ModelConfig};
use koopcast_core::koopman::DEFAULT_RHO_MAX;
use koopcast_core::train::{LossOptions, TrainingConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ExpError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Simulator(SimulatorConfig),
    Csv { path: PathBuf, columns: Vec<String> },
}

/// Everything needed to reproduce one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// MinMax-scale to `[0, 1]` using the training split.
    pub scale: bool,
    pub variant: Variant,
    /// Context length `P`.
    pub context_len: usize,
    /// Horizon `H`.
    pub horizon: usize,
    /// Patch length `p`.
    pub patch_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub pe_kind: PeKind,
    pub ma_kernel: usize,
    pub probsparse_factor: f64,
    pub rho_max: f64,
    pub lambda: f64,
    pub lyapunov: LyapunovMode,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Fraction of the series (chronological) used for training.
    pub split_fraction: f64,
    /// Report metrics in the original units instead of the scaled domain.
    pub report_inverse: bool,
    /// Not part of the fingerprint.
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Van der Pol desk run: P = 32, H = 5, p = 16, d_model = 16, two heads,
    /// two layers, 1000 epochs.
    pub fn van_der_pol(seed: u64) -> Self {
        let enc = EncoderConfig::default();
        Self {
            data: DataSource::Simulator(SimulatorConfig::van_der_pol(seed)),
            scale: true,
            variant: Variant::Patch,
            context_len: 32,
            horizon: 5,
            patch_len: 16,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_width: enc.ffn_width,
            pe_kind: enc.pe_kind,
            ma_kernel: enc.ma_kernel,
            probsparse_factor: enc.probsparse_factor,
            rho_max: DEFAULT_RHO_MAX,
            lambda: 0.1,
            lyapunov: LyapunovMode::AllPairs,
            epochs: 1000,
            learning_rate: 1e-3,
            batch_size: None,
            seed,
            split_fraction: 0.8,
            report_inverse: false,
            output_dir: None,
        }
    }

    /// Lorenz smoke run: P = 150, p = 50, 300 epochs.
    pub fn lorenz(seed: u64) -> Self {
        Self {
            data: DataSource::Simulator(SimulatorConfig::lorenz(seed)),
            context_len: 150,
            patch_len: 50,
            epochs: 300,
            ..Self::van_der_pol(seed)
        }
    }

    /// Defaults for an external CSV file; note the smaller learning rate.
    pub fn csv(path: impl AsRef<Path>, columns: Vec<String>, seed: u64) -> Self {
        Self {
            data: DataSource::Csv {
                path: path.as_ref().to_path_buf(),
                columns,
            },
            learning_rate: 3e-4,
            ..Self::van_der_pol(seed)
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            variant: self.variant,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_width: self.ffn_width,
            patch_len: self.patch_len,
            pe_kind: self.pe_kind,
            ma_kernel: self.ma_kernel,
            probsparse_factor: self.probsparse_factor,
        }
    }

    pub fn model_config(&self, channels: usize) -> ModelConfig {
        let mut mc = ModelConfig::new(self.encoder_config(), channels, self.context_len, self.horizon);
        mc.rho_max = self.rho_max;
        mc
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.seed,
            loss: LossOptions {
                lambda: self.lambda,
                lyapunov: self.lyapunov,
                ..LossOptions::default()
            },
            ..TrainingConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ExpError::Config(msg));
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad(format!("split fraction must lie in (0, 1), got {}", self.split_fraction));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a finite value >= 0, got {}", self.lambda));
        }
        if let DataSource::Csv { columns, .. } = &self.data {
            if columns.is_empty() {
                return bad("a CSV source needs at least one column".into());
            }
        }
        self.model_config(1).validate()?;
        self.training_config().validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, with the output directory cleared.
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ExpError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| ExpError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|e| ExpError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_ignores_output_dir_only() {
        let a = ExperimentConfig::van_der_pol(3);
        let mut b = a.clone();
        b.output_dir = Some("/tmp/elsewhere".into());
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
        b.horizon += 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), ExperimentConfig::van_der_pol(4).fingerprint());
    }

    #[test]
    fn json_round_trip() {
        for cfg in [
            ExperimentConfig::lorenz(1),
            ExperimentConfig::csv("data.csv", vec!["a".into(), "b".into()], 2),
        ] {
            let text = serde_json::to_string(&cfg).unwrap();
            let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn validation_rejects_inconsistent_encoder() {
        assert!(ExperimentConfig::van_der_pol(0).validate().is_ok());
        let mut cfg = ExperimentConfig::van_der_pol(0);
        cfg.n_heads = 3;
        assert!(matches!(cfg.validate(), Err(ExpError::Core(_))));
        let mut cfg = ExperimentConfig::van_der_pol(0);
        cfg.split_fraction = 1.0;
        assert!(matches!(cfg.validate(), Err(ExpError::Config(_))));
        let mut cfg = ExperimentConfig::van_der_pol(0);
        cfg.patch_len = 7;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 1);
    }
}
