//! Checks against independent dense implementations.

use koopcast_core::data::{simulate, SimulatorConfig};
use koopcast_core::encoder::{encode, EncoderConfig, PeKind, Variant};
use koopcast_core::forecaster::{KoopmanForecaster, ModelConfig};
use koopcast_core::koopman::StableKoopmanOperator;
use koopcast_core::linalg::{householder_qr, spectral_norm, stable_sigmoid, Matrix, Vector};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// nalgebra's QR with signs flipped so that R has a nonnegative diagonal.
fn oracle_q(m: &Matrix) -> DMatrix<f64> {
    let qr = to_na(m).qr();
    let (mut q, r) = (qr.q(), qr.r());
    for i in 0..r.nrows() {
        if r[(i, i)] < 0.0 {
            q.column_mut(i).neg_mut();
        }
    }
    q
}

#[test]
fn householder_q_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [2, 3, 7, 16, 33, 64] {
        let m = random_matrix(&mut rng, n, n);
        let q = to_na(&householder_qr(&m).unwrap().q);
        let diff = (q - oracle_q(&m)).abs().max();
        assert!(diff < 1e-9, "n={n}: {diff}");
    }
}

#[test]
fn spectral_norm_matches_largest_singular_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (r, c) = (rng.random_range(1..40), rng.random_range(1..40));
        let m = random_matrix(&mut rng, r, c);
        let sv = to_na(&m).singular_values();
        let expected = sv.iter().cloned().fold(0.0, f64::max);
        let got = spectral_norm(&m).unwrap();
        assert!((got - expected).abs() <= 1e-8 * expected.max(1.0), "{r}x{c}: {got} vs {expected}");
    }
}

#[test]
fn operator_singular_values_are_the_capped_sigmoids() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for d in [2, 5, 12, 31] {
        let mut op = StableKoopmanOperator::init(d, 0.9, false, &mut rng).unwrap();
        op.sigma_raw = Vector::new((0..d).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
        let k = op.materialize().unwrap().k;
        let mut got: Vec<f64> = to_na(&k).singular_values().iter().cloned().collect();
        let mut want: Vec<f64> = op.sigma_raw.as_slice().iter().map(|s| stable_sigmoid(*s) * 0.9).collect();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "d={d}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn forecast_matches_hand_unrolled_composition() {
    let enc = EncoderConfig {
        variant: Variant::Patch,
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        ffn_width: 8,
        patch_len: 4,
        pe_kind: PeKind::Sinusoidal,
        ma_kernel: 3,
        probsparse_factor: 5.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..10 {
        let model = KoopmanForecaster::init(ModelConfig::new(enc.clone(), 2, 8, 3), seed).unwrap();
        let x = random_matrix(&mut rng, 8, 2);
        let out = model.forward(&x).unwrap();

        let z = encode(&x, &model.config.encoder, &model.encoder).unwrap().z;
        let u = oracle_q(&model.koopman.u_raw);
        let v = oracle_q(&model.koopman.v_raw);
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            4,
            model.koopman.sigma_raw.as_slice().iter().map(|r| stable_sigmoid(*r) * model.config.rho_max),
        ));
        let k = &u * s * v.transpose();
        let w = to_na(&model.decoder);
        let mut zk = nalgebra::DVector::from_row_slice(z.as_slice());
        for h in 0..3 {
            zk = &k * zk;
            let y = &w * &zk;
            for c in 0..2 {
                assert!((y[c] - out.y_hat[(h, c)]).abs() <= 1e-12, "seed {seed} step {h}");
            }
        }
    }
}

/// Straightforward re-implementation of the explicit Euler recursion.
#[test]
fn noiseless_simulators_match_independent_euler() {
    let mut cfg = SimulatorConfig::van_der_pol(0);
    cfg.noise_std = 0.0;
    let series = simulate(&cfg).unwrap();
    assert_eq!(series.len(), 2001);
    let (mut x1, mut x2) = (2.0f64, 0.0f64);
    for t in 0..series.len() {
        assert_eq!(series.values.row(t), &[x1, x2], "step {t}");
        let (d1, d2) = (x2, 1.0 * (1.0 - x1 * x1) * x2 - x1);
        x1 += 0.01 * d1;
        x2 += 0.01 * d2;
    }

    let mut cfg = SimulatorConfig::lorenz(0);
    cfg.noise_std = 0.0;
    let series = simulate(&cfg).unwrap();
    let mut s = [1.0f64, 1.0, 1.0];
    for t in 0..series.len() {
        assert_eq!(series.values.row(t), &s, "step {t}");
        let d = [
            10.0 * (s[1] - s[0]),
            s[0] * (28.0 - s[2]) - s[1],
            s[0] * s[1] - 8.0 / 3.0 * s[2],
        ];
        for i in 0..3 {
            s[i] += 0.01 * d[i];
        }
    }
    // the third coordinate stays positive once the transient is over
    assert!((200..series.len()).all(|t| series.values[(t, 2)] > 0.0));
}
