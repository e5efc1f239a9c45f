//! Acceptance gate. Each criterion prints exactly one `PASS`/`FAIL` line.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use koopcast::audit::{self, OrthogonalityLog};
use koopcast::config::ExperimentConfig;
use koopcast::grid::{cell_config, emit_grid_plots, grid_search, CellOutcome, GridOptions, GridSpec};
use koopcast::metrics::MetricsRecord;
use koopcast::pipeline::{run_experiment, CHECKPOINT_FILE};
use koopcast::ExpError;
use koopcast_core::data::{make_windows, TimeSeries};
use koopcast_core::encoder::{active_query_count, decompose, full_attention, probsparse_attention, Variant};
use koopcast_core::linalg::Matrix;
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20_240_601;

/// Timed criteria must not share the core with each other.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Written to the process stdout directly so the line shows without `--nocapture`.
fn verdict(id: u32, name: &str, pass: bool, detail: impl AsRef<str>) -> bool {
    let line = format!(
        "[criterion {id:>2}] {} {name}: {}\n",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    pass
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

#[test]
fn operator_invariants() {
    let _g = serial();
    let mut log = OrthogonalityLog::default();

    let t = Instant::now();
    let cap = audit::spectral_cap(1000, SEED, &mut log).unwrap();
    let cap_ok = cap.passed() && cap.cases == 1000 && t.elapsed() < Duration::from_secs(30);
    verdict(1, "spectral cap", cap_ok, format!("{cap}, limit 30s"));

    let t = Instant::now();
    let decay = audit::geometric_decay(200, 100, SEED + 1, &mut log).unwrap();
    let decay_ok = decay.passed() && decay.cases == 200 && t.elapsed() < Duration::from_secs(30);
    verdict(2, "geometric decay", decay_ok, format!("{decay}, limit 30s"));

    let t = Instant::now();
    let pert = audit::perturbation_bound(100, 50, SEED + 2, &mut log).unwrap();
    let pert_ok = pert.passed() && pert.cases == 100 && t.elapsed() < Duration::from_secs(120);
    verdict(3, "perturbation bound", pert_ok, format!("{pert}, limit 120s"));

    let orth_ok = log.holds() && log.materializations == 1300;
    verdict(
        4,
        "factor orthogonality",
        orth_ok,
        format!(
            "{} materializations, worst defect {:.3e} (tol 1e-10)",
            log.materializations, log.worst_defect
        ),
    );
    assert!(cap_ok && decay_ok && pert_ok && orth_ok);
}

#[test]
fn gradient_audit() {
    let _g = serial();
    let t = Instant::now();
    let report = audit::gradient_check(20, SEED + 4).unwrap();
    let ok = report.passed() && report.cases == 20 && t.elapsed() < Duration::from_secs(120);
    verdict(5, "gradient audit", ok, format!("{report}, tol 1e-4, limit 120s"));
    assert!(ok);
}

#[test]
fn sigma_gradient_bound() {
    let _g = serial();
    let report = audit::sigma_bound(100, SEED + 3).unwrap();
    let ok = report.passed() && report.cases == 100;
    verdict(6, "sigma gradient bound", ok, report.to_string());
    assert!(ok);
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

#[test]
fn probsparse_degenerates_to_full() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 7);
    let mut worst = 0.0f64;
    let mut all_active = true;
    for _ in 0..100 {
        let n = rng.random_range(1..=48);
        let dk = rng.random_range(1..=16);
        let q = uniform_matrix(&mut rng, n, dk, -2.0, 2.0);
        let k = uniform_matrix(&mut rng, n, dk, -2.0, 2.0);
        let v = uniform_matrix(&mut rng, n, dk, -2.0, 2.0);
        // a sampling factor large enough that u reaches the token count
        let factor = 1e6;
        all_active &= active_query_count(n, factor) == n;
        let sparse = probsparse_attention(&q, &k, &v, factor).unwrap();
        let full = full_attention(&q, &k, &v).unwrap();
        let diff = sparse.sub(&full).unwrap().max_abs();
        worst = worst.max(diff);
    }
    let ok = all_active && worst <= 1e-12;
    verdict(7, "probsparse with u = n equals full attention", ok, format!("100 cases, max |diff| {worst:.3e}"));
    assert!(ok);
}

#[test]
fn decomposition_identity() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 8);
    let mut exact = 0;
    let mut general_worst_ulps = 0.0f64;
    for _ in 0..100 {
        let t = rng.random_range(3..=200);
        let d = rng.random_range(1..=4);
        let kernel = 2 * rng.random_range(0..=(t - 1) / 2) + 1;
        let x = uniform_matrix(&mut rng, t, d, 1.0, 2.0);
        let (trend, seasonal) = decompose(&x, kernel).unwrap();
        if trend.add(&seasonal).unwrap() == x {
            exact += 1;
        }
        // the same series shifted and spread over several binades
        let g = Matrix::from_fn(t, d, |r, c| (x[(r, c)] - 1.5) * 10f64.powi((r % 7) as i32 - 3));
        let (tg, sg) = decompose(&g, kernel).unwrap();
        let back = tg.add(&sg).unwrap();
        // rounding in x - trend is relative to the larger operand
        for (i, (a, b)) in back.as_slice().iter().zip(g.as_slice()).enumerate() {
            let scale = b.abs().max(tg.as_slice()[i].abs()).max(f64::MIN_POSITIVE);
            general_worst_ulps = general_worst_ulps.max((a - b).abs() / (f64::EPSILON * scale));
        }
    }
    let ok = exact == 100;
    verdict(
        8,
        "decomposition identity",
        ok,
        format!(
            "{exact}/100 series reconstructed bit-exactly (values in [1, 2)); \
             mixed-magnitude series within {general_worst_ulps:.2} ulp of max(|x|, |trend|)"
        ),
    );
    assert!(ok);
}

struct DeskRun {
    variant: Variant,
    records: (MetricsRecord, MetricsRecord),
    checkpoint: Vec<u8>,
    losses: Vec<f64>,
    max_radius: f64,
    seconds: f64,
}

fn desk_run(variant: Variant) -> DeskRun {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::van_der_pol(SEED).with_variant(variant);
    cfg.output_dir = Some(dir.path().to_path_buf());
    let t = Instant::now();
    let run = run_experiment(&cfg).unwrap();
    let seconds = secs(t.elapsed());
    DeskRun {
        variant,
        checkpoint: std::fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap(),
        losses: run.trace.losses(),
        max_radius: run.trace.max_spectral_radius(),
        records: (run.train, run.test),
        seconds,
    }
}

fn first_desk_runs() -> &'static [DeskRun] {
    static RUNS: OnceLock<Vec<DeskRun>> = OnceLock::new();
    RUNS.get_or_init(|| Variant::ALL.iter().map(|&v| desk_run(v)).collect())
}

#[test]
fn van_der_pol_desk_run() {
    let _g = serial();
    let runs = first_desk_runs();
    let mut ok = true;
    let mut details = Vec::new();
    for r in runs {
        let test_mse = r.records.1.mse;
        let pass = test_mse <= 0.05
            && r.max_radius <= 0.99
            && r.losses.len() == 1000
            && r.losses[999] < r.losses[9]
            && r.seconds < 15.0 * 60.0;
        ok &= pass;
        details.push(format!(
            "{}: test mse {test_mse:.3e}, max radius {:.4}, loss@10 {:.3e} -> loss@1000 {:.3e}, {:.0}s",
            r.variant, r.max_radius, r.losses[9], r.losses[999], r.seconds
        ));
    }
    verdict(9, "Van der Pol desk run", ok, details.join("; "));
    assert!(ok);
}

#[test]
fn lorenz_smoke_run() {
    let _g = serial();
    let cfg = ExperimentConfig::lorenz(SEED);
    let t = Instant::now();
    let run = run_experiment(&cfg).unwrap();
    let seconds = secs(t.elapsed());
    let losses = run.trace.losses();
    let avg: Vec<f64> = losses.windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    let violations = avg.windows(2).filter(|w| w[1] >= w[0]).count();
    let radius = run.trace.max_spectral_radius();
    let ok = losses.len() == 300 && violations == 0 && radius <= 0.99 && seconds < 20.0 * 60.0;
    verdict(
        10,
        "Lorenz smoke run",
        ok,
        format!(
            "20-epoch average {:.3e} -> {:.3e}, {violations} non-decreasing steps, max radius {radius:.4}, {seconds:.0}s",
            avg[0],
            avg[avg.len() - 1]
        ),
    );
    assert!(ok);
}

#[test]
fn determinism() {
    let _g = serial();
    let first = first_desk_runs();
    let mut ok = true;
    let mut details = Vec::new();
    for a in first {
        let b = desk_run(a.variant);
        let records = a.records.0.same_outcome(&b.records.0) && a.records.1.same_outcome(&b.records.1);
        let checkpoint = a.checkpoint == b.checkpoint;
        ok &= records && checkpoint;
        details.push(format!(
            "{}: records {}, checkpoint {} ({} bytes)",
            a.variant,
            if records { "identical" } else { "differ" },
            if checkpoint { "identical" } else { "differ" },
            a.checkpoint.len()
        ));
    }
    verdict(11, "determinism", ok, details.join("; "));
    assert!(ok);
}

#[test]
fn windowing_formula() {
    let _g = serial();
    let mut runner = TestRunner::new(ProptestConfig {
        cases: 200,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    let strategy = (1usize..=120, 1usize..=60, 0usize..=200, 1usize..=3);
    let result = runner.run(&strategy, |(p, h, extra, d)| {
        let t = p + h - 1 + extra.max(1);
        let values = Matrix::from_fn(t, d, |r, c| (r * d + c) as f64);
        let series = TimeSeries::new(values.clone(), 1.0, (0..d).map(|c| format!("c{c}")).collect()).unwrap();
        let w = make_windows(&series, p, h).unwrap();
        prop_assert_eq!(w.len(), t - p - h + 1);
        for i in 0..w.len() {
            prop_assert_eq!(w.starts[i], i);
            for r in 0..p {
                prop_assert_eq!(w.x[i].row(r), values.row(i + r));
            }
            for r in 0..h {
                prop_assert_eq!(w.y[i].row(r), values.row(i + p + r));
            }
        }
        Ok(())
    });
    let ok = result.is_ok();
    let detail = match &result {
        Ok(()) => "200 random (T, P, H): count T - P - H + 1 and element alignment hold".to_string(),
        Err(e) => e.to_string(),
    };
    verdict(12, "windowing", ok, detail);
    assert!(ok);
}

#[test]
fn grid_harness() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("grid.jsonl");
    let mut base = ExperimentConfig::van_der_pol(SEED);
    base.epochs = 50;
    let spec = GridSpec::patch_horizon(16);
    let t = Instant::now();

    let interrupted = grid_search(
        &base,
        &spec,
        &GridOptions {
            results: results.clone(),
            stop_after: Some(7),
        },
    );
    let stopped = matches!(interrupted, Err(ExpError::Interrupted(7)));
    let before = std::fs::read_to_string(&results).unwrap();

    let table = grid_search(
        &base,
        &spec,
        &GridOptions {
            results: results.clone(),
            stop_after: None,
        },
    )
    .unwrap();
    let after = std::fs::read_to_string(&results).unwrap();
    let prefix_kept = before.lines().count() == 7 && after.starts_with(&before) && after.lines().count() == 30;
    let counts = table.cells.len() == 30 && table.computed == 23 && table.reused == 7;
    let completed = table.cells.iter().all(|c| matches!(c.outcome, CellOutcome::Completed { .. }));
    let capped = table
        .cells
        .iter()
        .filter_map(|c| c.test_record())
        .all(|r| r.final_spectral_radius <= base.rho_max);

    let paths = emit_grid_plots(&table, dir.path()).unwrap();
    let heatmap = std::fs::read_to_string(dir.path().join("heatmap_mse.csv")).unwrap();
    let rows: Vec<Vec<&str>> = heatmap.lines().map(|l| l.split(',').collect()).collect();
    let full_heatmap = paths.len() == 2
        && rows.len() == 6
        && rows.iter().all(|r| r.len() == 7)
        && rows[1..].iter().all(|r| r[1..].iter().all(|v| v.parse::<f64>().is_ok()));

    // a cell kept from before the interruption matches a fresh computation
    let kept = &table.cells[6];
    let fresh = run_experiment(&cell_config(&base, &spec, kept.patch_len, kept.horizon, kept.d_model)).unwrap();
    let reproducible = match &kept.outcome {
        CellOutcome::Completed { train, test } => train.same_outcome(&fresh.train) && test.same_outcome(&fresh.test),
        CellOutcome::Failed { .. } => false,
    };

    let ok = stopped && prefix_kept && counts && completed && capped && full_heatmap && reproducible;
    verdict(
        13,
        "grid harness",
        ok,
        format!(
            "interrupt after 7 cells {stopped}, resumed {}/{} computed/reused, results prefix kept {prefix_kept}, \
             all completed {completed}, radius capped {capped}, 6x5 heatmap {full_heatmap}, \
             kept cell reproducible {reproducible}, {:.0}s",
            table.computed,
            table.reused,
            secs(t.elapsed())
        ),
    );
    assert!(ok);
}
