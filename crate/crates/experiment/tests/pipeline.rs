use koopcast::config::{DataSource, ExperimentConfig};
use koopcast::grid::{grid_search, GridOptions, GridSpec};
use koopcast::metrics::{compute_metrics, Split};
use koopcast::pipeline::{
    evaluate_checkpoint, prepare_data, read_records, run_experiment, CHECKPOINT_FILE, CONFIG_FILE, EIGEN_TRACE_FILE,
    METRICS_FILE, TRACE_FILE,
};
use koopcast::plots::read_eigen_trace;
use koopcast_core::data::{simulate, SimulatorConfig};
use koopcast_core::encoder::Variant;
use koopcast_core::forecaster::KoopmanForecaster;
use koopcast_core::linalg::Matrix;

/// Small and fast: short series, narrow model.
fn small(seed: u64) -> ExperimentConfig {
    let mut sim = SimulatorConfig::van_der_pol(seed);
    sim.t_end = 4.0;
    let mut cfg = ExperimentConfig::van_der_pol(seed);
    cfg.data = DataSource::Simulator(sim);
    cfg.context_len = 16;
    cfg.patch_len = 8;
    cfg.horizon = 3;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.ffn_width = 16;
    cfg.epochs = 5;
    cfg
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(1);
    cfg.output_dir = Some(dir.path().to_path_buf());
    let run = run_experiment(&cfg).unwrap();

    for f in [CONFIG_FILE, METRICS_FILE, TRACE_FILE, EIGEN_TRACE_FILE, CHECKPOINT_FILE] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let records = read_records(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(records, vec![run.train.clone(), run.test.clone()]);
    assert_eq!((records[0].split, records[1].split), (Split::Train, Split::Test));
    assert!(records.iter().all(|r| r.final_spectral_radius <= cfg.rho_max && r.mse >= 0.0 && r.mae >= 0.0));

    let trace = read_eigen_trace(&dir.path().join(EIGEN_TRACE_FILE)).unwrap();
    assert_eq!(trace.len(), cfg.epochs);
    assert_eq!(trace, read_eigen_trace(&dir.path().join(TRACE_FILE)).unwrap());

    let data = prepare_data(&cfg).unwrap();
    let pred = std::fs::read_to_string(dir.path().join("predictions_x1.csv")).unwrap();
    assert_eq!(pred.lines().count(), 1 + data.test.len() * cfg.horizon);
    assert_eq!(ExperimentConfig::load(&dir.path().join(CONFIG_FILE)).unwrap(), cfg);
}

#[test]
fn checkpoint_evaluation_reproduces_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(2);
    cfg.output_dir = Some(dir.path().to_path_buf());
    let run = run_experiment(&cfg).unwrap();
    let model = KoopmanForecaster::load_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(model, run.model);
    let (train, test) = evaluate_checkpoint(&cfg, &model).unwrap();
    assert!(train.same_outcome(&without_trace(&run.train)));
    assert!(test.same_outcome(&without_trace(&run.test)));

    let mut other = cfg.clone();
    other.d_model = 16;
    assert_eq!(evaluate_checkpoint(&other, &model).unwrap_err().exit_code(), 1);
}

/// Records from a persisted run name their trace file; fresh evaluations do not.
fn without_trace(r: &koopcast::MetricsRecord) -> koopcast::MetricsRecord {
    koopcast::MetricsRecord {
        trace_file: None,
        ..r.clone()
    }
}

#[test]
fn zero_epochs_records_the_seeded_baseline() {
    let cfg = ExperimentConfig { epochs: 0, ..small(3) };
    let run = run_experiment(&cfg).unwrap();
    assert!(run.trace.is_empty());
    let untrained = KoopmanForecaster::init(cfg.model_config(2), cfg.seed).unwrap();
    assert_eq!(run.model, untrained);
    assert!(run.test.mse > 0.0);
}

#[test]
fn identical_configs_give_identical_records() {
    let a = run_experiment(&small(4)).unwrap();
    let b = run_experiment(&small(4)).unwrap();
    assert!(a.train.same_outcome(&b.train) && a.test.same_outcome(&b.test));
    let c = run_experiment(&small(5)).unwrap();
    assert!(!a.test.same_outcome(&c.test));
}

#[test]
fn scaler_fit_ignores_the_test_split() {
    let cfg = small(6);
    let data = prepare_data(&cfg).unwrap();
    let train_max = data
        .train
        .x
        .iter()
        .flat_map(|m| m.as_slice().iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(train_max <= 1.0);
    let sc = data.scaler.unwrap();
    let series = simulate(&SimulatorConfig {
        t_end: 4.0,
        ..SimulatorConfig::van_der_pol(6)
    })
    .unwrap();
    let cut = data.test_offset;
    let train_part = series.values.row_block(0, cut);
    for c in 0..2 {
        let col = train_part.column(c);
        assert_eq!(sc.min().unwrap()[c], col.iter().copied().fold(f64::INFINITY, f64::min));
        assert_eq!(sc.max().unwrap()[c], col.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
}

#[test]
fn inverse_reporting_changes_units_only() {
    let scaled = run_experiment(&small(7)).unwrap();
    let inverse = run_experiment(&ExperimentConfig {
        report_inverse: true,
        ..small(7)
    })
    .unwrap();
    assert_eq!(scaled.model, inverse.model);
    assert_ne!(scaled.test.mse, inverse.test.mse);
}

#[test]
fn metrics_are_invariant_to_channel_permutation() {
    let run = run_experiment(&small(8)).unwrap();
    let p = &run.predictions;
    let swap = |ms: &[Matrix]| -> Vec<Matrix> {
        ms.iter()
            .map(|m| Matrix::from_fn(m.rows(), m.cols(), |r, c| m[(r, m.cols() - 1 - c)]))
            .collect()
    };
    let a = compute_metrics(&p.y_hat, &p.y).unwrap();
    let b = compute_metrics(&swap(&p.y_hat), &swap(&p.y)).unwrap();
    assert!((a.mse - b.mse).abs() <= 1e-15 * a.mse);
    assert!((a.mae - b.mae).abs() <= 1e-15 * a.mae);
}

#[test]
fn degenerate_grid_matches_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let base = small(9);
    let spec = GridSpec {
        patch_lens: vec![8],
        horizons: vec![3],
        d_models: vec![8],
        context_multiple: 2,
    };
    let table = grid_search(
        &base,
        &spec,
        &GridOptions {
            results: dir.path().join("g.jsonl"),
            stop_after: None,
        },
    )
    .unwrap();
    assert_eq!(table.cells.len(), 1);
    let cfg = koopcast::grid::cell_config(&base, &spec, 8, 3, 8);
    let run = run_experiment(&cfg).unwrap();
    assert!(table.cells[0].test_record().unwrap().same_outcome(&run.test));
}

#[test]
fn grid_is_invariant_to_axis_order_and_records_failures() {
    let dir = tempfile::tempdir().unwrap();
    let base = ExperimentConfig { epochs: 2, ..small(10) };
    let forward = GridSpec {
        patch_lens: vec![4, 8],
        horizons: vec![2, 3],
        // width 6 with two heads is fine, width 5 is not
        d_models: vec![5, 6],
        context_multiple: 2,
    };
    let reversed = GridSpec {
        patch_lens: vec![8, 4],
        horizons: vec![3, 2],
        d_models: vec![6, 5],
        context_multiple: 2,
    };
    let run = |spec: &GridSpec, name: &str| {
        grid_search(
            &base,
            spec,
            &GridOptions {
                results: dir.path().join(name),
                stop_after: None,
            },
        )
        .unwrap()
    };
    let a = run(&forward, "a.jsonl");
    let b = run(&reversed, "b.jsonl");
    assert_eq!(a.cells.len(), 8);
    for cell in &a.cells {
        let other = b.cell(cell.patch_len, cell.horizon, cell.d_model).unwrap();
        assert!(cell.same_outcome(other));
        assert_eq!(cell.test_record().is_none(), cell.d_model == 5);
    }
    // resuming a finished grid computes nothing
    let again = run(&forward, "a.jsonl");
    assert_eq!((again.computed, again.reused), (0, 8));
}

#[test]
fn csv_source_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vdp.csv");
    let mut sim = SimulatorConfig::van_der_pol(11);
    sim.t_end = 4.0;
    simulate(&sim).unwrap().write_csv(&path).unwrap();

    let from_sim = small(11);
    let csv_defaults = ExperimentConfig::csv(&path, vec!["x1".into(), "x2".into()], 11);
    assert_eq!(csv_defaults.learning_rate, 3e-4);
    let template = ExperimentConfig {
        data: csv_defaults.data,
        ..from_sim.clone()
    };
    let a = prepare_data(&template).unwrap();
    let b = prepare_data(&from_sim).unwrap();
    assert_eq!(a.train.len(), b.train.len());
    // the CSV holds round-trip decimal text, so the data agree exactly
    assert_eq!(a.train, b.train);
    assert_eq!(a.test, b.test);

    let missing = ExperimentConfig {
        data: DataSource::Csv {
            path: dir.path().join("nope.csv"),
            columns: vec!["x1".into()],
        },
        ..from_sim
    };
    assert_eq!(run_experiment(&missing).unwrap_err().exit_code(), 3);
}

#[test]
fn every_variant_trains_end_to_end() {
    for v in Variant::ALL {
        let cfg = small(12).with_variant(v);
        let run = run_experiment(&cfg).unwrap();
        assert_eq!(run.trace.len(), cfg.epochs);
        assert!(run.test.mse.is_finite());
        assert!(run.trace.max_spectral_radius() <= cfg.rho_max);
    }
}
