use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use koopcast::audit;
use koopcast::config::{DataSource, ExperimentConfig};
use koopcast::error::{ExpError, Result};
use koopcast::grid::{emit_grid_plots, grid_search, load_results, GridOptions, GridSpec, GridTable};
use koopcast::pipeline::{
    evaluate_checkpoint, prepare_data, run_experiment, write_records, CHECKPOINT_FILE, CONFIG_FILE, EIGEN_TRACE_FILE,
    TRACE_FILE,
};
use koopcast::plots::write_predictions;
use koopcast_core::data::{simulate, SimulatorConfig};
use koopcast_core::encoder::Variant;
use koopcast_core::forecaster::KoopmanForecaster;

#[derive(Parser)]
#[command(name = "koopcast", version, about = "Stable Koopman forecaster experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic series as CSV.
    Simulate {
        #[arg(long, value_enum, default_value = "van-der-pol")]
        system: SystemArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        noise_std: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one configuration.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        seed: u64,
    },
    /// Score a checkpoint on the data described by a saved config.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the two records here as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep patch length, horizon and width.
    Grid {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_values_t = [80, 90, 100, 110, 120, 130])]
        patch_lens: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [10, 15, 20, 25, 30])]
        horizons: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [16])]
        d_models: Vec<usize>,
        /// Context length as a multiple of the patch length.
        #[arg(long, default_value_t = 2)]
        context_multiple: usize,
        /// JSON-lines results; defaults to grid.jsonl in the output directory.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Stop after this many newly computed cells.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Run the operator, bound and gradient audits.
    Audit {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rebuild plot CSVs from a run directory or a grid results file.
    ExportPlots {
        #[arg(long, conflicts_with = "results", required_unless_present = "results")]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SystemArg {
    VanDerPol,
    Lorenz,
}

impl SystemArg {
    fn config(self, seed: u64) -> SimulatorConfig {
        match self {
            SystemArg::VanDerPol => SimulatorConfig::van_der_pol(seed),
            SystemArg::Lorenz => SimulatorConfig::lorenz(seed),
        }
    }
}

/// Overrides on top of a base configuration.
#[derive(Args)]
struct RunArgs {
    /// Base configuration as JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, conflicts_with = "csv")]
    system: Option<SystemArg>,
    #[arg(long, requires = "columns")]
    csv: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    columns: Vec<String>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    context_len: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    patch_len: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    ffn_width: Option<usize>,
    #[arg(long)]
    rho_max: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    split: Option<f64>,
    /// Train on unscaled data.
    #[arg(long)]
    no_scale: bool,
    /// Report metrics in original units.
    #[arg(long)]
    report_inverse: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn build(&self, seed: u64) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.csv, self.system) {
            (Some(path), _, _) => ExperimentConfig::load(path)?,
            (None, Some(csv), _) => ExperimentConfig::csv(csv, self.columns.clone(), seed),
            (None, None, Some(SystemArg::Lorenz)) => ExperimentConfig::lorenz(seed),
            (None, None, _) => ExperimentConfig::van_der_pol(seed),
        };
        if self.config.is_some() {
            if let Some(csv) = &self.csv {
                cfg.data = DataSource::Csv {
                    path: csv.clone(),
                    columns: self.columns.clone(),
                };
            } else if let Some(system) = self.system {
                cfg.data = DataSource::Simulator(system.config(seed));
            }
        }
        cfg.seed = seed;
        macro_rules! set {
            ($($field:ident <- $arg:ident),*) => {
                $(if let Some(v) = self.$arg { cfg.$field = v; })*
            };
        }
        set!(variant <- variant, context_len <- context_len, horizon <- horizon, patch_len <- patch_len,
             d_model <- d_model, n_layers <- n_layers, n_heads <- n_heads, ffn_width <- ffn_width,
             rho_max <- rho_max, lambda <- lambda, epochs <- epochs, learning_rate <- learning_rate,
             split_fraction <- split);
        if self.batch_size.is_some() {
            cfg.batch_size = self.batch_size;
        }
        if self.no_scale {
            cfg.scale = false;
        }
        if self.report_inverse {
            cfg.report_inverse = true;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("serializable"));
}

fn simulate_cmd(system: SystemArg, seed: u64, t_end: Option<f64>, dt: Option<f64>, noise: Option<f64>, out: &Path) -> Result<()> {
    let mut cfg = system.config(seed);
    if let Some(v) = t_end {
        cfg.t_end = v;
    }
    if let Some(v) = dt {
        cfg.dt = v;
    }
    if let Some(v) = noise {
        cfg.noise_std = v;
    }
    let series = simulate(&cfg)?;
    series.write_csv(out)?;
    eprintln!("wrote {} steps x {} channels to {}", series.len(), series.channels(), out.display());
    Ok(())
}

fn export_run(run_dir: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(&run_dir.join(CONFIG_FILE))?;
    let model = KoopmanForecaster::load_checkpoint(&run_dir.join(CHECKPOINT_FILE))?;
    let data = prepare_data(&cfg)?;
    let (_, y_hat, y) = koopcast::pipeline::evaluate(&model, &data.test, data.scaler.as_ref(), cfg.report_inverse)?;
    std::fs::create_dir_all(out).map_err(|e| ExpError::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let dump = koopcast::pipeline::PredictionDump {
        channel_names: data.channel_names,
        context_len: cfg.context_len,
        horizon: cfg.horizon,
        offset: data.test_offset,
        starts: data.test.starts.clone(),
        y_hat,
        y,
    };
    for p in write_predictions(out, &dump)? {
        eprintln!("wrote {}", p.display());
    }
    let trace = koopcast::plots::read_eigen_trace(&run_dir.join(TRACE_FILE))?;
    let mut text = String::from("epoch,spectral_radius\n");
    for (epoch, r) in trace {
        text.push_str(&format!("{epoch},{r}\n"));
    }
    let path = out.join(EIGEN_TRACE_FILE);
    std::fs::write(&path, text).map_err(|e| ExpError::Io {
        path: path.clone(),
        source: e,
    })?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn export_grid(results: &Path, out: &Path) -> Result<()> {
    let cells = load_results(results)?;
    if cells.is_empty() {
        return Err(ExpError::Config(format!("{} holds no grid cells", results.display())));
    }
    let axis = |f: fn(&koopcast::grid::GridCell) -> usize| {
        let mut v: Vec<usize> = cells.iter().map(f).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let spec = GridSpec {
        patch_lens: axis(|c| c.patch_len),
        horizons: axis(|c| c.horizon),
        d_models: axis(|c| c.d_model),
        context_multiple: cells[0].context_len / cells[0].patch_len.max(1),
    };
    let table = GridTable {
        spec,
        cells,
        computed: 0,
        reused: 0,
    };
    for p in emit_grid_plots(&table, out)? {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            system,
            seed,
            t_end,
            dt,
            noise_std,
            out,
        } => simulate_cmd(system, seed, t_end, dt, noise_std, &out),
        Command::Train { run, seed } => {
            let cfg = run.build(seed)?;
            let out = run_experiment(&cfg)?;
            print_json(&out.train);
            print_json(&out.test);
            Ok(())
        }
        Command::Evaluate {
            config,
            checkpoint,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let model = KoopmanForecaster::load_checkpoint(&checkpoint)?;
            let (train, test) = evaluate_checkpoint(&cfg, &model)?;
            print_json(&train);
            print_json(&test);
            if let Some(path) = out {
                write_records(&path, &[&train, &test])?;
            }
            Ok(())
        }
        Command::Grid {
            run,
            seed,
            patch_lens,
            horizons,
            d_models,
            context_multiple,
            results,
            stop_after,
        } => {
            let base = run.build(seed)?;
            let spec = GridSpec {
                patch_lens,
                horizons,
                d_models,
                context_multiple,
            };
            let out_dir = base.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
            let opts = GridOptions {
                results: results.unwrap_or_else(|| out_dir.join("grid.jsonl")),
                stop_after,
            };
            let table = grid_search(&base, &spec, &opts)?;
            eprintln!("{} cells computed, {} reused", table.computed, table.reused);
            for p in emit_grid_plots(&table, &out_dir)? {
                eprintln!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Audit { seed } => {
            let suite = audit::run_all(seed)?;
            for r in &suite.reports {
                println!("{} {r}", if r.passed() { "PASS" } else { "FAIL" });
            }
            let o = &suite.orthogonality;
            println!(
                "{} orthogonality: {} materializations, worst defect {:.3e}",
                if o.holds() { "PASS" } else { "FAIL" },
                o.materializations,
                o.worst_defect
            );
            if suite.passed() {
                Ok(())
            } else {
                Err(ExpError::AuditFailed("at least one audit failed".into()))
            }
        }
        Command::ExportPlots { run_dir, results, out } => match (run_dir, results) {
            (Some(dir), _) => export_run(&dir, &out),
            (None, Some(results)) => export_grid(&results, &out),
            (None, None) => Err(ExpError::Config("pass --run-dir or --results".into())),
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
