//! Experiment driver for the stable Koopman forecaster: single runs, grid
//! searches with resumable JSON-lines results, invariant audits and plain-CSV
//! plot data.

/// Training allocates and frees many multi-megabyte tape buffers per epoch;
/// the system allocator returns each one to the OS and faults it back in.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod audit;
pub mod config;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod pipeline;
pub mod plots;

pub use config::{DataSource, ExperimentConfig};
pub use error::{ExpError, Result};
pub use grid::{grid_search, GridOptions, GridSpec, GridTable};
pub use metrics::{compute_metrics, MetricsRecord, Split};
pub use pipeline::{run_experiment, RunOutput};
