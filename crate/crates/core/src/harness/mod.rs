//! Experiment orchestration: configuration, kappa sweeps and diagnostic
//! suites, all writing CSV.

mod config;
mod diagnostics;
mod sweep;

use serde::Serialize;

use crate::error::{Error, Result};

pub use config::{
    load_config, parse_config, Baseline, DiagnosticsSection, EnvKind, EnvSection, ExecuteSection,
    ExperimentConfig, GraphonChoice, GraphonSection, OutputSection, TrainSection,
};
pub use diagnostics::{diagnostic_instance, exact_fixed_point, run_diagnostics, Suite, SuiteReport};
pub use sweep::{run_sweep, sweep_csv, table_size, train, write_sweep, SweepReport, SweepRow, Timing};

pub(crate) fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
}

/// Worker count from `GMFS_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var("GMFS_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Runs `f` on a dedicated pool of `threads` workers (rayon's default when
/// `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
