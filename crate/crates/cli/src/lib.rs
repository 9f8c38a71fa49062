//! Command-line driver for mirror-po: dataset generation, training,
//! evolution, landscape export, mirror-solution verification and evaluation,
//! each recorded in a manifest that reproduces its artifacts bit-exactly.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;

pub use error::{CliError, CliResult};

/// Environment variable setting the worker-pool size.
pub const WORKERS_ENV: &str = "MIRROR_PO_WORKERS";

/// Sizes the global worker pool from [`WORKERS_ENV`] when set.
pub fn init_workers() -> CliResult<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{WORKERS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size worker pool: {e}")))
}
