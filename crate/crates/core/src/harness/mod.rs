//! Experiment driver: configuration, scans, exponent fits and the check
//! suite.
//!
//! Every replicate draws from its own stream `rng::stream(seed, tag, r)`, and
//! results are collected in replicate order before any aggregation, so the
//! output does not depend on the number of threads.

mod check;
mod config;
mod fit;
mod scan;

pub use check::{
    check_suite, dominance_experiment, random_multigraph, CheckResult, DominanceParams, DominanceReport,
};
pub use config::{ExperimentConfig, Model, OutputConfig, ProgenySpec, SolverConfig, StepSpec, SupportPoint};
pub use fit::{fit_exponent, read_scan_csv, FitModel, FitReport};
pub use scan::{
    moment_trends, replicate_resistance, sample_resistance_rows, scan_gamma, scan_intersections, scan_resistance,
    write_gamma_csv, write_intersection_csv, write_scan_csv, BlockRecordLine, GammaRow, IntersectionRecordLine,
    IntersectionRow, IntersectionScan, ResistanceScan, ScanRow, Trend, TrendReport,
};

use std::io::{self, Write};

use thiserror::Error;

use crate::blocks::BlockError;
use crate::branching::BranchingError;
use crate::resistance::ResistanceError;
use crate::trace::TraceError;
use crate::walk::WalkError;

/// Version of the CSV and JSON-lines layouts written by the harness.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot parse configuration: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("{0}")]
    Fit(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Branching(#[from] BranchingError),
    #[error(transparent)]
    Walk(#[from] WalkError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Resistance(#[from] ResistanceError),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Revision recorded at build time, or `unknown` outside a git checkout.
pub fn git_revision() -> &'static str {
    option_env!("BRWLAB_GIT_REV").unwrap_or("unknown")
}

/// Runs `f` on a pool of `threads` workers; `0` uses the global pool.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    Ok(pool.install(f))
}

/// The `#`-prefixed provenance block that starts every CSV file.
pub fn write_metadata<W: Write>(out: &mut W, kind: &str, config: &ExperimentConfig) -> io::Result<()> {
    writeln!(out, "# brwlab {kind} schema={SCHEMA_VERSION}")?;
    writeln!(out, "# config_hash={}", config.hash())?;
    writeln!(out, "# seed={}", config.seed)?;
    writeln!(out, "# git_rev={}", git_revision())
}
