//! Convergence-study harness: runs refinement matrices over cases, schemes
//! and backends, fits rates and writes a CSV plus a JSON summary.

pub mod config;
pub mod error;
pub mod report;
pub mod study;

pub use config::{check_steps, ExperimentConfig, LqConfig, Metric, Thresholds};
pub use error::HarnessError;
pub use report::{run, RunOutput, Summary};
pub use study::{fit_tail, run_series, Row, Series, SeriesSpec};
