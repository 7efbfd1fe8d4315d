//! Experiment harness: configuration, orchestration, metrics and report
//! files.

pub mod config;
pub mod emit;
pub mod experiment;
pub mod report;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, run_sweep, BenchError, RunResult};
pub use report::MetricsReport;
