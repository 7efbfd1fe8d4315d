//! Runs configured experiments, one simulation per seed.

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use rbbc::world::{self, Outcome, RunLog, WorldConfig, WorldError};

use crate::config::{ConfigError, ExperimentConfig};
use crate::emit::{self, EmitError};
use crate::report::MetricsReport;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Emit(#[from] EmitError),
    #[error("seed {seed}: run did not finish ({outcome:?}): {diagnostic}")]
    Unfinished { seed: u64, outcome: Outcome, diagnostic: String },
    #[error("seed {seed}: safety violated: {detail}")]
    Unsafe { seed: u64, detail: String },
    #[error("creating {path}: {source}")]
    OutDir { path: String, source: std::io::Error },
}

pub struct RunResult {
    pub log: RunLog,
    pub report: MetricsReport,
}

pub fn run_world(world: &WorldConfig, warmup: u64) -> Result<RunResult, BenchError> {
    let log = world::run(world)?;
    if log.outcome != Outcome::Completed {
        return Err(BenchError::Unfinished {
            seed: log.seed,
            outcome: log.outcome,
            diagnostic: log.diagnostic.clone().unwrap_or_default(),
        });
    }
    if !log.safety.is_safe() {
        return Err(BenchError::Unsafe { seed: log.seed, detail: format!("{:?}", log.safety) });
    }
    let report = MetricsReport::from_log(&log, warmup);
    Ok(RunResult { log, report })
}

pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunResult, BenchError> {
    run_world(&cfg.world(seed)?, cfg.warmup_rounds)
}

/// All seeds of the sweep, in seed order, run in parallel.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<RunResult>, BenchError> {
    cfg.world(cfg.seed)?;
    (cfg.seed..cfg.seed + cfg.seeds).into_par_iter().map(|s| run_experiment(cfg, s)).collect()
}

/// Writes `runs.csv` and, per seed, block records, gnuplot columns and the
/// raw run log under `dir`.
pub fn emit_all(dir: &Path, results: &[RunResult]) -> Result<(), BenchError> {
    std::fs::create_dir_all(dir).map_err(|source| BenchError::OutDir { path: dir.display().to_string(), source })?;
    let reports: Vec<MetricsReport> = results.iter().map(|r| r.report.clone()).collect();
    emit::write_csv(&dir.join("runs.csv"), &reports)?;
    for r in results {
        let seed = r.log.seed;
        emit::write_blocks_jsonl(&dir.join(format!("blocks-{seed}.jsonl")), &r.log)?;
        emit::write_dat(&dir.join(format!("blocks-{seed}.dat")), &r.log)?;
        emit::write_runlog(&dir.join(format!("runlog-{seed}.json")), &r.log)?;
    }
    Ok(())
}
