//! Parallel Monte Carlo sweep over replicates.
//!
//! Every replicate is independent: it owns its noise streams and controller.
//! One run per replicate covers the whole horizon grid, since the algorithm
//! never looks at the horizon. Output order is `(T, seed, replicate)`
//! regardless of scheduling.

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{invalid, Error, Result};
use crate::sim::{self, RunRecord};

/// Sweeps with more than this fraction of failed replicates are reported as failures.
pub const MAX_FAILURE_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub records: Vec<RunRecord>,
    pub replicates: usize,
    pub failed_replicates: usize,
}

impl SweepOutput {
    pub fn failure_fraction(&self) -> f64 {
        if self.replicates == 0 {
            0.0
        } else {
            self.failed_replicates as f64 / self.replicates as f64
        }
    }

    /// Records of one horizon, in replicate order.
    pub fn at_horizon(&self, horizon: usize) -> impl Iterator<Item = &RunRecord> {
        self.records.iter().filter(move |r| r.horizon == horizon)
    }
}

/// Runs every `(replicate, grid)` pair of the config on `jobs` worker threads.
pub fn run_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<SweepOutput> {
    if jobs == 0 {
        return Err(invalid("jobs must be at least 1"));
    }
    let spec = cfg.system_spec()?;
    let algo = cfg.algo_config()?;
    let grid = cfg.sweep.t_grid.clone();
    let seed = cfg.sweep.seed;
    let coupled = cfg.sweep.coupled;
    let ids = cfg.sweep.seeds.replicate_ids();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Numeric(format!("thread pool: {e}")))?;
    let per_replicate: Vec<Vec<RunRecord>> = pool.install(|| {
        ids.par_iter()
            .map(|&id| sim::run_replicate(&spec, &algo, seed, id, &grid, coupled))
            .collect::<Result<Vec<_>>>()
    })?;

    let failed_replicates = per_replicate
        .iter()
        .filter(|recs| recs.iter().any(|r| r.failure.is_some()))
        .count();
    let mut records: Vec<RunRecord> = per_replicate.into_iter().flatten().collect();
    records.sort_by_key(|r| (r.horizon, r.seed, r.replicate));
    Ok(SweepOutput {
        records,
        replicates: ids.len(),
        failed_replicates,
    })
}
