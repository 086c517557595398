//! LQR environment, cost accounting and coupled regret measurement.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::adaptive::{exploration_std, AlgoConfig, ControllerState, ResetReason};
use crate::analysis::{self, CheckpointDiag};
use crate::control::{self, RiccatiSolution, SystemSpec};
use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::noise::{NoiseStreams, StreamTag};
use crate::sysid::RegressionState;

/// States with a larger Euclidean norm abort the run.
pub const DIVERGENCE_NORM: f64 = 1e12;

pub const RECORD_SCHEMA_VERSION: u32 = 1;

/// `A x + B u + eps`.
pub fn step_dynamics(
    spec: &SystemSpec,
    x: &DVector<f64>,
    u: &DVector<f64>,
    eps: &DVector<f64>,
) -> Result<DVector<f64>> {
    if x.len() != spec.n || u.len() != spec.d || eps.len() != spec.n {
        return Err(invalid("step_dynamics: dimension mismatch"));
    }
    Ok(&spec.a * x + &spec.b * u + eps)
}

/// `x'Qx + u'Ru`.
pub fn cost_increment(spec: &SystemSpec, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
    if x.len() != spec.n || u.len() != spec.d {
        return Err(invalid("cost_increment: dimension mismatch"));
    }
    Ok(linalg::quad_form(&spec.q, x) + linalg::quad_form(&spec.r, u))
}

/// One simulated step, as seen by observers.
#[derive(Debug, Clone, Copy)]
pub struct StepTrace<'a> {
    pub t: usize,
    pub x: &'a DVector<f64>,
    pub u: &'a DVector<f64>,
    /// Exploration noise actually applied (already scaled).
    pub eta: &'a DVector<f64>,
    pub cost_increment: f64,
    pub reset_reason: ResetReason,
}

/// Knobs used by tests and coupling experiments.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Play `u = K_pinned x + eta` instead of running the adaptive controller.
    pub pinned_gain: Option<DMatrix<f64>>,
    /// When false, `eta_t = 0` at every step.
    pub explore: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            pinned_gain: None,
            explore: true,
        }
    }
}

/// Everything measured on the algorithm side at one checkpoint horizon `T`.
#[derive(Debug, Clone)]
pub struct AlgoCheckpoint {
    pub horizon: usize,
    /// `sum_{t=1}^T x_t'Qx_t + u_t'Ru_t`.
    pub cost: f64,
    /// `|Theta_hat_T - Theta|_2`, estimate built from transitions `0..T-1`.
    pub est_err_theta: f64,
    /// `|K_hat_T - K|_2` for the gain in force at step `T`.
    pub est_err_k: f64,
    pub reset_count: usize,
    pub diag: CheckpointDiag,
}

#[derive(Debug, Clone)]
pub struct AlgorithmRun {
    pub seed: u64,
    pub replicate_id: u64,
    pub horizon: usize,
    pub cost: f64,
    pub reset_count: usize,
    pub checkpoints: Vec<AlgoCheckpoint>,
}

#[derive(Debug, Clone)]
pub struct OracleRun {
    pub seed: u64,
    pub replicate_id: u64,
    pub horizon: usize,
    pub coupled: bool,
    pub cost: f64,
    /// `(T, cost up to T)` for every requested checkpoint.
    pub checkpoints: Vec<(usize, f64)>,
}

/// Per-replicate, per-horizon record; one JSON line in the record files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: u32,
    pub seed: u64,
    pub replicate: u64,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub coupled: bool,
    pub failure: Option<String>,
    pub metrics: Option<RunMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub cost_algo: f64,
    pub cost_oracle: f64,
    pub regret: f64,
    pub est_err_theta: f64,
    #[serde(rename = "est_err_K")]
    pub est_err_k: f64,
    pub reset_count: usize,
    pub lam_parallel: f64,
    pub lam_perp: f64,
    pub lam_delta: f64,
    pub decomp_residual: f64,
}

fn validate_grid(horizon: usize, grid: &[usize]) -> Result<()> {
    if horizon < 2 {
        return Err(invalid("horizon must be at least 2"));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("checkpoint grid must be strictly increasing"));
    }
    if grid.iter().any(|&t| t < 2 || t > horizon) {
        return Err(invalid("checkpoints must lie in [2, horizon]"));
    }
    Ok(())
}

fn check_divergence(t: usize, x: &DVector<f64>) -> Result<()> {
    let norm = x.norm();
    if !(norm <= DIVERGENCE_NORM) {
        return Err(Error::Diverged { t, norm });
    }
    Ok(())
}

/// Simulates `x_0 .. x_T` under the adaptive controller.
pub fn run_algorithm(
    spec: &SystemSpec,
    cfg: &AlgoConfig,
    streams: &mut NoiseStreams,
    horizon: usize,
    checkpoint_grid: &[usize],
    opts: &RunOptions,
) -> Result<AlgorithmRun> {
    run_algorithm_observed(spec, cfg, streams, horizon, checkpoint_grid, opts, &mut |_| {})
}

pub fn run_algorithm_observed(
    spec: &SystemSpec,
    cfg: &AlgoConfig,
    streams: &mut NoiseStreams,
    horizon: usize,
    checkpoint_grid: &[usize],
    opts: &RunOptions,
    observer: &mut dyn FnMut(&StepTrace),
) -> Result<AlgorithmRun> {
    validate_grid(horizon, checkpoint_grid)?;
    if !control::check_stabilizing(&spec.a, &spec.b, &cfg.k0, 0.0)? {
        return Err(invalid("K0 does not stabilize the true system"));
    }
    if let Some(k) = &opts.pinned_gain {
        if k.shape() != (spec.d, spec.n) {
            return Err(invalid("pinned gain has the wrong shape"));
        }
    }
    let truth: RiccatiSolution = spec.solve_dare()?;
    let theta_true = spec.theta();
    let (n, d) = (spec.n, spec.d);

    let mut ctrl = ControllerState::new(cfg, &spec.q, &spec.r)?;
    let mut x = spec.x0.clone();
    // (x_{t-1}, u_{t-1}) and (x_{t-2}, u_{t-2})
    let mut prev: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut prev2: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut cost = 0.0;
    let mut sum_tilde_eps = 0.0;
    let mut sum_eta_r = 0.0;
    let mut delta_sum = DMatrix::zeros(d, d);
    let mut checkpoints = Vec::with_capacity(checkpoint_grid.len());
    let mut next_cp = checkpoint_grid.iter().copied().peekable();
    let zero_eta = DVector::zeros(d);

    for t in 0..=horizon {
        // the estimate at step t uses transitions k = 0..=t-2
        if t >= 2 {
            let (x2, u2) = prev2.as_ref().expect("history is two steps deep");
            let (x1, _) = prev.as_ref().expect("history is one step deep");
            ctrl.regression.record_transition(x2, u2, x1)?;
        }
        let eta = if opts.explore {
            streams.eta(t, d) * exploration_std(t, cfg.sigma_eta)
        } else {
            zero_eta.clone()
        };
        let (u, reason, k_in_force) = match &opts.pinned_gain {
            Some(k) => (k * &x + &eta, ResetReason::None, k.clone()),
            None => {
                let (u, diag) = ctrl.step(cfg, &x, &eta)?;
                (u, diag.reset_reason, ctrl.k_hat().clone())
            }
        };
        let eps = streams.eps(t, n) * spec.sigma_eps;
        let inc = cost_increment(spec, &x, &u)?;
        if t >= 1 {
            cost += inc;
            let tilde = &spec.b * &eta + &eps;
            sum_tilde_eps += linalg::quad_form(&truth.p, &tilde);
            sum_eta_r += linalg::quad_form(&spec.r, &eta);
        }
        observer(&StepTrace {
            t,
            x: &x,
            u: &u,
            eta: &eta,
            cost_increment: inc,
            reset_reason: reason,
        });

        if next_cp.peek() == Some(&t) {
            next_cp.next();
            let (x1, u1) = prev.as_ref().expect("checkpoints start at T = 2");
            let mut snapshot: RegressionState = ctrl.regression.clone();
            snapshot.record_transition(x1, u1, &x)?;
            let est = snapshot.solve_theta(cfg.rank_tol)?;
            let est_err_theta = linalg::spectral_norm(&(est.theta() - &theta_true));
            let est_err_k = linalg::spectral_norm(&(&k_in_force - &truth.k));
            let diag = analysis::checkpoint_diagnostics(
                &snapshot.gram_snapshot(),
                &delta_sum,
                &truth.k,
                t,
                est_err_theta,
                est_err_k,
                cost - sum_tilde_eps - sum_eta_r,
            )?;
            checkpoints.push(AlgoCheckpoint {
                horizon: t,
                cost,
                est_err_theta,
                est_err_k,
                reset_count: ctrl.reset_count(),
                diag,
            });
        }

        // Delta_t = (K_hat_t - K) x_t + eta_t = u_t - K x_t
        let delta = &u - &truth.k * &x;
        delta_sum.ger(1.0, &delta, &delta, 1.0);

        let x_next = step_dynamics(spec, &x, &u, &eps)?;
        check_divergence(t + 1, &x_next)?;
        prev2 = prev.take();
        prev = Some((std::mem::replace(&mut x, x_next), u));
    }

    Ok(AlgorithmRun {
        seed: streams.seed(),
        replicate_id: streams.replicate_id(),
        horizon,
        cost,
        reset_count: ctrl.reset_count(),
        checkpoints,
    })
}

/// Simulates the optimal controller `u_t = K x_t` on the true system.
///
/// In coupled mode it consumes exactly the same system-noise draws as
/// [`run_algorithm`] with the same streams.
pub fn run_oracle(
    spec: &SystemSpec,
    streams: &mut NoiseStreams,
    horizon: usize,
    checkpoint_grid: &[usize],
    coupled: bool,
) -> Result<OracleRun> {
    run_oracle_observed(spec, streams, horizon, checkpoint_grid, coupled, &mut |_| {})
}

pub fn run_oracle_observed(
    spec: &SystemSpec,
    streams: &mut NoiseStreams,
    horizon: usize,
    checkpoint_grid: &[usize],
    coupled: bool,
    observer: &mut dyn FnMut(&StepTrace),
) -> Result<OracleRun> {
    validate_grid(horizon, checkpoint_grid)?;
    let truth = spec.solve_dare()?;
    let tag = if coupled {
        StreamTag::Eps
    } else {
        StreamTag::EpsIndependent
    };
    let zero_eta = DVector::zeros(spec.d);
    let mut x = spec.x0.clone();
    let mut cost = 0.0;
    let mut checkpoints = Vec::with_capacity(checkpoint_grid.len());
    let mut next_cp = checkpoint_grid.iter().copied().peekable();
    for t in 0..=horizon {
        let u = &truth.k * &x;
        let eps = streams.standard_normal(tag, t, spec.n) * spec.sigma_eps;
        let inc = cost_increment(spec, &x, &u)?;
        if t >= 1 {
            cost += inc;
        }
        observer(&StepTrace {
            t,
            x: &x,
            u: &u,
            eta: &zero_eta,
            cost_increment: inc,
            reset_reason: ResetReason::None,
        });
        if next_cp.peek() == Some(&t) {
            next_cp.next();
            checkpoints.push((t, cost));
        }
        let x_next = step_dynamics(spec, &x, &u, &eps)?;
        check_divergence(t + 1, &x_next)?;
        x = x_next;
    }
    Ok(OracleRun {
        seed: streams.seed(),
        replicate_id: streams.replicate_id(),
        horizon,
        coupled,
        cost,
        checkpoints,
    })
}

/// `J(U, T) - J(U*, T)` for a matched pair of runs.
pub fn regret(algo: &AlgorithmRun, oracle: &OracleRun) -> Result<f64> {
    if algo.seed != oracle.seed
        || algo.replicate_id != oracle.replicate_id
        || algo.horizon != oracle.horizon
    {
        return Err(invalid("algorithm and oracle runs are not paired"));
    }
    Ok(algo.cost - oracle.cost)
}

/// Joins the checkpoints of a paired run into per-horizon records.
pub fn pair_records(algo: &AlgorithmRun, oracle: &OracleRun) -> Result<Vec<RunRecord>> {
    regret(algo, oracle)?;
    if algo.checkpoints.len() != oracle.checkpoints.len() {
        return Err(invalid("algorithm and oracle checkpoint grids differ"));
    }
    algo.checkpoints
        .iter()
        .zip(&oracle.checkpoints)
        .map(|(cp, &(t, oracle_cost))| {
            if cp.horizon != t {
                return Err(invalid("algorithm and oracle checkpoint grids differ"));
            }
            Ok(RunRecord {
                schema: RECORD_SCHEMA_VERSION,
                seed: algo.seed,
                replicate: algo.replicate_id,
                horizon: t,
                coupled: oracle.coupled,
                failure: None,
                metrics: Some(RunMetrics {
                    cost_algo: cp.cost,
                    cost_oracle: oracle_cost,
                    regret: cp.cost - oracle_cost,
                    est_err_theta: cp.est_err_theta,
                    est_err_k: cp.est_err_k,
                    reset_count: cp.reset_count,
                    lam_parallel: cp.diag.lam_parallel,
                    lam_perp: cp.diag.lam_perp,
                    lam_delta: cp.diag.lam_delta,
                    decomp_residual: cp.diag.decomp_residual,
                }),
            })
        })
        .collect()
}

/// Runs the algorithm and the oracle for one replicate and pairs them.
/// A divergence becomes a failure record at every horizon instead of an error.
pub fn run_replicate(
    spec: &SystemSpec,
    cfg: &AlgoConfig,
    seed: u64,
    replicate_id: u64,
    checkpoint_grid: &[usize],
    coupled: bool,
) -> Result<Vec<RunRecord>> {
    let horizon = *checkpoint_grid
        .last()
        .ok_or_else(|| invalid("empty checkpoint grid"))?;
    let mut streams = NoiseStreams::new(seed, replicate_id);
    let outcome = run_algorithm(
        spec,
        cfg,
        &mut streams,
        horizon,
        checkpoint_grid,
        &RunOptions::default(),
    )
    .and_then(|algo| {
        let oracle = run_oracle(spec, &mut streams, horizon, checkpoint_grid, coupled)?;
        pair_records(&algo, &oracle)
    });
    match outcome {
        Ok(records) => Ok(records),
        Err(err @ Error::Diverged { .. }) => Ok(checkpoint_grid
            .iter()
            .map(|&t| RunRecord {
                schema: RECORD_SCHEMA_VERSION,
                seed,
                replicate: replicate_id,
                horizon: t,
                coupled,
                failure: Some(err.to_string()),
                metrics: None,
            })
            .collect()),
        Err(other) => Err(other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn vec1(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    fn scalar_spec(sigma_eps: f64, x0: f64) -> SystemSpec {
        SystemSpec::new(scalar(0.5), scalar(1.0), scalar(1.0), scalar(1.0), sigma_eps, vec1(x0))
            .unwrap()
    }

    fn scalar_cfg() -> AlgoConfig {
        AlgoConfig::new(scalar(0.0), 20.0, 5.0, 1.0).unwrap()
    }

    #[test]
    fn dynamics_examples() {
        let spec = SystemSpec::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
            scalar(1.0),
            1.0,
            DVector::zeros(2),
        )
        .unwrap();
        let x = DVector::from_row_slice(&[1.0, 2.0]);
        assert_eq!(step_dynamics(&spec, &x, &vec1(5.0), &DVector::zeros(2)).unwrap(), x);

        let spec = SystemSpec::new(scalar(0.0), scalar(1.0), scalar(1.0), scalar(1.0), 1.0, vec1(0.0))
            .unwrap();
        assert_eq!(step_dynamics(&spec, &vec1(9.0), &vec1(3.0), &vec1(0.0)).unwrap(), vec1(3.0));

        let spec = scalar_spec(1.0, 0.0);
        let next = step_dynamics(&spec, &vec1(2.0), &vec1(-0.5), &vec1(0.1)).unwrap();
        assert!((next[0] - 0.6).abs() < 1e-15);
        assert!(step_dynamics(&spec, &DVector::zeros(2), &vec1(0.0), &vec1(0.0)).is_err());
    }

    #[test]
    fn cost_examples() {
        let spec = SystemSpec::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
            scalar(1.0),
            1.0,
            DVector::zeros(2),
        )
        .unwrap();
        let c = cost_increment(&spec, &DVector::from_row_slice(&[1.0, 0.0]), &vec1(2.0)).unwrap();
        assert_eq!(c, 5.0);
        assert_eq!(cost_increment(&spec, &DVector::zeros(2), &vec1(0.0)).unwrap(), 0.0);
        let spec = SystemSpec::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]),
            scalar(1.0),
            1.0,
            DVector::zeros(2),
        )
        .unwrap();
        let c = cost_increment(&spec, &DVector::from_row_slice(&[1.0, 1.0]), &vec1(0.0)).unwrap();
        assert_eq!(c, 5.0);
        assert!(cost_increment(&spec, &vec1(1.0), &vec1(0.0)).is_err());
    }

    #[test]
    fn minimal_horizon_counts_steps_one_and_two() {
        let spec = scalar_spec(1.0, 0.7);
        let cfg = scalar_cfg();
        let mut incs = Vec::new();
        let mut streams = NoiseStreams::new(3, 0);
        let run = run_algorithm_observed(
            &spec,
            &cfg,
            &mut streams,
            2,
            &[2],
            &RunOptions::default(),
            &mut |s| incs.push(s.cost_increment),
        )
        .unwrap();
        assert_eq!(incs.len(), 3);
        assert_eq!(run.cost, incs[1] + incs[2]);
        assert_eq!(run.checkpoints[0].cost, run.cost);
    }

    #[test]
    fn noiseless_pinned_run_is_deterministic_decay() {
        let spec = scalar_spec(1e-12, 1.0);
        let truth = spec.solve_dare().unwrap();
        let opts = RunOptions {
            pinned_gain: Some(truth.k.clone()),
            explore: false,
        };
        let run = run_algorithm(&spec, &scalar_cfg(), &mut NoiseStreams::new(1, 0), 60, &[60], &opts)
            .unwrap();
        // x_t = rho^t with rho = a + b k; cost = (1 + k^2) sum_{t>=1} rho^{2t}
        let k = truth.k[(0, 0)];
        let rho = 0.5 + k;
        let expected: f64 = (1..=60).map(|t| (1.0 + k * k) * rho.powi(2 * t)).sum();
        assert!((run.cost - expected).abs() < 1e-9);
    }

    #[test]
    fn oracle_from_origin_without_noise_costs_nothing() {
        let spec = scalar_spec(1e-12, 0.0);
        let run = run_oracle(&spec, &mut NoiseStreams::new(1, 0), 100, &[100], true).unwrap();
        assert!(run.cost < 1e-20);
    }

    #[test]
    fn oracle_ignores_exploration_stream() {
        let spec = scalar_spec(1.0, 0.0);
        let mut a = NoiseStreams::new(5, 2);
        let mut b = NoiseStreams::new(5, 2);
        // consume the eta stream on one side only
        for t in 0..100 {
            b.eta(t, 1);
        }
        let ra = run_oracle(&spec, &mut a, 200, &[200], true).unwrap();
        let rb = run_oracle(&spec, &mut b, 200, &[200], true).unwrap();
        assert_eq!(ra.cost.to_bits(), rb.cost.to_bits());
    }

    #[test]
    fn pinned_optimal_gain_without_exploration_has_zero_regret() {
        let spec = scalar_spec(1.0, 0.3);
        let truth = spec.solve_dare().unwrap();
        let opts = RunOptions {
            pinned_gain: Some(truth.k.clone()),
            explore: false,
        };
        let grid = [10, 100, 1000];
        let mut streams = NoiseStreams::new(9, 4);
        let algo = run_algorithm(&spec, &scalar_cfg(), &mut streams, 1000, &grid, &opts).unwrap();
        let oracle = run_oracle(&spec, &mut streams, 1000, &grid, true).unwrap();
        assert_eq!(regret(&algo, &oracle).unwrap(), 0.0);
        for rec in pair_records(&algo, &oracle).unwrap() {
            assert_eq!(rec.metrics.unwrap().regret, 0.0);
        }
    }

    #[test]
    fn regret_requires_matching_pairs() {
        let spec = scalar_spec(1.0, 0.0);
        let algo = run_algorithm(
            &spec,
            &scalar_cfg(),
            &mut NoiseStreams::new(1, 0),
            50,
            &[50],
            &RunOptions::default(),
        )
        .unwrap();
        let oracle = run_oracle(&spec, &mut NoiseStreams::new(1, 1), 50, &[50], true).unwrap();
        assert!(matches!(regret(&algo, &oracle), Err(Error::InvalidInput(_))));
        let mut fake_algo = algo.clone();
        fake_algo.cost = 10.0;
        let mut fake_oracle = run_oracle(&spec, &mut NoiseStreams::new(1, 0), 50, &[50], true).unwrap();
        fake_oracle.cost = 4.0;
        assert_eq!(regret(&fake_algo, &fake_oracle).unwrap(), 6.0);
    }

    #[test]
    fn rejects_destabilizing_k0_and_short_horizons() {
        let spec = SystemSpec::new(scalar(1.2), scalar(1.0), scalar(1.0), scalar(1.0), 1.0, vec1(0.0))
            .unwrap();
        let err = run_algorithm(
            &spec,
            &scalar_cfg(),
            &mut NoiseStreams::new(0, 0),
            10,
            &[10],
            &RunOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
        let spec = scalar_spec(1.0, 0.0);
        assert!(run_algorithm(
            &spec,
            &scalar_cfg(),
            &mut NoiseStreams::new(0, 0),
            1,
            &[],
            &RunOptions::default()
        )
        .is_err());
    }

    #[test]
    fn divergence_tripwire() {
        // K0 stabilizes nominally, but a huge pinned gain blows the state up
        let spec = scalar_spec(1.0, 1.0);
        let opts = RunOptions {
            pinned_gain: Some(scalar(50.0)),
            explore: false,
        };
        let err = run_algorithm(&spec, &scalar_cfg(), &mut NoiseStreams::new(0, 0), 100, &[100], &opts)
            .unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    #[test]
    fn replicate_records_are_reproducible() {
        let spec = scalar_spec(1.0, 0.0);
        let cfg = scalar_cfg();
        let a = run_replicate(&spec, &cfg, 42, 7, &[64, 128], true).unwrap();
        let b = run_replicate(&spec, &cfg, 42, 7, &[64, 128], true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_eq!(a[1].horizon, 128);
    }
}
