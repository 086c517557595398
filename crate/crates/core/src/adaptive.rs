//! Stepwise noisy certainty-equivalent controller.
//!
//! At every step `t >= 2` the controller re-estimates `[A, B]` by least
//! squares, solves the Riccati equation for the estimate, and plays
//! `u_t = K_hat_t x_t + eta_t`. Whenever the estimate is unusable, or the
//! state or gain grows beyond the configured caps, it falls back to the
//! known stabilizing gain `K0`.
//!
//! The controller never draws randomness: the caller supplies `eta_t` with
//! standard deviation [`exploration_std`], which keeps replays and coupled
//! runs exact.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::{self, DEFAULT_DARE_MAX_ITERS, DEFAULT_DARE_TOL};
use crate::error::{invalid, Result};
use crate::linalg;
use crate::sysid::{RegressionState, ThetaEstimate, DEFAULT_RANK_TOL};

/// Closed loops of estimated systems must clear the unit circle by this much.
pub const ESTIMATE_STABILITY_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct AlgoConfig {
    /// Known stabilizing gain, d x n.
    pub k0: DMatrix<f64>,
    /// State-norm reset scale.
    pub c_x: f64,
    /// Gain-norm cap; should exceed the spectral norm of the optimal gain.
    pub c_k: f64,
    /// Base exploration scale.
    pub sigma_eta: f64,
    pub rank_tol: f64,
    pub dare_tol: f64,
    pub dare_max_iters: usize,
}

impl AlgoConfig {
    pub fn new(k0: DMatrix<f64>, c_x: f64, c_k: f64, sigma_eta: f64) -> Result<Self> {
        let cfg = Self {
            k0,
            c_x,
            c_k,
            sigma_eta,
            rank_tol: DEFAULT_RANK_TOL,
            dare_tol: DEFAULT_DARE_TOL,
            dare_max_iters: DEFAULT_DARE_MAX_ITERS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("C_x", self.c_x), ("C_K", self.c_k), ("sigma_eta", self.sigma_eta)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be positive and finite")));
            }
        }
        if !(self.rank_tol >= 0.0) || !(self.dare_tol > 0.0) || self.dare_max_iters == 0 {
            return Err(invalid("tolerances must be positive"));
        }
        if self.k0.is_empty() || !linalg::all_finite(&self.k0) {
            return Err(invalid("K0 must be a finite, non-empty matrix"));
        }
        Ok(())
    }
}

/// Why the gain in force at a step is `K0` rather than the certainty-equivalent gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetReason {
    None,
    NotIdentifiable,
    DareFailed,
    StateNorm,
    GainNorm,
}

impl ResetReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ResetReason::None => "none",
            ResetReason::NotIdentifiable => "not_identifiable",
            ResetReason::DareFailed => "dare_failed",
            ResetReason::StateNorm => "state_norm",
            ResetReason::GainNorm => "gain_norm",
        }
    }
}

impl std::fmt::Display for ResetReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Standard deviation of the exploration noise at time `t`:
/// `sigma_eta` for `t <= 1`, then `sigma_eta * t^{-1/4}` (variance `sigma_eta^2 / sqrt(t)`).
pub fn exploration_std(t: usize, sigma_eta: f64) -> f64 {
    if t < 2 {
        sigma_eta
    } else {
        sigma_eta / (t as f64).sqrt().sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub t: usize,
    pub reset_reason: ResetReason,
    /// Least-squares estimate used at this step (absent for `t < 2`).
    pub theta: Option<ThetaEstimate>,
    /// Riccati iterations spent, zero when no solve happened.
    pub dare_iterations: usize,
}

/// Per-replicate controller state. One writer; clone for snapshots.
#[derive(Debug, Clone)]
pub struct ControllerState {
    t: usize,
    pub regression: RegressionState,
    k_hat: DMatrix<f64>,
    last_reset_reason: ResetReason,
    reset_count: usize,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    /// Last estimated Riccati solution, used to warm-start the next solve.
    warm_p: Option<DMatrix<f64>>,
}

impl ControllerState {
    /// Controller for a system whose (known) cost weights are `q` and `r`.
    pub fn new(cfg: &AlgoConfig, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<Self> {
        cfg.validate()?;
        let n = q.nrows();
        let d = r.nrows();
        if cfg.k0.shape() != (d, n) {
            return Err(invalid(format!(
                "K0 is {}x{}, expected {d}x{n}",
                cfg.k0.nrows(),
                cfg.k0.ncols()
            )));
        }
        control::validate_cost(q, r)?;
        Ok(Self {
            t: 0,
            regression: RegressionState::new(n, d)?,
            k_hat: cfg.k0.clone(),
            last_reset_reason: ResetReason::None,
            reset_count: 0,
            q: q.clone(),
            r: r.clone(),
            warm_p: None,
        })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn k_hat(&self) -> &DMatrix<f64> {
        &self.k_hat
    }

    pub fn last_reset_reason(&self) -> ResetReason {
        self.last_reset_reason
    }

    pub fn reset_count(&self) -> usize {
        self.reset_count
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    pub fn d(&self) -> usize {
        self.r.nrows()
    }

    /// Advances the controller by one step and returns `u_t`.
    ///
    /// For `t >= 2` the regression must already hold the transitions
    /// `k = 0..=t-2`. Estimation and Riccati pathologies never produce an
    /// error; they fall back to `K0` with the reason recorded.
    pub fn step(
        &mut self,
        cfg: &AlgoConfig,
        x: &DVector<f64>,
        eta: &DVector<f64>,
    ) -> Result<(DVector<f64>, StepDiagnostics)> {
        let (n, d) = (self.n(), self.d());
        if x.len() != n || eta.len() != d {
            return Err(invalid(format!(
                "step expects x of length {n} and eta of length {d}, got {} and {}",
                x.len(),
                eta.len()
            )));
        }
        if !linalg::all_finite_vec(x) || !linalg::all_finite_vec(eta) {
            return Err(invalid("state or exploration noise is not finite"));
        }
        if cfg.k0.shape() != (d, n) {
            return Err(invalid("K0 shape does not match the controller"));
        }
        let t = self.t;
        let mut theta = None;
        let mut dare_iterations = 0;
        let reason = if t < 2 {
            self.k_hat.copy_from(&cfg.k0);
            ResetReason::None
        } else {
            if self.regression.count() == 0 {
                return Err(invalid(format!(
                    "no transitions recorded before step t = {t}"
                )));
            }
            let est = self.regression.solve_theta(cfg.rank_tol)?;
            let mut reason = ResetReason::None;
            if !est.identifiable {
                reason = ResetReason::NotIdentifiable;
            } else {
                match self.certainty_equivalent_gain(cfg, &est) {
                    Some((k, iters)) => {
                        dare_iterations = iters;
                        self.k_hat = k;
                    }
                    None => reason = ResetReason::DareFailed,
                }
            }
            if reason == ResetReason::None {
                if x.norm() > cfg.c_x * (1.0 + (t as f64).ln()) {
                    reason = ResetReason::StateNorm;
                } else if linalg::spectral_norm(&self.k_hat) > cfg.c_k {
                    reason = ResetReason::GainNorm;
                }
            }
            if reason != ResetReason::None {
                self.k_hat.copy_from(&cfg.k0);
                self.reset_count += 1;
            }
            theta = Some(est);
            reason
        };
        self.last_reset_reason = reason;
        let u = &self.k_hat * x + eta;
        self.t += 1;
        Ok((
            u,
            StepDiagnostics {
                t,
                reset_reason: reason,
                theta,
                dare_iterations,
            },
        ))
    }

    fn certainty_equivalent_gain(
        &mut self,
        cfg: &AlgoConfig,
        est: &ThetaEstimate,
    ) -> Option<(DMatrix<f64>, usize)> {
        let start = self.warm_p.as_ref().unwrap_or(&self.q);
        let sol = control::solve_dare_from(
            &est.a_hat,
            &est.b_hat,
            &self.q,
            &self.r,
            start,
            cfg.dare_tol,
            cfg.dare_max_iters,
        )
        .ok()?;
        if sol.closed_loop_radius >= 1.0 - ESTIMATE_STABILITY_MARGIN {
            return None;
        }
        let iterations = sol.iterations;
        self.warm_p = Some(sol.p);
        Some((sol.k, iterations))
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

    fn scalar_cfg(k0: f64, c_x: f64, c_k: f64) -> AlgoConfig {
        AlgoConfig::new(scalar(k0), c_x, c_k, 1.0).unwrap()
    }

    #[test]
    fn init_state() {
        let cfg = scalar_cfg(-0.1, 20.0, 5.0);
        let st = ControllerState::new(&cfg, &scalar(1.0), &scalar(1.0)).unwrap();
        assert_eq!(st.k_hat(), &cfg.k0);
        assert_eq!(st.reset_count(), 0);
        assert_eq!(st.t(), 0);
        assert_eq!(st.last_reset_reason(), ResetReason::None);
    }

    #[test]
    fn init_rejects_bad_config() {
        assert!(AlgoConfig::new(scalar(0.0), 0.0, 5.0, 1.0).is_err());
        assert!(AlgoConfig::new(scalar(0.0), 1.0, -5.0, 1.0).is_err());
        assert!(AlgoConfig::new(scalar(0.0), 1.0, 5.0, 0.0).is_err());
        let cfg = AlgoConfig::new(DMatrix::zeros(1, 2), 1.0, 5.0, 1.0).unwrap();
        assert!(ControllerState::new(&cfg, &scalar(1.0), &scalar(1.0)).is_err());
    }

    #[test]
    fn exploration_schedule() {
        assert_eq!(exploration_std(0, 1.0), 1.0);
        assert_eq!(exploration_std(1, 1.0), 1.0);
        assert!((exploration_std(4, 1.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(exploration_std(16, 2.0), 1.0);
    }

    #[test]
    fn first_step_plays_k0_plus_noise() {
        let cfg = scalar_cfg(0.0, 20.0, 5.0);
        let mut st = ControllerState::new(&cfg, &scalar(1.0), &scalar(1.0)).unwrap();
        let (u, diag) = st.step(&cfg, &vec1(3.7), &vec1(0.3)).unwrap();
        assert_eq!(u, vec1(0.3));
        assert_eq!(diag.reset_reason, ResetReason::None);
        assert_eq!(st.t(), 1);
    }

    #[test]
    fn step_rejects_wrong_dimensions() {
        let cfg = scalar_cfg(0.0, 20.0, 5.0);
        let mut st = ControllerState::new(&cfg, &scalar(1.0), &scalar(1.0)).unwrap();
        assert!(st.step(&cfg, &DVector::zeros(2), &vec1(0.0)).is_err());
        assert_eq!(st.t(), 0);
    }

    fn rich_scalar_data(st: &mut ControllerState, a: f64, b: f64) {
        let pts = [(1.0, 0.0), (0.0, 1.0), (0.5, -0.7), (-1.2, 0.4)];
        for (x, u) in pts {
            st.regression
                .record_transition(&vec1(x), &vec1(u), &vec1(a * x + b * u))
                .unwrap();
        }
    }

    fn advance_to_two(st: &mut ControllerState, cfg: &AlgoConfig) {
        st.step(cfg, &vec1(0.0), &vec1(0.0)).unwrap();
        st.step(cfg, &vec1(0.0), &vec1(0.0)).unwrap();
    }

    #[test]
    fn noiseless_rich_data_yields_optimal_gain() {
        let cfg = scalar_cfg(0.0, 20.0, 5.0);
        let mut st = ControllerState::new(&cfg, &scalar(1.0), &scalar(1.0)).unwrap();
        advance_to_two(&mut st, &cfg);
        rich_scalar_data(&mut st, 0.5, 1.0);
        let (u, diag) = st.step(&cfg, &vec1(1.0), &vec1(0.0)).unwrap();
        assert_eq!(diag.reset_reason, ResetReason::None);
        // scalar Riccati root p = (0.25 + sqrt(4.0625)) / 2, k = -0.5 p / (1 + p)
        let p = (0.25 + 4.0625f64.sqrt()) / 2.0;
        let k = -0.5 * p / (1.0 + p);
        assert!((st.k_hat()[(0, 0)] - k).abs() < 1e-9);
        assert!((st.k_hat()[(0, 0)] + 0.265_564_437_074_637_4).abs() < 1e-9);
        assert!((u[0] - k).abs() < 1e-9);
    }

    #[test]
    fn gain_above_cap_resets_to_k0() {
        // true optimal gain for a = 3, b = 1, q = r = 1 has |k| ~ 2.92
        let p = {
            let (a2, q, r, b2): (f64, f64, f64, f64) = (9.0, 1.0, 1.0, 1.0);
            let qb = r - a2 * r - q * b2;
            (-qb + (qb * qb + 4.0 * b2 * q * r).sqrt()) / (2.0 * b2)
        };
        let k_norm = 3.0 * p / (1.0 + p);
        let cfg = scalar_cfg(-2.5, 1e6, k_norm - 1.0);
        let mut st = ControllerState::new(&cfg, &scalar(1.0), &scalar(1.0)).unwrap();
        advance_to_two(&mut st, &cfg);
        rich_scalar_data(&mut st, 3.0, 1.0);
        let (_, diag) = st.step(&cfg, &vec1(0.1), &vec1(0.0)).unwrap();
        assert_eq!(diag.reset_reason, ResetReason::GainNorm);
        assert_eq!(st.k_hat(), &cfg.k0);
        assert_eq!(st.reset_count(), 1);
    }

    #[test]
    fn large_state_resets_to_k0() {
        let cfg = scalar_cfg(0.0, 1.0, 5.0);
        let mut st = ControllerState::new(&cfg, &scalar(1.0), &scalar(1.0)).unwrap();
        advance_to_two(&mut st, &cfg);
        rich_scalar_data(&mut st, 0.5, 1.0);
        // threshold at t = 2 is 1 + ln 2 ~ 1.69
        let (u, diag) = st.step(&cfg, &vec1(1.8), &vec1(0.25)).unwrap();
        assert_eq!(diag.reset_reason, ResetReason::StateNorm);
        assert_eq!(u, vec1(0.25));
    }

    #[test]
    fn rank_deficient_data_falls_back() {
        let cfg = scalar_cfg(0.0, 20.0, 5.0);
        let mut st = ControllerState::new(&cfg, &scalar(1.0), &scalar(1.0)).unwrap();
        advance_to_two(&mut st, &cfg);
        st.regression
            .record_transition(&vec1(1.0), &vec1(1.0), &vec1(1.5))
            .unwrap();
        let (_, diag) = st.step(&cfg, &vec1(0.3), &vec1(0.0)).unwrap();
        assert_eq!(diag.reset_reason, ResetReason::NotIdentifiable);
        assert_eq!(st.k_hat(), &cfg.k0);
    }

    #[test]
    fn unstabilizable_estimate_falls_back() {
        let cfg = scalar_cfg(0.0, 20.0, 5.0);
        let mut st = ControllerState::new(&cfg, &scalar(1.0), &scalar(1.0)).unwrap();
        advance_to_two(&mut st, &cfg);
        rich_scalar_data(&mut st, 1.5, 0.0);
        let (_, diag) = st.step(&cfg, &vec1(0.3), &vec1(0.0)).unwrap();
        assert_eq!(diag.reset_reason, ResetReason::DareFailed);
        assert_eq!(st.k_hat(), &cfg.k0);
    }

    #[test]
    fn missing_transitions_is_a_precondition_error() {
        let cfg = scalar_cfg(0.0, 20.0, 5.0);
        let mut st = ControllerState::new(&cfg, &scalar(1.0), &scalar(1.0)).unwrap();
        advance_to_two(&mut st, &cfg);
        assert!(st.step(&cfg, &vec1(0.3), &vec1(0.0)).is_err());
    }
}
