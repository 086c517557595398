//! Statistical post-processing of simulation records: log-log rate fits,
//! nearest-rank quantiles and the Gram-matrix subspace diagnostics.
//!
//! The Gram matrix `G_T = sum_{t<T} z_t z_t'` is split along two orthogonal
//! subspaces of `R^{n+d}` determined by the true gain `K`:
//!
//! * `col([I; K])`, the directions excited by the optimal closed loop, where
//!   `G_T` grows linearly in `T`;
//! * `col([-K'; I])`, the directions only excited by deviations
//!   `Delta_t = (K_hat_t - K) x_t + eta_t`, where growth is about `sqrt(T)`.
//!
//! Only the growth exponents are checked, since the bounds hide constants.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::control::SystemSpec;
use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::sim::RunRecord;

/// Eigenvalues below `-PSD_TOL * trace` mark an input as not PSD.
const PSD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointDiag {
    pub horizon: usize,
    pub gram: DMatrix<f64>,
    /// `lambda_min(P_par' G P_par)`.
    pub lam_parallel: f64,
    /// `lambda_max(P_par' G P_par)`.
    pub lam_parallel_max: f64,
    /// `lambda_max(P_perp' G P_perp)`.
    pub lam_perp: f64,
    /// `lambda_max(sum_{t<T} Delta_t Delta_t')`.
    pub lam_delta: f64,
    /// `lambda_max(G)`.
    pub lam_gram_max: f64,
    pub est_err_theta: f64,
    pub est_err_k: f64,
    /// `J(U,T) - sum eps_tilde'P eps_tilde - sum eta'R eta`.
    pub decomp_residual: f64,
}

/// Orthonormal bases of `col([I; K])` (n columns) and `col([-K'; I])` (d columns).
///
/// Built by symmetric orthonormalization, so `K = 0` yields the coordinate
/// blocks exactly.
pub fn subspace_projectors(k: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !linalg::all_finite(k) {
        return Err(invalid("gain has non-finite entries"));
    }
    let (d, n) = k.shape();
    let mut par = DMatrix::zeros(n + d, n);
    par.rows_mut(0, n).fill_with_identity();
    par.rows_mut(n, d).copy_from(k);
    let mut perp = DMatrix::zeros(n + d, d);
    perp.rows_mut(0, n).copy_from(&(-k.transpose()));
    perp.rows_mut(n, d).fill_with_identity();

    let par_norm = linalg::inv_sqrt_spd(&(DMatrix::identity(n, n) + k.transpose() * k))?;
    let perp_norm = linalg::inv_sqrt_spd(&(DMatrix::identity(d, d) + k * k.transpose()))?;
    Ok((par * par_norm, perp * perp_norm))
}

fn check_psd(name: &str, m: &DMatrix<f64>) -> Result<DVector<f64>> {
    if !m.is_square() || !linalg::all_finite(m) {
        return Err(invalid(format!("{name} must be a finite square matrix")));
    }
    let eig = linalg::symmetric_eigenvalues(m);
    let floor = -PSD_TOL * m.trace().abs();
    if eig.iter().any(|&l| l < floor) {
        return Err(invalid(format!("{name} is not positive semidefinite")));
    }
    Ok(eig)
}

/// Subspace eigenvalue diagnostics of a Gram snapshot.
pub fn checkpoint_diagnostics(
    gram: &DMatrix<f64>,
    delta_sum: &DMatrix<f64>,
    k_true: &DMatrix<f64>,
    horizon: usize,
    est_err_theta: f64,
    est_err_k: f64,
    decomp_residual: f64,
) -> Result<CheckpointDiag> {
    let (d, n) = k_true.shape();
    if gram.shape() != (n + d, n + d) || delta_sum.shape() != (d, d) {
        return Err(invalid("diagnostic matrices do not match the gain dimensions"));
    }
    let gram_eig = check_psd("Gram matrix", gram)?;
    let delta_eig = check_psd("Delta sum", delta_sum)?;
    let (par, perp) = subspace_projectors(k_true)?;
    let par_eig = linalg::symmetric_eigenvalues(&(par.transpose() * gram * &par));
    let perp_eig = linalg::symmetric_eigenvalues(&(perp.transpose() * gram * &perp));
    Ok(CheckpointDiag {
        horizon,
        gram: gram.clone(),
        lam_parallel: par_eig.min().max(0.0),
        lam_parallel_max: par_eig.max().max(0.0),
        lam_perp: perp_eig.max().max(0.0),
        lam_delta: delta_eig.max().max(0.0),
        lam_gram_max: gram_eig.max().max(0.0),
        est_err_theta,
        est_err_k,
        decomp_residual,
    })
}

/// Ordinary least-squares fit of `ln(statistic)` on `ln(T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope; `None` with only two points.
    pub stderr: Option<f64>,
    pub r_squared: f64,
    /// `(ln T, ln statistic)`.
    pub points: Vec<(f64, f64)>,
}

impl RateFit {
    pub fn predict(&self, horizon: f64) -> f64 {
        (self.intercept + self.slope * horizon.ln()).exp()
    }
}

pub fn fit_rate(points: &[(f64, f64)], min_points: usize) -> Result<RateFit> {
    let min_points = min_points.max(2);
    if points.len() < min_points {
        return Err(Error::InsufficientData(format!(
            "rate fit needs at least {min_points} points, got {}",
            points.len()
        )));
    }
    if let Some(&(t, s)) = points
        .iter()
        .find(|(t, s)| !(*t > 0.0 && *s > 0.0 && t.is_finite() && s.is_finite()))
    {
        return Err(invalid(format!(
            "rate fit needs positive finite data, got ({t}, {s})"
        )));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(t, s)| (t.ln(), s.ln())).collect();
    let m = logs.len() as f64;
    let mean_x = logs.iter().map(|p| p.0).sum::<f64>() / m;
    let mean_y = logs.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let syy: f64 = logs.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData(
            "rate fit needs at least two distinct horizons".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let sse: f64 = logs
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let stderr = (logs.len() > 2).then(|| (sse / (m - 2.0) / sxx).sqrt());
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    Ok(RateFit {
        slope,
        intercept,
        stderr,
        r_squared,
        points: logs,
    })
}

/// Two sides of the identity
/// `x'(Q + K_hat'R K_hat)x + x'(A + B K_hat)'P(A + B K_hat)x - x'Px
///  = x'(K_hat - K)'(R + B'PB)(K_hat - K)x`,
/// plus the magnitude of the left-hand terms, which sets the roundoff scale.
pub fn riccati_identity_sides(
    spec: &SystemSpec,
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
    k_hat: &DMatrix<f64>,
    x: &DVector<f64>,
) -> (f64, f64, f64) {
    let closed = &spec.a + &spec.b * k_hat;
    let t1 = linalg::quad_form(&(&spec.q + k_hat.transpose() * &spec.r * k_hat), x);
    let t2 = linalg::quad_form(&(closed.transpose() * p * &closed), x);
    let t3 = linalg::quad_form(p, x);
    let dk = (k_hat - k) * x;
    let s = &spec.r + spec.b.transpose() * p * &spec.b;
    let rhs = linalg::quad_form(&s, &dk);
    (t1 + t2 - t3, rhs, t1.abs() + t2.abs() + t3.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCheck {
    pub max_rel_err: f64,
    pub trials: usize,
    pub passed: bool,
}

/// Checks the Riccati completion-of-squares identity on random `(x, K_hat)`.
///
/// Relative error is `|lhs - rhs|` over the summed magnitude of the
/// left-hand terms. Half the draws perturb `K` slightly, half are far away.
pub fn riccati_identity_check(
    spec: &SystemSpec,
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
    trials: usize,
    rel_tol: f64,
    seed: u64,
) -> Result<IdentityCheck> {
    if p.shape() != (spec.n, spec.n) || k.shape() != (spec.d, spec.n) {
        return Err(invalid("P or K has the wrong shape"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: usize, cols: usize, scale: f64| {
        DMatrix::from_fn(rows, cols, |_, _| {
            scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        })
    };
    let mut max_rel_err: f64 = 0.0;
    for i in 0..trials {
        let x = draw(spec.n, 1, 1.0).column(0).into_owned();
        let scale = if i % 2 == 0 { 1e-3 } else { 1.0 };
        let k_hat = k + draw(spec.d, spec.n, scale);
        let (lhs, rhs, mag) = riccati_identity_sides(spec, p, k, &k_hat, &x);
        let err = if mag > 0.0 { (lhs - rhs).abs() / mag } else { 0.0 };
        max_rel_err = max_rel_err.max(err);
    }
    Ok(IdentityCheck {
        max_rel_err,
        trials,
        passed: max_rel_err <= rel_tol,
    })
}

/// Nearest-rank empirical quantile: the `ceil(q N)`-th smallest value.
pub fn nearest_rank(values: &[f64], q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(invalid(format!("quantile level {q} is outside (0, 1)")));
    }
    if values.is_empty() {
        return Err(Error::InsufficientData("quantile of an empty sample".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (q * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn median(values: &[f64]) -> Result<f64> {
    nearest_rank(values, 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub level: f64,
    pub count: usize,
    pub regret: f64,
    pub est_err_theta: f64,
    #[serde(rename = "est_err_K")]
    pub est_err_k: f64,
}

/// Per-horizon quantiles over successful records.
pub fn aggregate_quantiles(records: &[RunRecord], levels: &[f64]) -> Result<Vec<QuantileRow>> {
    if let Some(&q) = levels.iter().find(|&&q| !(q > 0.0 && q < 1.0)) {
        return Err(invalid(format!("quantile level {q} is outside (0, 1)")));
    }
    let mut groups: BTreeMap<usize, Vec<&RunRecord>> = BTreeMap::new();
    for rec in records {
        groups.entry(rec.horizon).or_default().push(rec);
    }
    let mut rows = Vec::new();
    for (horizon, group) in groups {
        let metrics: Vec<_> = group.iter().filter_map(|r| r.metrics.as_ref()).collect();
        if metrics.is_empty() {
            return Err(Error::InsufficientData(format!(
                "no successful records at T = {horizon}"
            )));
        }
        let col = |f: fn(&crate::sim::RunMetrics) -> f64| -> Vec<f64> {
            metrics.iter().map(|m| f(m)).collect()
        };
        let regrets = col(|m| m.regret);
        let thetas = col(|m| m.est_err_theta);
        let ks = col(|m| m.est_err_k);
        for &level in levels {
            rows.push(QuantileRow {
                horizon,
                level,
                count: metrics.len(),
                regret: nearest_rank(&regrets, level)?,
                est_err_theta: nearest_rank(&thetas, level)?,
                est_err_k: nearest_rank(&ks, level)?,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::InsufficientData("no records".into()));
    }
    Ok(rows)
}

/// Acceptance band for a fitted exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    /// `None` for an open lower end.
    pub lo: Option<f64>,
    pub hi: f64,
}

impl Band {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo: Some(lo), hi }
    }

    pub const fn at_most(hi: f64) -> Self {
        Self { lo: None, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo.is_none_or(|lo| v >= lo) && v <= self.hi
    }
}

pub const REGRET_BAND: Band = Band::new(0.35, 0.65);
pub const EST_ERR_BAND: Band = Band::new(-0.35, -0.15);
pub const LAM_PARALLEL_BAND: Band = Band::new(0.9, 1.1);
pub const LAM_PERP_BAND: Band = Band::new(0.35, 0.75);
pub const LAM_DELTA_BAND: Band = Band::new(0.3, 0.75);
pub const DECOMP_BAND: Band = Band::at_most(0.75);

/// Minimum number of horizons for a rate report.
pub const MIN_HORIZONS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateEntry {
    pub metric: String,
    /// `(T, median statistic)` per horizon.
    pub medians: Vec<(usize, f64)>,
    pub fit: Option<RateFit>,
    pub band: Band,
    pub pass: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub horizons: Vec<usize>,
    pub replicates_per_horizon: Vec<usize>,
    pub failed_records: usize,
    pub entries: Vec<RateEntry>,
}

impl RateReport {
    pub fn entry(&self, metric: &str) -> Option<&RateEntry> {
        self.entries.iter().find(|e| e.metric == metric)
    }

    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }
}

type MetricFn = fn(&crate::sim::RunMetrics) -> f64;

/// The metrics a rate report covers, with their statistic and band.
pub const REPORT_METRICS: [(&str, MetricFn, Band); 7] = [
    ("regret", |m| m.regret, REGRET_BAND),
    ("est_err_theta", |m| m.est_err_theta, EST_ERR_BAND),
    ("est_err_K", |m| m.est_err_k, EST_ERR_BAND),
    ("lam_parallel", |m| m.lam_parallel, LAM_PARALLEL_BAND),
    ("lam_perp", |m| m.lam_perp, LAM_PERP_BAND),
    ("lam_delta", |m| m.lam_delta, LAM_DELTA_BAND),
    ("decomp_residual", |m| m.decomp_residual.abs(), DECOMP_BAND),
];

/// Median-per-horizon log-log slopes for every reported metric.
pub fn rate_report(records: &[RunRecord]) -> Result<RateReport> {
    let mut groups: BTreeMap<usize, Vec<&crate::sim::RunMetrics>> = BTreeMap::new();
    let mut failed = 0;
    for rec in records {
        let group = groups.entry(rec.horizon).or_default();
        match &rec.metrics {
            Some(m) => group.push(m),
            None => failed += 1,
        }
    }
    groups.retain(|_, g| !g.is_empty());
    if groups.len() < MIN_HORIZONS {
        return Err(Error::InsufficientData(format!(
            "rate report needs at least {MIN_HORIZONS} horizons with data, found {}",
            groups.len()
        )));
    }
    let mut entries = Vec::new();
    for (name, stat, band) in REPORT_METRICS {
        let mut medians = Vec::new();
        for (&t, group) in &groups {
            let vals: Vec<f64> = group.iter().map(|m| stat(m)).collect();
            medians.push((t, median(&vals)?));
        }
        let points: Vec<(f64, f64)> = medians.iter().map(|&(t, v)| (t as f64, v)).collect();
        let (fit, note) = match fit_rate(&points, MIN_HORIZONS) {
            Ok(fit) => (Some(fit), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let pass = fit.as_ref().is_some_and(|f| band.contains(f.slope));
        entries.push(RateEntry {
            metric: name.to_string(),
            medians,
            fit,
            band,
            pass,
            note,
        });
    }
    Ok(RateReport {
        horizons: groups.keys().copied().collect(),
        replicates_per_horizon: groups.values().map(Vec::len).collect(),
        failed_records: failed,
        entries,
    })
}
