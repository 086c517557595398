//! Deterministic LQR primitives: spectral radius, the discrete algebraic
//! Riccati equation, the optimal gain and the stabilizing-gain check.

use nalgebra::{DMatrix, DVector, Schur};

use crate::error::{invalid, Error, Result};
use crate::linalg;

pub const DEFAULT_DARE_TOL: f64 = 1e-12;
pub const DEFAULT_DARE_MAX_ITERS: usize = 100_000;

/// Iterates whose Frobenius norm exceeds this multiple of `|Q|_F` are treated
/// as divergent; the Riccati map only blows up on unstabilizable pairs.
const DIVERGENCE_FACTOR: f64 = 1e14;

/// True linear dynamics, quadratic cost and noise level of an LQR instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub n: usize,
    pub d: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub sigma_eps: f64,
    pub x0: DVector<f64>,
}

impl SystemSpec {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        sigma_eps: f64,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        let d = b.ncols();
        if n == 0 || d == 0 {
            return Err(invalid("state and control dimensions must be positive"));
        }
        if a.ncols() != n || b.nrows() != n {
            return Err(invalid(format!(
                "A is {}x{} and B is {}x{}; expected A n x n and B n x d",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        if q.shape() != (n, n) || r.shape() != (d, d) {
            return Err(invalid("Q must be n x n and R must be d x d"));
        }
        if x0.len() != n {
            return Err(invalid(format!("x0 has length {}, expected {n}", x0.len())));
        }
        if !(sigma_eps > 0.0) || !sigma_eps.is_finite() {
            return Err(invalid("sigma_eps must be positive and finite"));
        }
        for (name, m) in [("A", &a), ("B", &b), ("Q", &q), ("R", &r)] {
            if !linalg::all_finite(m) {
                return Err(invalid(format!("{name} has non-finite entries")));
            }
        }
        if !linalg::all_finite_vec(&x0) {
            return Err(invalid("x0 has non-finite entries"));
        }
        validate_cost(&q, &r)?;
        Ok(Self {
            n,
            d,
            a,
            b,
            q,
            r,
            sigma_eps,
            x0,
        })
    }

    /// `[A, B]`, the n x (n+d) parameter matrix identified by least squares.
    pub fn theta(&self) -> DMatrix<f64> {
        let mut theta = DMatrix::zeros(self.n, self.n + self.d);
        theta.columns_mut(0, self.n).copy_from(&self.a);
        theta.columns_mut(self.n, self.d).copy_from(&self.b);
        theta
    }

    pub fn solve_dare(&self) -> Result<RiccatiSolution> {
        solve_dare(
            &self.a,
            &self.b,
            &self.q,
            &self.r,
            DEFAULT_DARE_TOL,
            DEFAULT_DARE_MAX_ITERS,
        )
    }
}

/// Checks that `Q` and `R` are symmetric positive definite.
pub fn validate_cost(q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<()> {
    for (name, m) in [("Q", q), ("R", r)] {
        if !linalg::is_symmetric(m, 1e-12) {
            return Err(invalid(format!("{name} is not symmetric")));
        }
        if m.clone().cholesky().is_none() {
            return Err(invalid(format!("{name} is not positive definite")));
        }
    }
    Ok(())
}

/// Stabilizing solution of the DARE together with its gain.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// `|P - F(P)|_2 / |P|_2`, where `F` is the Riccati map.
    pub residual: f64,
    pub iterations: usize,
    /// Spectral radius of `A + BK`.
    pub closed_loop_radius: f64,
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if !m.is_square() {
        return Err(invalid(format!(
            "spectral radius needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if !linalg::all_finite(m) {
        return Err(invalid("matrix has non-finite entries"));
    }
    match m.nrows() {
        0 => Ok(0.0),
        1 => Ok(m[(0, 0)].abs()),
        2 => {
            let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
            let half_tr = 0.5 * (a + d);
            let det = a * d - b * c;
            let disc = half_tr * half_tr - det;
            if disc >= 0.0 {
                let s = disc.sqrt();
                Ok((half_tr + s).abs().max((half_tr - s).abs()))
            } else {
                // complex pair: |lambda|^2 = det
                Ok(det.abs().sqrt())
            }
        }
        _ => {
            let schur = Schur::try_new(m.clone(), f64::EPSILON, 100_000)
                .ok_or_else(|| Error::Numeric("Schur decomposition did not converge".into()))?;
            Ok(schur
                .complex_eigenvalues()
                .iter()
                .map(|c| c.norm())
                .fold(0.0, f64::max))
        }
    }
}

/// `K = -(R + B'PB)^{-1} B'PA`.
pub fn optimal_gain(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let d = b.ncols();
    if p.shape() != (n, n) || a.ncols() != n || b.nrows() != n || r.shape() != (d, d) {
        return Err(invalid("optimal_gain: dimension mismatch"));
    }
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let rhs = &bt_p * a;
    solve_spd(s, rhs)
        .map(|x| -x)
        .ok_or_else(|| Error::Numeric("R + B'PB is singular".into()))
}

/// Solves `S X = rhs` for symmetric `S`, preferring Cholesky and falling back to LU.
fn solve_spd(s: DMatrix<f64>, rhs: DMatrix<f64>) -> Option<DMatrix<f64>> {
    if s.nrows() == 1 {
        let v = s[(0, 0)];
        if v == 0.0 || !v.is_finite() {
            return None;
        }
        return Some(rhs / v);
    }
    match s.clone().cholesky() {
        Some(ch) => Some(ch.solve(&rhs)),
        None => s.lu().solve(&rhs),
    }
}

/// True iff `rho(A + B K0) < 1 - margin`.
pub fn check_stabilizing(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k0: &DMatrix<f64>,
    margin: f64,
) -> Result<bool> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || k0.shape() != (b.ncols(), n) {
        return Err(invalid("check_stabilizing: dimension mismatch"));
    }
    if !(margin >= 0.0) {
        return Err(invalid("margin must be non-negative"));
    }
    Ok(spectral_radius(&(a + b * k0))? < 1.0 - margin)
}

/// Fixed-point iteration of the Riccati map starting from `P_0 = Q`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<RiccatiSolution> {
    check_dare_inputs(a, b, q, r, tol)?;
    validate_cost(q, r)?;
    riccati_fixed_point(a, b, q, r, q.clone(), tol, max_iters)
}

/// Same iteration as [`solve_dare`] but started from a caller-supplied
/// positive semidefinite `P_init`, typically the previous solution of a
/// slowly varying problem. The limit does not depend on the start.
pub fn solve_dare_from(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p_init: &DMatrix<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<RiccatiSolution> {
    check_dare_inputs(a, b, q, r, tol)?;
    if p_init.shape() != q.shape() || !linalg::all_finite(p_init) {
        return Err(invalid("initial P must be a finite n x n matrix"));
    }
    riccati_fixed_point(a, b, q, r, p_init.clone(), tol, max_iters)
}

fn check_dare_inputs(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
) -> Result<()> {
    let n = a.nrows();
    let d = b.ncols();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (d, d) {
        return Err(invalid("solve_dare: dimension mismatch"));
    }
    if !(tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    if !linalg::all_finite(a) || !linalg::all_finite(b) {
        return Err(invalid("A or B has non-finite entries"));
    }
    Ok(())
}

/// One application of the Riccati map. Returns `(F(P), X)` with
/// `X = (R + B'PB)^{-1} B'PA`, so that the gain for `P` is `-X`.
fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let pa = p * a;
    let pb = p * b;
    let s = r + b.transpose() * &pb;
    let bt_pa = b.transpose() * &pa;
    let x = solve_spd(s, bt_pa.clone())?;
    let mut next = a.transpose() * pa - bt_pa.transpose() * &x + q;
    // keep the iterate exactly symmetric
    let n = next.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (next[(i, j)] + next[(j, i)]);
            next[(i, j)] = m;
            next[(j, i)] = m;
        }
    }
    Some((next, x))
}

fn riccati_fixed_point(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    mut p: DMatrix<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<RiccatiSolution> {
    let n = a.nrows();
    let sqrt_n = (n as f64).sqrt();
    let blowup = DIVERGENCE_FACTOR * q.norm().max(f64::MIN_POSITIVE);
    for iter in 0..=max_iters {
        let (next, x) =
            riccati_map(a, b, q, r, &p).ok_or(Error::NotStabilizable { iterations: iter })?;
        let diff = &next - &p;
        let p_norm = p.norm();
        if !p_norm.is_finite() || p_norm > blowup {
            return Err(Error::NotStabilizable { iterations: iter });
        }
        // |D|_2 / |P|_2 <= sqrt(n) |D|_F / |P|_F, so this test is conservative
        if sqrt_n * diff.norm() <= tol * p_norm {
            let residual = linalg::symmetric_spectral_norm(&diff)
                / linalg::symmetric_spectral_norm(&p).max(f64::MIN_POSITIVE);
            let k = -x;
            let closed_loop_radius = spectral_radius(&(a + b * &k))?;
            if closed_loop_radius >= 1.0 {
                return Err(Error::NotStabilizable { iterations: iter });
            }
            return Ok(RiccatiSolution {
                p,
                k,
                residual,
                iterations: iter,
                closed_loop_radius,
            });
        }
        p = next;
    }
    Err(Error::NotStabilizable {
        iterations: max_iters,
    })
}

/// `|P - F(P)|_2 / |P|_2` for an arbitrary candidate `P`.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<f64> {
    let (next, _) = riccati_map(a, b, q, r, p)
        .ok_or_else(|| Error::Numeric("R + B'PB is singular".into()))?;
    Ok(linalg::symmetric_spectral_norm(&(next - p))
        / linalg::symmetric_spectral_norm(p).max(f64::MIN_POSITIVE))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    /// Positive root of b^2 p^2 + (r - a^2 r - q b^2) p - q r = 0.
    fn scalar_dare_root(a: f64, b: f64, q: f64, r: f64) -> f64 {
        let qa = b * b;
        let qb = r - a * a * r - q * b * b;
        let qc = -q * r;
        (-qb + (qb * qb - 4.0 * qa * qc).sqrt()) / (2.0 * qa)
    }

    #[test]
    fn spectral_radius_examples() {
        assert!((spectral_radius(&DMatrix::identity(3, 3)).unwrap() - 1.0).abs() < 1e-12);
        let nil = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(spectral_radius(&nil).unwrap(), 0.0);
        let diag = DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.0, -0.95]);
        assert!((spectral_radius(&diag).unwrap() - 0.95).abs() < 1e-12);
    }

    #[test]
    fn spectral_radius_rejects_bad_input() {
        assert!(matches!(
            spectral_radius(&DMatrix::zeros(2, 3)),
            Err(Error::InvalidInput(_))
        ));
        let mut m = DMatrix::identity(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(spectral_radius(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn spectral_radius_general_path() {
        // rotation by 90 degrees scaled by 0.8, embedded with a 0.3 mode
        let m = DMatrix::from_row_slice(3, 3, &[0.0, -0.8, 0.0, 0.8, 0.0, 0.0, 0.0, 0.0, 0.3]);
        assert!((spectral_radius(&m).unwrap() - 0.8).abs() < 1e-10);
        let m2 = DMatrix::from_row_slice(2, 2, &[0.0, -0.8, 0.8, 0.0]);
        assert!((spectral_radius(&m2).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn dare_with_zero_dynamics_returns_q() {
        let sol = solve_dare(&scalar(0.0), &scalar(1.0), &scalar(1.0), &scalar(1.0), 1e-12, 1000)
            .unwrap();
        assert!((sol.p[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(sol.k[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn dare_without_control_is_a_lyapunov_equation() {
        let sol = solve_dare(&scalar(0.5), &scalar(0.0), &scalar(1.0), &scalar(1.0), 1e-12, 1000)
            .unwrap();
        assert!((sol.p[(0, 0)] - 4.0 / 3.0).abs() < 1e-11);
        assert_eq!(sol.k[(0, 0)], 0.0);
    }

    #[test]
    fn scalar_dare_matches_quadratic_root() {
        let p_star = scalar_dare_root(0.5, 1.0, 1.0, 1.0);
        assert!((p_star - 1.132_782_2).abs() < 1e-7);
        let sol = solve_dare(&scalar(0.5), &scalar(1.0), &scalar(1.0), &scalar(1.0), 1e-12, 1000)
            .unwrap();
        assert!((sol.p[(0, 0)] - p_star).abs() < 1e-9);
        let k_star = -p_star * 0.5 / (1.0 + p_star);
        assert!((sol.k[(0, 0)] - k_star).abs() < 1e-9);
        assert!((sol.k[(0, 0)] + 0.265_564_437_074_637_4).abs() < 1e-9);
        assert!(sol.residual <= 1e-12);
        assert!(sol.closed_loop_radius < 1.0);
    }

    #[test]
    fn unstabilizable_pair_is_reported() {
        let err = solve_dare(&scalar(1.2), &scalar(0.0), &scalar(1.0), &scalar(1.0), 1e-12, 100_000)
            .unwrap_err();
        assert!(matches!(err, Error::NotStabilizable { .. }));
    }

    #[test]
    fn warm_start_reaches_the_same_solution() {
        let a = DMatrix::from_row_slice(2, 2, &[1.1, 0.3, 0.0, 0.7]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        let cold = solve_dare(&a, &b, &q, &r, 1e-12, 100_000).unwrap();
        let warm = solve_dare_from(&a, &b, &q, &r, &(3.0 * &cold.p), 1e-12, 100_000).unwrap();
        assert!((&cold.p - &warm.p).amax() < 1e-9 * cold.p.amax());
        assert!(warm.iterations < cold.iterations + 50);
    }

    #[test]
    fn optimal_gain_examples() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 1.0]);
        let a = DMatrix::from_row_slice(2, 2, &[0.3, 1.0, -0.2, 0.4]);
        let r = DMatrix::identity(1, 1);
        let k = optimal_gain(&p, &a, &DMatrix::zeros(2, 1), &r).unwrap();
        assert_eq!(k, DMatrix::zeros(1, 2));
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.5]);
        let k = optimal_gain(&p, &DMatrix::zeros(2, 2), &b, &r).unwrap();
        assert!(k.amax() == 0.0);
        let k = optimal_gain(&scalar(1.132_782_2), &scalar(0.5), &scalar(1.0), &scalar(1.0))
            .unwrap();
        let oracle = -1.132_782_2 * 0.5 / (1.0 + 1.132_782_2);
        assert!((k[(0, 0)] - oracle).abs() < 1e-15);
        assert!((k[(0, 0)] + 0.265_564_4).abs() < 1e-7);
    }

    #[test]
    fn optimal_gain_singular_is_numeric_error() {
        let zero = scalar(0.0);
        let err = optimal_gain(&scalar(1.0), &scalar(1.0), &zero, &zero).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn stabilizing_check_examples() {
        assert!(check_stabilizing(&scalar(0.5), &scalar(1.0), &scalar(0.0), 0.0).unwrap());
        assert!(!check_stabilizing(&scalar(1.2), &scalar(1.0), &scalar(0.0), 0.0).unwrap());
        assert!(check_stabilizing(&scalar(1.2), &scalar(1.0), &scalar(-0.9), 0.0).unwrap());
        assert!(matches!(
            check_stabilizing(&scalar(1.2), &scalar(1.0), &DMatrix::zeros(1, 2), 0.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn system_spec_validation() {
        let ok = SystemSpec::new(
            scalar(0.5),
            scalar(1.0),
            scalar(1.0),
            scalar(1.0),
            1.0,
            DVector::zeros(1),
        );
        assert!(ok.is_ok());
        let bad_q = SystemSpec::new(
            scalar(0.5),
            scalar(1.0),
            scalar(-1.0),
            scalar(1.0),
            1.0,
            DVector::zeros(1),
        );
        assert!(bad_q.is_err());
        let asym = SystemSpec::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            scalar(1.0),
            1.0,
            DVector::zeros(2),
        );
        assert!(asym.is_err());
        let bad_sigma = SystemSpec::new(
            scalar(0.5),
            scalar(1.0),
            scalar(1.0),
            scalar(1.0),
            0.0,
            DVector::zeros(1),
        );
        assert!(bad_sigma.is_err());
    }
}
