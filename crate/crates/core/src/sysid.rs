//! Ordinary least-squares identification of `Theta = [A, B]` from observed
//! transitions `x_{k+1} = A x_k + B u_k + noise`.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::linalg;

pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Running sufficient statistics of the least-squares problem.
///
/// Both accumulators are exact sums over every recorded transition; nothing is
/// ever forgotten or down-weighted.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionState {
    n: usize,
    d: usize,
    /// `sum z_k z_k'` with `z_k = [x_k; u_k]`.
    gram: DMatrix<f64>,
    /// `sum x_{k+1} z_k'`.
    cross: DMatrix<f64>,
    count: usize,
    z: DVector<f64>,
}

/// Least-squares estimate of `[A, B]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaEstimate {
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    pub gram_min_eig: f64,
    /// False when the Gram matrix is numerically rank deficient; the
    /// estimate is then the minimum-norm minimizer and only useful for
    /// diagnostics.
    pub identifiable: bool,
}

impl ThetaEstimate {
    pub fn theta(&self) -> DMatrix<f64> {
        let n = self.a_hat.nrows();
        let d = self.b_hat.ncols();
        let mut theta = DMatrix::zeros(n, n + d);
        theta.columns_mut(0, n).copy_from(&self.a_hat);
        theta.columns_mut(n, d).copy_from(&self.b_hat);
        theta
    }
}

impl RegressionState {
    pub fn new(n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(invalid("regression dimensions must be positive"));
        }
        let dim_z = n + d;
        Ok(Self {
            n,
            d,
            gram: DMatrix::zeros(dim_z, dim_z),
            cross: DMatrix::zeros(n, dim_z),
            count: 0,
            z: DVector::zeros(dim_z),
        })
    }

    pub fn dim_z(&self) -> usize {
        self.n + self.d
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn cross(&self) -> &DMatrix<f64> {
        &self.cross
    }

    /// Copy of `sum z_k z_k'`.
    pub fn gram_snapshot(&self) -> DMatrix<f64> {
        self.gram.clone()
    }

    pub fn record_transition(
        &mut self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        x_next: &DVector<f64>,
    ) -> Result<()> {
        if x.len() != self.n || u.len() != self.d || x_next.len() != self.n {
            return Err(invalid(format!(
                "transition dimensions ({}, {}, {}) do not match n = {}, d = {}",
                x.len(),
                u.len(),
                x_next.len(),
                self.n,
                self.d
            )));
        }
        if !(linalg::all_finite_vec(x) && linalg::all_finite_vec(u) && linalg::all_finite_vec(x_next))
        {
            return Err(invalid("transition has non-finite entries"));
        }
        self.z.rows_mut(0, self.n).copy_from(x);
        self.z.rows_mut(self.n, self.d).copy_from(u);
        let dim_z = self.dim_z();
        for j in 0..dim_z {
            let zj = self.z[j];
            for i in 0..dim_z {
                self.gram[(i, j)] += self.z[i] * zj;
            }
            for i in 0..self.n {
                self.cross[(i, j)] += x_next[i] * zj;
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Minimizer of `sum |x_{k+1} - A' x_k - B' u_k|^2` over the recorded data.
    ///
    /// Identifiable when `lambda_min(G) >= rank_tol * trace(G) / dim_z`.
    pub fn solve_theta(&self, rank_tol: f64) -> Result<ThetaEstimate> {
        if self.count == 0 {
            return Err(Error::NoData);
        }
        let dim_z = self.dim_z();
        let gram_min_eig = linalg::lambda_min(&self.gram);
        let threshold = rank_tol * self.gram.trace() / dim_z as f64;
        let identifiable = threshold > 0.0 && gram_min_eig >= threshold;

        let theta = if identifiable {
            match self.gram.clone().cholesky() {
                Some(ch) => ch.solve(&self.cross.transpose()).transpose(),
                None => self.min_norm_theta()?,
            }
        } else {
            self.min_norm_theta()?
        };
        Ok(ThetaEstimate {
            a_hat: theta.columns(0, self.n).into_owned(),
            b_hat: theta.columns(self.n, self.d).into_owned(),
            gram_min_eig,
            identifiable,
        })
    }

    fn min_norm_theta(&self) -> Result<DMatrix<f64>> {
        let pinv = self
            .gram
            .clone()
            .pseudo_inverse(1e-12 * self.gram.amax().max(f64::MIN_POSITIVE))
            .map_err(|e| Error::Numeric(e.to_string()))?;
        Ok(&self.cross * pinv)
    }
}
