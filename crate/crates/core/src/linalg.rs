//! Small dense helpers shared by the control, identification and analysis modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

/// Builds an `rows x cols` matrix from row-major data.
pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(invalid(format!(
            "expected {} entries for a {rows}x{cols} matrix, got {}",
            rows * cols,
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Eigenvalues of a symmetric matrix (the upper triangle is symmetrized first).
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    match m.nrows() {
        0 => DVector::zeros(0),
        1 => DVector::from_element(1, m[(0, 0)]),
        2 => {
            let (a, b, c) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
            let mean = 0.5 * (a + c);
            let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            DVector::from_vec(vec![mean - rad, mean + rad])
        }
        _ => {
            let sym = 0.5 * (m + m.transpose());
            sym.symmetric_eigenvalues()
        }
    }
}

pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m).min()
}

pub fn lambda_max(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m).max()
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.nrows() == 1 || m.ncols() == 1 {
        return m.norm();
    }
    let gram = if m.nrows() <= m.ncols() {
        m * m.transpose()
    } else {
        m.transpose() * m
    };
    lambda_max(&gram).max(0.0).sqrt()
}

/// Spectral norm of a symmetric matrix: largest absolute eigenvalue.
pub fn symmetric_spectral_norm(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m).amax()
}

/// Inverse square root of a symmetric positive definite matrix.
pub fn inv_sqrt_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = 0.5 * (m + m.transpose());
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Numeric("matrix is not positive definite".into()));
    }
    let scaled = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt()),
    );
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&scaled) * v.transpose())
}

/// True when `m` is symmetric to `rel_tol` relative to its largest entry.
pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    (m - m.transpose()).amax() <= rel_tol * scale
}

pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    // x' M x without allocating the intermediate vector
    let n = x.len();
    let mut acc = 0.0;
    for j in 0..n {
        let mut col = 0.0;
        for i in 0..n {
            col += x[i] * m[(i, j)];
        }
        acc += col * x[j];
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_closed_form_matches_general_solver() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 1.5, 1.5, -2.0]);
        let fast = symmetric_eigenvalues(&m);
        let mut slow: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
        slow.sort_by(f64::total_cmp);
        assert!((fast[0] - slow[0]).abs() < 1e-12);
        assert!((fast[1] - slow[1]).abs() < 1e-12);
    }

    #[test]
    fn spectral_norm_of_rank_one() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 2.0, 2.0, 4.0, 4.0]);
        // u v' with |u| = sqrt(5), |v| = 3
        assert!((spectral_norm(&m) - 3.0 * 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn row_major_round_trip() {
        let data = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let m = from_row_major(2, 3, &data).unwrap();
        assert_eq!(m[(1, 0)], 4.0);
        assert_eq!(to_row_major(&m), data.to_vec());
        assert!(from_row_major(2, 2, &data).is_err());
    }

    #[test]
    fn inverse_square_root() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let s = inv_sqrt_spd(&m).unwrap();
        let back = &s * &m * &s;
        assert!((back - DMatrix::identity(2, 2)).amax() < 1e-12);
    }
}
