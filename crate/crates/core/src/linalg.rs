use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Ratio of largest to smallest absolute eigenvalue of a symmetric matrix.
pub(crate) fn condition_number(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let eig = SymmetricEigen::new(a.clone());
    let abs: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs()).collect();
    let max = abs.iter().copied().fold(0.0, f64::max);
    let min = abs.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub(crate) fn spd_inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    match a.clone().cholesky() {
        Some(chol) => Ok(chol.inverse()),
        None => Err(Error::NonIdentified {
            reason: format!("{what} is not positive definite"),
            condition: condition_number(a),
        }),
    }
}

/// Solve `a x = b` for symmetric positive definite `a`.
pub(crate) fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    match a.clone().cholesky() {
        Some(chol) => Ok(chol.solve(b)),
        None => Err(Error::NonIdentified {
            reason: format!("{what} is not positive definite"),
            condition: condition_number(a),
        }),
    }
}

/// Moore–Penrose inverse of a symmetric matrix. Returns the inverse, its
/// rank, and whether every retained eigenvalue was positive.
pub(crate) fn symmetric_pinv(a: &DMatrix<f64>) -> (DMatrix<f64>, usize, bool) {
    let n = a.nrows();
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let cutoff = max * n as f64 * f64::EPSILON;
    let mut inv = DMatrix::zeros(n, n);
    let mut rank = 0;
    let mut positive = true;
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() <= cutoff {
            continue;
        }
        rank += 1;
        positive &= lambda > 0.0;
        let v = eig.eigenvectors.column(j);
        inv += (v * v.transpose()) / lambda;
    }
    (inv, rank, positive)
}
