//! Small dense helpers shared by the solver, the contract checks and the
//! data-assimilation code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Power-iteration estimate of `‖J‖₂`.
///
/// Used only for contract checks; the solver never needs it.
pub fn spectral_norm(j: &DMatrix<f64>, max_iters: usize, tol: f64) -> f64 {
    let n = j.ncols();
    if n == 0 || j.nrows() == 0 {
        return 0.0;
    }
    // Deterministic start with no zero components.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * i as f64);
    v.normalize_mut();
    let mut est = 0.0;
    for _ in 0..max_iters {
        let w = j.tr_mul(&(j * &v));
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm.sqrt();
        v = w / norm;
        if (next - est).abs() <= tol * next {
            est = next;
            break;
        }
        est = next;
    }
    est
}

/// Power iteration with the defaults used throughout the contract checks
/// (50 iterations, relative tolerance 1e-10).
pub fn spectral_norm_default(j: &DMatrix<f64>) -> f64 {
    spectral_norm(j, 50, 1e-10)
}

/// `‖J‖₂` from a full SVD.
pub fn spectral_norm_exact(j: &DMatrix<f64>) -> f64 {
    if j.is_empty() {
        return 0.0;
    }
    j.clone().svd(false, false).singular_values.max()
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    let chol = a.clone().cholesky().ok_or(Error::Singular(what))?;
    Ok(chol.solve(b))
}

pub fn spd_inverse(a: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let chol = a.clone().cholesky().ok_or(Error::Singular(what))?;
    Ok(chol.inverse())
}

/// `S^{-1/2}` for symmetric `S`, flooring eigenvalues at `floor`.
pub fn sym_inv_sqrt(s: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = s.clone().symmetric_eigen();
    let d = eig.eigenvalues.map(|l| 1.0 / l.max(floor).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Lower Cholesky factor of an SPD matrix.
pub fn cholesky_factor(a: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    Ok(a.clone().cholesky().ok_or(Error::Singular(what))?.l())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_iteration_matches_svd() {
        let j = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.5, -1.0, 3.0, 0.0]);
        let exact = spectral_norm_exact(&j);
        assert!((spectral_norm_default(&j) - exact).abs() < 1e-8 * exact);
        assert_eq!(spectral_norm_default(&DMatrix::zeros(2, 2)), 0.0);
    }

    #[test]
    fn inverse_square_root() {
        let s = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = sym_inv_sqrt(&s, 1e-12);
        let back = &r * &s * &r;
        assert!((back - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn spd_solve_rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(spd_solve(&a, &DVector::zeros(2), "test").is_err());
    }
}
