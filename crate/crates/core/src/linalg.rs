//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, DVector};

/// Lower Cholesky factor of a symmetric positive-definite matrix, or `None`.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if !is_symmetric(a, 1e-10) {
        return None;
    }
    Cholesky::new(a.clone()).map(|c| c.l())
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    let scale = a.amax().max(1.0);
    (0..a.nrows()).all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= tol * scale))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    Cholesky::new(symmetrize(a)).map(|c| symmetrize(&c.inverse()))
}

/// Solves `A x = b` for symmetric positive-definite `A`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    Cholesky::new(symmetrize(a)).map(|c| c.solve(b))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(a).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Reciprocal condition number in the spectral norm for a symmetric matrix.
pub fn sym_rcond(a: &DMatrix<f64>) -> f64 {
    let ev = sym_eigenvalues(a);
    let lo = ev.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let hi = ev.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if hi == 0.0 {
        0.0
    } else {
        lo / hi
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_and_solve_agree() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let inv = spd_inverse(&a).unwrap();
        assert!((&a * &inv - DMatrix::identity(3, 3)).amax() < 1e-12);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x = spd_solve(&a, &b).unwrap();
        assert!((&inv * &b - x).amax() < 1e-12);
        assert!(cholesky_lower(&a).is_some());
        assert!(sym_rcond(&a) > 0.0 && sym_rcond(&a) <= 1.0);
    }

    #[test]
    fn rejects_asymmetric_and_indefinite() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(cholesky_lower(&asym).is_none());
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(cholesky_lower(&indef).is_none());
        assert_eq!(sym_eigenvalues(&indef), vec![-1.0, 1.0]);
    }
}
