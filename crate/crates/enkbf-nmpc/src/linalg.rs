//! Small dense linear-algebra helpers shared across the crate: symmetric
//! matrix square roots, eigenvalue floors, and symmetry diagnostics.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::{Error, Result};

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Largest absolute entry of `m - m^T`.
pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// `(m + m^T) / 2`, in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Symmetric square root of a positive semi-definite matrix.
///
/// Negative eigenvalues (round-off from empirical covariances) are clipped
/// at zero, which keeps the result well defined for near-singular inputs.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Symmetric inverse square root; errors if the matrix is numerically
/// singular relative to its largest eigenvalue.
pub fn sym_inv_sqrt(m: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 1e-13 * max.max(1e-300) {
        return Err(Error::SingularMatrix {
            context,
            min_eigenvalue: min,
        });
    }
    let inv_sqrt_vals = eig.eigenvalues.map(|v| 1.0 / v.sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt_vals) * eig.eigenvectors.transpose())
}

/// Symmetric inverse of an SPD matrix, with an error naming the smallest
/// eigenvalue when the factorization fails.
pub fn spd_inverse(m: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    match m.clone().cholesky() {
        Some(chol) => Ok(chol.inverse()),
        None => Err(Error::SingularMatrix {
            context,
            min_eigenvalue: min_symmetric_eigenvalue(m),
        }),
    }
}

/// Checks that a matrix is symmetric (to `tol`) and has eigenvalues above
/// `-tol`; returns the smallest eigenvalue on success.
pub fn check_symmetric_psd(m: &DMatrix<f64>, tol: f64, context: &'static str) -> Result<f64> {
    if max_asymmetry(m) > tol {
        return Err(Error::NotPositiveDefinite {
            context,
            min_eigenvalue: f64::NAN,
        });
    }
    let min = min_symmetric_eigenvalue(m);
    if min < -tol {
        return Err(Error::NotPositiveDefinite {
            context,
            min_eigenvalue: min,
        });
    }
    Ok(min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    #[test]
    fn sqrt_of_identity_is_identity() {
        let m = DMatrix::<f64>::identity(3, 3);
        assert_relative_eq!(sym_sqrt(&m), m, epsilon = 1e-14);
    }

    #[test]
    fn sqrt_squares_back() {
        let m = dmatrix![2.0, 0.5; 0.5, 1.0];
        let r = sym_sqrt(&m);
        assert_relative_eq!(&r * &r, m, epsilon = 1e-12);
    }

    #[test]
    fn sqrt_clips_negative_eigenvalues() {
        let m = dmatrix![1.0, 0.0; 0.0, -1e-14];
        let r = sym_sqrt(&m);
        assert!(r.iter().all(|v| v.is_finite()));
        assert_relative_eq!(r[(0, 0)], 1.0, epsilon = 1e-12);
        assert_eq!(r[(1, 1)], 0.0);
    }

    #[test]
    fn inv_sqrt_errors_on_singular() {
        let m = dmatrix![1.0, 0.0; 0.0, 0.0];
        match sym_inv_sqrt(&m, "test") {
            Err(Error::SingularMatrix { .. }) => {}
            other => panic!("expected SingularMatrix, got {other:?}"),
        }
    }

    #[test]
    fn inv_sqrt_inverts() {
        let m = dmatrix![4.0, 1.0; 1.0, 3.0];
        let r = sym_inv_sqrt(&m, "test").unwrap();
        assert_relative_eq!(&r * &m * &r, DMatrix::identity(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn asymmetry_measures_off_diagonal_gap() {
        let m = dmatrix![1.0, 2.0; 2.5, 1.0];
        assert_relative_eq!(max_asymmetry(&m), 0.5, epsilon = 1e-15);
        let mut s = m.clone();
        symmetrize(&mut s);
        assert_eq!(max_asymmetry(&s), 0.0);
    }
}
