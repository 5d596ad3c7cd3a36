//! Symmetric eigen-decomposition helpers for covariance hygiene.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numcore::matrix::Matrix;

/// Eigenvalues more negative than this are treated as genuine indefiniteness.
pub const PSD_TOLERANCE: f64 = 1e-9;

fn to_nalgebra(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(Error::shape("symmetric_eigenvalues", m.shape(), m.shape()));
    }
    if m.rows() == 0 {
        return Ok(Vec::new());
    }
    let eig = to_nalgebra(&m.symmetrize()).symmetric_eigenvalues();
    let mut values: Vec<f64> = eig.iter().copied().collect();
    values.sort_by(f64::total_cmp);
    Ok(values)
}

pub fn min_eigenvalue(m: &Matrix) -> Result<f64> {
    Ok(symmetric_eigenvalues(m)?.first().copied().unwrap_or(0.0))
}

/// Symmetric within `1e-10` and no eigenvalue below `-PSD_TOLERANCE`.
pub fn check_psd(m: &Matrix, what: &str) -> Result<()> {
    if !m.is_finite() {
        return Err(Error::Validation(format!("{what} has non-finite entries")));
    }
    let asym = m.asymmetry();
    if asym > 1e-10 * m.max_abs().max(1.0) {
        return Err(Error::Validation(format!("{what} is not symmetric (|A - A^T| = {asym:e})")));
    }
    let lo = min_eigenvalue(m)?;
    if lo < -PSD_TOLERANCE {
        return Err(Error::Validation(format!(
            "{what} is not positive semi-definite (min eigenvalue {lo:e})"
        )));
    }
    Ok(())
}

/// Symmetrizes and, if any eigenvalue dips below `-PSD_TOLERANCE`, clamps the
/// negative spectrum to zero.
pub fn stabilize_covariance(m: &Matrix) -> Result<Matrix> {
    let sym = m.symmetrize();
    if sym.rows() == 0 {
        return Ok(sym);
    }
    let eig = to_nalgebra(&sym).symmetric_eigen();
    if eig.eigenvalues.iter().all(|v| *v >= -PSD_TOLERANCE) {
        return Ok(sym);
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    let n = sym.rows();
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            data.push(rebuilt[(i, j)]);
        }
    }
    Ok(Matrix::from_vec(n, n, data)?.symmetrize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalues_of_diagonal() {
        let m = Matrix::diag(&[3.0, -1.0, 2.0]);
        assert_eq!(symmetric_eigenvalues(&m).unwrap(), vec![-1.0, 2.0, 3.0]);
    }

    #[test]
    fn clamps_indefinite_matrix() {
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]).unwrap();
        assert!(check_psd(&m, "m").is_err());
        let fixed = stabilize_covariance(&m).unwrap();
        assert!(min_eigenvalue(&fixed).unwrap() >= -1e-12);
        assert!(fixed.asymmetry() < 1e-15);
    }

    #[test]
    fn leaves_psd_matrix_alone() {
        let m = Matrix::from_rows(&[&[2.0, 0.5], &[0.5, 1.0]]).unwrap();
        assert_eq!(stabilize_covariance(&m).unwrap(), m);
    }
}
