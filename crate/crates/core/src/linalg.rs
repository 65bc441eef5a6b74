//! Small dense linear-algebra helpers shared by the numerical modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Result, ScalpelError};

/// Eigenvalue floor applied when taking matrix square roots.
pub const EIG_FLOOR: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-9;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Apply `f` to the eigenvalues of a symmetric matrix, flooring them first.
fn spectral_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(|v| f(v.max(EIG_FLOOR)));
    let q = &eig.eigenvectors;
    let scaled = q * DMatrix::from_diagonal(&vals);
    symmetrize(&(scaled * q.transpose()))
}

/// Principal square root of a symmetric PSD matrix.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    spectral_map(m, f64::sqrt)
}

pub fn sym_inv_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    spectral_map(m, |v| 1.0 / v.sqrt())
}

/// Sum of square roots of the (floored) eigenvalues, i.e. `tr(sqrt(m))`.
pub fn trace_sqrt(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(m));
    eig.eigenvalues.iter().map(|v| v.max(EIG_FLOOR).sqrt()).sum()
}

/// Check that `m` is square, symmetric and positive definite.
pub fn check_spd(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(ScalpelError::NotPositiveDefinite);
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(ScalpelError::NotPositiveDefinite);
    }
    let scale = m.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(ScalpelError::NotPositiveDefinite);
            }
        }
    }
    if m.clone().cholesky().is_none() {
        return Err(ScalpelError::NotPositiveDefinite);
    }
    Ok(())
}

/// Cholesky-based Gaussian log-density helper.
#[derive(Debug, Clone)]
pub struct GaussianFactor {
    pub mean: DVector<f64>,
    /// Inverse of the lower Cholesky factor of the covariance.
    pub inv_chol: DMatrix<f64>,
    /// `-0.5 * (d ln 2π + ln det Σ)`.
    pub log_norm: f64,
}

impl GaussianFactor {
    pub fn new(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(ScalpelError::DimensionMismatch {
                expected: d,
                got: cov.nrows(),
            });
        }
        let chol = symmetrize(cov)
            .cholesky()
            .ok_or(ScalpelError::NotPositiveDefinite)?;
        let l = chol.l();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let inv_chol = l
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or(ScalpelError::NotPositiveDefinite)?;
        Ok(Self {
            mean: mean.clone(),
            inv_chol,
            log_norm: -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
        })
    }

    pub fn log_pdf(&self, z: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut maha = 0.0;
        // inv_chol is lower triangular
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += self.inv_chol[(i, j)] * (z[j] - self.mean[j]);
            }
            maha += acc * acc;
        }
        self.log_norm - 0.5 * maha
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_squares_back() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let s = sym_sqrt(&a);
        assert!((&s * &s - &a).abs().max() < 1e-12);
        let is = sym_inv_sqrt(&a);
        assert!((&is * &a * &is - DMatrix::identity(3, 3)).abs().max() < 1e-12);
        assert!((trace_sqrt(&a) - s.trace()).abs() < 1e-12);
    }

    #[test]
    fn spd_check_rejects_indefinite_and_asymmetric() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(check_spd(&bad).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(check_spd(&asym).is_err());
        assert!(check_spd(&DMatrix::identity(2, 2)).is_ok());
    }

    #[test]
    fn factor_matches_standard_normal() {
        let f = GaussianFactor::new(&DVector::zeros(1), &DMatrix::identity(1, 1)).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((f.log_pdf(&[0.0]) - expected).abs() < 1e-15);
    }
}
