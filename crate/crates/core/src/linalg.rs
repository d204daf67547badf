//! The one Cholesky policy used for all Gaussian algebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::spatial::CovarianceSpec;

const RETRY_JITTER: f64 = 1e-8;
const ZERO_NUGGET_JITTER: f64 = 1e-12;

/// Lower Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    chol: Cholesky<f64, Dyn>,
    /// Jitter that had to be added to the diagonal, if any.
    pub jitter: f64,
}

impl CholeskyFactor {
    /// Factorizes `m`, retrying once with a diagonal jitter of
    /// `1e-8 * mean(diag)` on failure.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let dim = m.nrows();
        if dim == 0 || m.ncols() != dim {
            return Err(Error::Factorization { dim });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Factorization { dim });
        }
        if let Some(chol) = Cholesky::new(m.clone()) {
            return Ok(Self { chol, jitter: 0.0 });
        }
        let scale = m.diagonal().iter().map(|v| v.abs()).sum::<f64>() / dim as f64;
        let jitter = RETRY_JITTER * scale.max(f64::MIN_POSITIVE);
        let mut m = m;
        for i in 0..dim {
            m[(i, i)] += jitter;
        }
        Cholesky::new(m)
            .map(|chol| Self { chol, jitter })
            .ok_or(Error::Factorization { dim })
    }

    /// Factorizes a latent-field covariance; when the nugget is zero a
    /// jitter of `1e-12 * sigma2` is added to the diagonal first.
    pub fn for_covariance(spec: &CovarianceSpec, mut m: DMatrix<f64>) -> Result<Self> {
        if spec.total_variance() == 0.0 {
            return Err(Error::Degenerate("covariance with sigma2 = 0 and tau = 0 is singular".into()));
        }
        let mut pre = 0.0;
        if spec.tau() == 0.0 {
            pre = ZERO_NUGGET_JITTER * spec.sigma2();
            for i in 0..m.nrows() {
                m[(i, i)] += pre;
            }
        }
        let mut f = Self::new(m)?;
        f.jitter += pre;
        Ok(f)
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `v' M^{-1} v` via one triangular solve.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        let y = self
            .chol
            .l_dirty()
            .solve_lower_triangular(v)
            .expect("Cholesky factor has a non-zero diagonal");
        y.norm_squared()
    }

    /// `L z`, mapping iid standard normals to the factorized covariance.
    pub fn correlate(&self, z: &DVector<f64>) -> DVector<f64> {
        self.chol.l() * z
    }
}

/// Inverse of a symmetric matrix through an LU decomposition, with a crude
/// condition number estimate for error reporting.
pub fn invert_symmetric(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let condition = condition_estimate(m);
    match m.clone().try_inverse() {
        Some(inv) if inv.iter().all(|v| v.is_finite()) && condition < 1e15 => Ok(symmetrize(&inv)),
        _ => Err(Error::Singular {
            context: context.to_string(),
            condition,
        }),
    }
}

/// Ratio of extreme singular values.
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}
