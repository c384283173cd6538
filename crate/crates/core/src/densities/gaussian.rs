use crate::error::{Error, Result};
use crate::numkit::{factor_spd, weighted_moments, Matrix, RandomStream};

use super::LN_2PI;

/// Multivariate normal with cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianModel {
    mean: Vec<f64>,
    /// Effective covariance, `L L^T`, after eigenvalue clipping and jitter.
    covariance: Matrix,
    factor: Matrix,
    log_det: f64,
}

impl GaussianModel {
    /// Builds the model from a mean and a symmetric covariance; negative
    /// eigen-directions are clipped and `jitter` is added to the diagonal.
    pub fn new(mean: Vec<f64>, covariance: &Matrix, jitter: f64) -> Result<Self> {
        if covariance.rows() != mean.len() || !covariance.is_square() {
            return Err(Error::Dimension(format!(
                "mean of length {} with {}x{} covariance",
                mean.len(),
                covariance.rows(),
                covariance.cols()
            )));
        }
        let factor = factor_spd(covariance, jitter)?;
        let diag = factor.diag();
        if diag.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Factorization(
                "covariance is singular after clipping and jitter".into(),
            ));
        }
        let log_det = 2.0 * diag.iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            mean,
            covariance: factor.gram(),
            factor,
            log_det,
        })
    }

    pub fn standard(d: usize) -> Self {
        Self::new(vec![0.0; d], &Matrix::identity(d), 0.0).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &Matrix {
        &self.covariance
    }

    pub fn factor(&self) -> &Matrix {
        &self.factor
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        let mut z: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        self.factor.forward_substitute(&mut z);
        let q: f64 = z.iter().map(|v| v * v).sum();
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + q)
    }

    /// `n` draws as rows of an `n x d` matrix.
    pub fn sample(&self, stream: &mut RandomStream, n: usize) -> Matrix {
        let d = self.dim();
        let mut out = Matrix::zeros(n, d);
        let mut xi = vec![0.0; d];
        let mut lx = vec![0.0; d];
        for i in 0..n {
            stream.fill_standard_normal(&mut xi);
            self.factor.lower_mul_vec(&xi, &mut lx);
            for ((o, m), v) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&lx) {
                *o = m + v;
            }
        }
        out
    }
}

/// Fits mean and population (divisor `J`) covariance to the rows of `sample`.
pub fn gaussian_fit(sample: &Matrix, jitter: f64) -> Result<GaussianModel> {
    let j = sample.rows();
    if j < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: j });
    }
    let (mean, cov) = weighted_moments(sample, &vec![0.0; j])?;
    GaussianModel::new(mean, &cov, jitter)
}
