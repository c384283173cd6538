//! Numerical kernel: dense matrices, log-domain weight arithmetic, scalar
//! solvers and the seeded random stream.

mod matrix;
mod rng;

pub use matrix::{clip_negative_eigen, default_jitter, factor_spd, solve_tridiagonal, symmetric_eigen, Matrix};
pub use rng::{derive_seed, RandomStream};

use crate::error::{Error, Result};

/// `log Σ exp(v_i)` with max-shift. All `-inf` input gives `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Normalized weights `exp(l_j - lse(l))`.
pub fn normalized_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(log_weights);
    if !lse.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    Ok(log_weights.iter().map(|l| (l - lse).exp()).collect())
}

/// Weighted mean and weighted central second moment of the rows of
/// `points`, with weights given in the log domain.
pub fn weighted_moments(points: &Matrix, log_weights: &[f64]) -> Result<(Vec<f64>, Matrix)> {
    let j = points.rows();
    if j == 0 {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    if log_weights.len() != j {
        return Err(Error::Dimension(format!(
            "{} log-weights for {j} points",
            log_weights.len()
        )));
    }
    let w = normalized_weights(log_weights)?;
    Ok(moments_with_weights(points, &w))
}

/// Same as [`weighted_moments`] but with already normalized weights.
pub(crate) fn moments_with_weights(points: &Matrix, w: &[f64]) -> (Vec<f64>, Matrix) {
    let d = points.cols();
    let mut mean = vec![0.0; d];
    for (row, &wj) in points.row_iter().zip(w) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += wj * x;
        }
    }
    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for (row, &wj) in points.row_iter().zip(w) {
        if wj == 0.0 {
            continue;
        }
        for ((c, x), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = x - m;
        }
        for a in 0..d {
            let ca = wj * centered[a];
            let dst = &mut cov.row_mut(a)[..=a];
            for (b, v) in dst.iter_mut().enumerate() {
                *v += ca * centered[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[(b, a)] = cov[(a, b)];
        }
    }
    (mean, cov)
}

/// Bisection root finder. Stops when `|f(x)| <= tol` or the bracket is
/// narrower than `tol`, after at most 200 halvings.
pub fn solve_scalar_root<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    let (mut lo, mut hi) = (lo, hi);
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo * fhi > 0.0 || flo.is_nan() || fhi.is_nan() {
        return Err(Error::BracketInvalid { lo, hi });
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm.abs() <= tol || (hi - lo).abs() <= tol {
            return Ok(mid);
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(mid)
}

/// Golden-section search on `[lo, hi]`, at most 100 iterations. The result
/// is compared against both end points; ties go to the upper bound.
pub fn minimize_scalar_bounded<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    if lo > hi || lo.is_nan() || hi.is_nan() {
        return Err(Error::InvalidInterval { lo, hi });
    }
    if lo == hi {
        return Ok(hi);
    }
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..100 {
        if (b - a).abs() <= tol {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let inner = 0.5 * (a + b);
    let mut best = hi;
    let mut fbest = f(hi);
    let finner = f(inner);
    if finner < fbest {
        best = inner;
        fbest = finner;
    }
    if f(lo) < fbest {
        best = lo;
    }
    Ok(best)
}

/// Least-squares slope of the points `(k, values[k])`, `k = 0..n`.
pub fn ls_slope(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    let kbar = (n as f64 - 1.0) / 2.0;
    let vbar = values.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (k, v) in values.iter().enumerate() {
        let dk = k as f64 - kbar;
        sxy += dk * (v - vbar);
        sxx += dk * dk;
    }
    Ok(sxy / sxx)
}
