//! Consensus-based sampling particle dynamics.
//!
//! Weights are `exp(beta * l_j)` where `l_j = log I(G(x_j), s) + log pi(x_j)`
//! is the log of the smoothed failure target. All weight arithmetic runs in
//! the log domain; in 50 dimensions the prior alone spans hundreds of nats.

use std::io::Write;

use crate::error::{Error, Result};
use crate::numkit::{default_jitter, factor_spd, log_sum_exp, weighted_moments, Matrix, RandomStream};
use crate::smoothing::log_target;

pub const BETA_CAP: f64 = 1e8;

/// Particles with their cached limit-state values.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    points: Matrix,
    g_values: Vec<f64>,
}

impl Ensemble {
    /// Evaluates `lsf` once per row of `points`.
    pub fn evaluate<F: Fn(&[f64]) -> f64>(points: Matrix, lsf: &F) -> Self {
        let g_values = points.row_iter().map(lsf).collect();
        Self { points, g_values }
    }

    pub fn from_parts(points: Matrix, g_values: Vec<f64>) -> Result<Self> {
        if points.rows() != g_values.len() {
            return Err(Error::Dimension(format!(
                "{} points but {} limit-state values",
                points.rows(),
                g_values.len()
            )));
        }
        Ok(Self { points, g_values })
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn g_values(&self) -> &[f64] {
        &self.g_values
    }

    pub fn size(&self) -> usize {
        self.points.rows()
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn into_points(self) -> Matrix {
        self.points
    }

    /// Log smoothed-target values `l_j` at smoothing `s`.
    pub fn log_targets(&self, s: f64) -> Vec<f64> {
        self.points
            .row_iter()
            .zip(&self.g_values)
            .map(|(x, &g)| log_target(g, x, s))
            .collect()
    }

    /// CSV with one row per particle: coordinates, then the limit-state value.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<String> = (1..=self.dim())
            .map(|i| format!("x{i}"))
            .chain(std::iter::once("g".to_string()))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (row, g) in self.points.row_iter().zip(&self.g_values) {
            let cells: Vec<String> = row.iter().chain(std::iter::once(g)).map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Weighted mean `m_beta`, scaled weighted covariance `c_beta^2` and its
/// lower Cholesky factor.
#[derive(Debug, Clone)]
pub struct CbsCoefficients {
    pub m_beta: Vec<f64>,
    pub c_beta_sq: Matrix,
    pub c_beta_factor: Matrix,
}

/// Coefficients from arbitrary log-target values (`-f(x_j)`).
pub fn coefficients_from_log_targets(points: &Matrix, log_targets: &[f64], beta: f64) -> Result<CbsCoefficients> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "inverse temperature must be >= 0, got {beta}"
        )));
    }
    let lw: Vec<f64> = log_targets.iter().map(|l| beta * l).collect();
    let (m_beta, mut c_beta_sq) = weighted_moments(points, &lw)?;
    c_beta_sq.scale(1.0 + beta);
    let c_beta_factor = factor_spd(&c_beta_sq, default_jitter(&c_beta_sq))?;
    Ok(CbsCoefficients {
        m_beta,
        c_beta_sq,
        c_beta_factor,
    })
}

pub fn ensemble_coefficients(ens: &Ensemble, s: f64, beta: f64) -> Result<CbsCoefficients> {
    coefficients_from_log_targets(&ens.points, &ens.log_targets(s), beta)
}

/// One exponential Euler-Maruyama particle update with frozen coefficients:
/// `x' = a x + (1 - a) m + sqrt(1 - a^2) L xi`, `a = exp(-h)`.
pub fn cbs_update(points: &Matrix, coeffs: &CbsCoefficients, h: f64, stream: &mut RandomStream) -> Result<Matrix> {
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("step size must be positive, got {h}")));
    }
    let alpha = (-h).exp();
    let drift = -(-h).exp_m1();
    let noise = (-(-2.0 * h).exp_m1()).sqrt();
    let d = points.cols();
    let mut out = Matrix::zeros(points.rows(), d);
    let mut xi = vec![0.0; d];
    let mut lxi = vec![0.0; d];
    for (i, x) in points.row_iter().enumerate() {
        stream.fill_standard_normal(&mut xi);
        coeffs.c_beta_factor.lower_mul_vec(&xi, &mut lxi);
        for (k, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = alpha * x[k] + drift * coeffs.m_beta[k] + noise * lxi[k];
        }
    }
    Ok(out)
}

/// Particle step for the smoothed failure target; refreshes the cached
/// limit-state values (one evaluation per particle).
pub fn cbs_step<F: Fn(&[f64]) -> f64>(
    ens: &Ensemble,
    s: f64,
    beta: f64,
    h: f64,
    stream: &mut RandomStream,
    lsf: &F,
) -> Result<Ensemble> {
    let coeffs = ensemble_coefficients(ens, s, beta)?;
    let points = cbs_update(&ens.points, &coeffs, h, stream)?;
    Ok(Ensemble::evaluate(points, lsf))
}

/// `ESS(beta) = exp(2 lse(beta l) - lse(2 beta l))`.
pub fn ess_from_log_targets(log_targets: &[f64], beta: f64) -> f64 {
    if beta == 0.0 {
        return log_targets.len() as f64;
    }
    let a: Vec<f64> = log_targets.iter().map(|l| beta * l).collect();
    let b: Vec<f64> = log_targets.iter().map(|l| 2.0 * beta * l).collect();
    (2.0 * log_sum_exp(&a) - log_sum_exp(&b)).exp()
}

pub fn ess(ens: &Ensemble, s: f64, beta: f64) -> f64 {
    ess_from_log_targets(&ens.log_targets(s), beta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSolution {
    pub beta: f64,
    /// `ESS(cap)` still exceeded the target; `beta` is the cap.
    pub capped: bool,
}

/// Solves `ESS(beta) = target` by bisection. The upper end of the bracket
/// starts at 1 and doubles until the ESS drops below the target or `cap`
/// is reached.
pub fn solve_beta_from_log_targets(log_targets: &[f64], target: f64, cap: f64) -> Result<BetaSolution> {
    let j = log_targets.len() as f64;
    if !(target > 1.0 && target < j) {
        return Err(Error::InvalidInput(format!(
            "ESS target must lie in (1, {j}), got {target}"
        )));
    }
    let ess = |b: f64| ess_from_log_targets(log_targets, b);
    let mut lo = 0.0;
    let mut hi = 1.0f64.min(cap);
    loop {
        let e = ess(hi);
        if e < target {
            break;
        }
        if hi >= cap {
            return Ok(BetaSolution {
                beta: cap,
                capped: true,
            });
        }
        lo = hi;
        hi = (2.0 * hi).min(cap);
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        let e = ess(mid);
        if (e - target).abs() <= 0.01 {
            return Ok(BetaSolution {
                beta: mid,
                capped: false,
            });
        }
        if e > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-10 * hi {
            break;
        }
    }
    Ok(BetaSolution {
        beta: 0.5 * (lo + hi),
        capped: false,
    })
}

pub fn solve_beta(ens: &Ensemble, s: f64, target: f64) -> Result<BetaSolution> {
    solve_beta_from_log_targets(&ens.log_targets(s), target, BETA_CAP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::GaussianModel;
    use proptest::prelude::*;

    fn ens_1d(xs: &[f64]) -> Ensemble {
        let rows: Vec<[f64; 1]> = xs.iter().map(|&x| [x]).collect();
        Ensemble::evaluate(Matrix::from_rows(&rows).unwrap(), &|_| 1.0)
    }

    #[test]
    fn coefficients_beta_zero_is_sample_moments() {
        let p = Matrix::from_rows(&[[0.0, 1.0], [2.0, 1.0], [1.0, 4.0]]).unwrap();
        let ens = Ensemble::evaluate(p.clone(), &|x: &[f64]| x[0] - x[1]);
        let c = ensemble_coefficients(&ens, 3.0, 0.0).unwrap();
        let (m, cov) = weighted_moments(&p, &[0.0; 3]).unwrap();
        assert_eq!(c.m_beta, m);
        assert!(c.c_beta_sq.max_abs_diff(&cov) < 1e-15);
    }

    #[test]
    fn coefficients_equal_energy() {
        let p = Matrix::from_rows(&[[0.0], [2.0]]).unwrap();
        let c = coefficients_from_log_targets(&p, &[-0.3, -0.3], 1.0).unwrap();
        assert_eq!(c.m_beta, vec![1.0]);
        assert!((c.c_beta_sq[(0, 0)] - 2.0).abs() < 1e-15);
        let c = coefficients_from_log_targets(&p, &[5.0, 5.0], 4.0).unwrap();
        assert!((c.c_beta_sq[(0, 0)] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn small_step_barely_moves() {
        let p = GaussianModel::standard(2).sample(&mut RandomStream::new(1), 50);
        let ens = Ensemble::evaluate(p.clone(), &|x: &[f64]| 3.0 - x[0]);
        let c = ensemble_coefficients(&ens, 1.0, 0.5).unwrap();
        let moved = cbs_update(&p, &c, 1e-12, &mut RandomStream::new(2)).unwrap();
        assert!(moved.max_abs_diff(&p) < 1e-5);
    }

    #[test]
    fn large_step_forgets_positions() {
        let p = GaussianModel::standard(2).sample(&mut RandomStream::new(1), 50);
        let mut q = p.clone();
        q.scale(100.0);
        let c = coefficients_from_log_targets(&p, &[0.0; 50], 0.0).unwrap();
        let a = cbs_update(&p, &c, 800.0, &mut RandomStream::new(2)).unwrap();
        let b = cbs_update(&q, &c, 800.0, &mut RandomStream::new(2)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn update_mean_matches_affine_map() {
        let n = 100_000;
        let p = GaussianModel::standard(1).sample(&mut RandomStream::new(4), n);
        let coeffs = CbsCoefficients {
            m_beta: vec![2.0],
            c_beta_sq: Matrix::from_diag(&[0.25]),
            c_beta_factor: Matrix::from_diag(&[0.5]),
        };
        let h = 0.7;
        let out = cbs_update(&p, &coeffs, h, &mut RandomStream::new(5)).unwrap();
        let mean_in = p.as_slice().iter().sum::<f64>() / n as f64;
        let mean_out = out.as_slice().iter().sum::<f64>() / n as f64;
        let alpha = (-h).exp();
        let expected = alpha * mean_in + (1.0 - alpha) * 2.0;
        // the noise term has variance (1 - a^2) * 0.25 per particle
        let se = ((1.0 - alpha * alpha) * 0.25 / n as f64).sqrt();
        assert!((mean_out - expected).abs() < 3.0 * se, "{mean_out} vs {expected}");
    }

    #[test]
    fn step_keeps_cache_coherent() {
        let lsf = |x: &[f64]| 3.5 - (x[0] + x[1]) / 2f64.sqrt();
        let p = GaussianModel::standard(2).sample(&mut RandomStream::new(8), 200);
        let ens = Ensemble::evaluate(p, &lsf);
        let next = cbs_step(&ens, 0.5, 1.0, 0.3, &mut RandomStream::new(9), &lsf).unwrap();
        for j in [0, 17, 55, 120, 199] {
            assert_eq!(next.g_values()[j], lsf(next.points().row(j)));
        }
    }

    #[test]
    fn ess_examples() {
        let l = [0.0, 0.0, 0.0, 10f64.ln()];
        assert_eq!(ess_from_log_targets(&l, 0.0), 4.0);
        assert!((ess_from_log_targets(&[1.3; 7], 5.0) - 7.0).abs() < 1e-12);
        assert!((ess_from_log_targets(&l, 1.0) - 169.0 / 103.0).abs() < 1e-12);
        let ens = ens_1d(&[0.0, 1.0, 2.0]);
        assert_eq!(ess(&ens, 1.0, 0.0), 3.0);
    }

    #[test]
    fn beta_examples() {
        let flat = solve_beta_from_log_targets(&[-2.0; 10], 5.0, BETA_CAP).unwrap();
        assert!(flat.capped);
        assert_eq!(flat.beta, BETA_CAP);
        let l = [0.0, 0.0, 0.0, 10f64.ln()];
        let sol = solve_beta_from_log_targets(&l, 2.0, BETA_CAP).unwrap();
        let exact = (3.0 + 2.0 * 3f64.sqrt()).log10();
        assert!(!sol.capped);
        assert!((ess_from_log_targets(&l, sol.beta) - 2.0).abs() <= 0.01);
        assert!((sol.beta - exact).abs() < 0.01, "beta {} exact {exact}", sol.beta);
        assert!(solve_beta_from_log_targets(&l, 4.0, BETA_CAP).is_err());
    }

    #[test]
    fn laplace_principle() {
        let p = Matrix::from_rows(&[[0.0, 0.0], [1.0, 2.0], [-1.0, 0.5], [3.0, -1.0]]).unwrap();
        let l = [-1.0, -0.2, -0.7, -3.0];
        let c = coefficients_from_log_targets(&p, &l, 500.0).unwrap();
        assert!((c.m_beta[0] - 1.0).abs() < 1e-12 && (c.m_beta[1] - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ess_non_increasing(l in prop::collection::vec(-20.0f64..5.0, 2..40), b1 in 0.0f64..5.0, db in 0.0f64..5.0) {
            let (e1, e2) = (ess_from_log_targets(&l, b1), ess_from_log_targets(&l, b1 + db));
            prop_assert!(e2 <= e1 * (1.0 + 1e-12));
            prop_assert!(e2 >= 1.0 - 1e-9 && e1 <= l.len() as f64 + 1e-9);
        }

        #[test]
        fn beta_solve_self_consistent(l in prop::collection::vec(-30.0f64..0.0, 4..200)) {
            let target = l.len() as f64 / 2.0;
            let spread = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - l.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-3);
            let sol = solve_beta_from_log_targets(&l, target, BETA_CAP).unwrap();
            prop_assert!(!sol.capped);
            prop_assert!((ess_from_log_targets(&l, sol.beta) - target).abs() <= 0.01);
        }

        #[test]
        fn weighted_mean_in_bounding_box(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 2..20),
            l in prop::collection::vec(-10.0f64..0.0, 20),
            beta in 0.0f64..50.0,
        ) {
            let p = Matrix::from_rows(&rows).unwrap();
            let c = coefficients_from_log_targets(&p, &l[..rows.len()], beta).unwrap();
            for k in 0..2 {
                let lo = rows.iter().map(|r| r[k]).fold(f64::INFINITY, f64::min);
                let hi = rows.iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(c.m_beta[k] >= lo - 1e-12 && c.m_beta[k] <= hi + 1e-12);
            }
            prop_assert!(c.c_beta_factor.gram().max_abs_diff(&crate::numkit::clip_negative_eigen(&c.c_beta_sq).unwrap()) <= 1e-8 * (1.0 + c.c_beta_sq.max_abs()));
        }
    }
}
