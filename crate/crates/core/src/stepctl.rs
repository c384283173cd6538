//! Step-size control for the particle step through a moment ODE proxy.
//!
//! The ensemble mean `E` and covariance `C` follow
//! `dE/dt = -E + m_beta`, `dC/dt = -2C + 2 c_beta^2`. The particle update
//! reproduces the exponential Euler method on this system, so every two
//! consecutive steps of equal size form an "exponential two-step Euler"
//! step of size `2h`, which is compared against the exponential midpoint
//! rule built from the same stages. The linear part is the fixed diagonal
//! `A = diag(1, .., 1, 2, .., 2)`, so all matrix functions are scalar.

use serde::{Deserialize, Serialize};

use crate::cbs::{cbs_step, ensemble_coefficients, CbsCoefficients, Ensemble};
use crate::error::{Error, Result};
use crate::numkit::{weighted_moments, RandomStream};

/// `(mean, row-major covariance)` stacked into one vector of length `d + d^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentVector {
    dim: usize,
    theta: Vec<f64>,
}

impl MomentVector {
    pub fn new(dim: usize, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != dim + dim * dim {
            return Err(Error::Dimension(format!(
                "moment vector for d={dim} needs {} entries, got {}",
                dim + dim * dim,
                theta.len()
            )));
        }
        Ok(Self { dim, theta })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn mean(&self) -> &[f64] {
        &self.theta[..self.dim]
    }

    pub fn covariance(&self) -> &[f64] {
        &self.theta[self.dim..]
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

/// Diagonal of the linear part `A`: 1 on the mean block, 2 on the covariance block.
pub fn decay_rates(dim: usize) -> Vec<f64> {
    let mut a = vec![1.0; dim];
    a.extend(std::iter::repeat_n(2.0, dim * dim));
    a
}

/// Sample mean and population covariance of the ensemble.
pub fn moments_of_ensemble(ens: &Ensemble) -> Result<MomentVector> {
    let j = ens.size();
    if j < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: j });
    }
    let (mean, cov) = weighted_moments(ens.points(), &vec![0.0; j])?;
    let mut theta = mean;
    theta.extend_from_slice(cov.as_slice());
    MomentVector::new(ens.dim(), theta)
}

/// Full right-hand side `(-E + m_beta, vec(-2C + 2 c_beta^2))`.
pub fn rhs_from_coefficients(theta: &MomentVector, coeffs: &CbsCoefficients) -> MomentVector {
    let d = theta.dim();
    let mut out = Vec::with_capacity(theta.len());
    out.extend(theta.mean().iter().zip(&coeffs.m_beta).map(|(e, m)| -e + m));
    out.extend(
        theta
            .covariance()
            .iter()
            .zip(coeffs.c_beta_sq.as_slice())
            .map(|(c, cb)| -2.0 * c + 2.0 * cb),
    );
    MomentVector { dim: d, theta: out }
}

pub fn moments_rhs(ens: &Ensemble, s: f64, beta: f64) -> Result<MomentVector> {
    let theta = moments_of_ensemble(ens)?;
    let coeffs = ensemble_coefficients(ens, s, beta)?;
    Ok(rhs_from_coefficients(&theta, &coeffs))
}

/// Nonlinear part `g(theta) + A theta` of a full right-hand side.
pub fn forcing_from_rhs(theta: &MomentVector, rhs: &MomentVector) -> Vec<f64> {
    decay_rates(theta.dim())
        .iter()
        .zip(theta.as_slice().iter().zip(rhs.as_slice()))
        .map(|(a, (t, r))| r + a * t)
        .collect()
}

/// `phi(-z) = (1 - e^{-z}) / z`, continuously extended by 1 at 0.
pub fn phi_scalar(z: f64) -> f64 {
    if z.abs() < 1e-5 {
        1.0 - z / 2.0 + z * z / 6.0 - z * z * z / 24.0
    } else {
        -(-z).exp_m1() / z
    }
}

/// Weights `(b1, b2)` of the exponential midpoint rule at `-z`:
/// `b2 = 2 (e^{-z} - 1 + z) / z^2`, `b1 = phi(-z) - b2`.
pub fn bhat_coefficients(z: f64) -> (f64, f64) {
    let b2 = if z.abs() < 1e-3 {
        // 2 sum_{k>=2} (-z)^{k-2} / k!
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 3..12 {
            term *= -z / k as f64;
            sum += term;
        }
        sum
    } else {
        2.0 * ((-z).exp_m1() + z) / (z * z)
    };
    (phi_scalar(z) - b2, b2)
}

/// One exponential Euler step `e^{-hA} x + h phi(-hA) N`.
pub fn exp_euler_step(x: &[f64], forcing: &[f64], h: f64, rates: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(forcing)
        .zip(rates)
        .map(|((x, n), a)| (-h * a).exp() * x + h * phi_scalar(h * a) * n)
        .collect()
}

/// Exponential midpoint step of size `h` from stage forcings `g1` (at the
/// start) and `g2` (at the half step).
pub fn exp_midpoint_step(x: &[f64], g1: &[f64], g2: &[f64], h: f64, rates: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g1.iter().zip(g2))
        .zip(rates)
        .map(|((x, (a1, a2)), a)| {
            let (b1, b2) = bhat_coefficients(h * a);
            (-h * a).exp() * x + h * (b1 * a1 + b2 * a2)
        })
        .collect()
}

/// How the midpoint comparator is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComparatorForm {
    /// `e^{-2hA} theta_{n-2} + 2h (b1 N_{n-2} + b2 N_{n-1})`.
    #[default]
    Standard,
    /// `2h b1 theta_{n-1} + 2h b2 theta_n`, transcribed literally.
    Literal,
}

impl std::str::FromStr for ComparatorForm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "standard" => Ok(Self::Standard),
            "literal" => Ok(Self::Literal),
            other => Err(format!("unknown comparator form '{other}'")),
        }
    }
}

/// `|x|_Gamma = sqrt(sum x_i^2 / Gamma_ii)`.
pub fn weighted_norm(x: &[f64], gamma: &[f64]) -> f64 {
    x.iter().zip(gamma).map(|(v, g)| v * v / g).sum::<f64>().sqrt()
}

/// Inputs to the local error estimate over two equal steps.
#[derive(Debug, Clone, Copy)]
pub struct StepPair<'a> {
    pub theta_prev2: &'a [f64],
    pub theta_prev1: &'a [f64],
    pub theta_now: &'a [f64],
    /// Nonlinear parts of the right-hand side at `theta_prev2` and `theta_prev1`.
    pub forcing_prev2: &'a [f64],
    pub forcing_prev1: &'a [f64],
    pub h_first: f64,
    pub h_second: f64,
}

/// Weighted distance between the two-step exponential Euler result and
/// the exponential midpoint comparator on the doubled grid.
pub fn local_error(pair: &StepPair<'_>, rates: &[f64], eps_target: f64, form: ComparatorForm) -> Result<f64> {
    let h = pair.h_first;
    if (pair.h_first - pair.h_second).abs() > 1e-12 * h.abs().max(pair.h_second.abs()) {
        return Err(Error::InvalidInput(format!(
            "local error needs two equal steps, got {} and {}",
            pair.h_first, pair.h_second
        )));
    }
    let m = rates.len();
    let hh = 2.0 * h;
    let comparator: Vec<f64> = match form {
        ComparatorForm::Standard => {
            exp_midpoint_step(pair.theta_prev2, pair.forcing_prev2, pair.forcing_prev1, hh, rates)
        }
        ComparatorForm::Literal => rates
            .iter()
            .zip(pair.theta_prev1.iter().zip(pair.theta_now))
            .map(|(a, (t1, t2))| {
                let (b1, b2) = bhat_coefficients(hh * a);
                hh * b1 * t1 + hh * b2 * t2
            })
            .collect(),
    };
    let psi = pair.theta_now;
    let gamma: Vec<f64> = psi
        .iter()
        .zip(pair.theta_prev2)
        .map(|(p, q)| m as f64 * (eps_target + eps_target * p.abs().max(q.abs())))
        .collect();
    let diff: Vec<f64> = comparator.iter().zip(psi).map(|(c, p)| c - p).collect();
    Ok(weighted_norm(&diff, &gamma))
}

/// Factor limits applied to `h_new / h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepClamps {
    pub fac_min: f64,
    pub fac_max: f64,
}

impl Default for StepClamps {
    fn default() -> Self {
        Self {
            fac_min: 0.2,
            fac_max: 5.0,
        }
    }
}

/// `h' = h / sqrt(err)`, ratio optionally clamped. `err = 0` gives the
/// maximal ratio.
pub fn next_stepsize(err: f64, h: f64, clamps: Option<StepClamps>) -> f64 {
    let cap = clamps.unwrap_or_default().fac_max;
    let ratio = if err > 0.0 { err.sqrt().recip() } else { cap };
    match clamps {
        Some(c) => h * ratio.clamp(c.fac_min, c.fac_max),
        None => h * ratio,
    }
}

/// Error weights for the starting step: `Gamma_jj = m eps (1 + |theta0_j|)`.
pub fn starting_weights(theta0: &[f64], eps_target: f64) -> Vec<f64> {
    let m = theta0.len() as f64;
    theta0.iter().map(|t| m * (eps_target + eps_target * t.abs())).collect()
}

/// First guess `h0 = |theta0| / (100 |g(theta0)|)`; `1e-6` when the
/// right-hand side vanishes.
pub fn initial_probe_stepsize(theta0: &[f64], rhs0: &[f64], eps_target: f64) -> f64 {
    let gamma = starting_weights(theta0, eps_target);
    let n0 = weighted_norm(theta0, &gamma);
    let ng = weighted_norm(rhs0, &gamma);
    if ng < 1e-14 || !(n0 > 0.0) {
        1e-6
    } else {
        0.01 * n0 / ng
    }
}

/// `h1` from `h1^2 max(|g1 - g0| / h0, |g0|) = 1/100`, then
/// `max(100 h0, h1)`.
pub fn initial_stepsize_from_probe(theta0: &[f64], rhs0: &[f64], rhs1: &[f64], h0: f64, eps_target: f64) -> f64 {
    let gamma = starting_weights(theta0, eps_target);
    let ng = weighted_norm(rhs0, &gamma);
    let diff: Vec<f64> = rhs1.iter().zip(rhs0).map(|(a, b)| a - b).collect();
    let dg = weighted_norm(&diff, &gamma) / h0;
    let scale = dg.max(ng);
    let h1 = if scale <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / scale).sqrt()
    };
    (100.0 * h0).max(h1)
}

#[derive(Debug, Clone)]
pub struct InitialStep {
    pub h: f64,
    pub h_probe: f64,
    pub probe: Ensemble,
}

/// Starting step size. Takes one probe particle step (its limit-state
/// evaluations are real cost) to estimate the derivative of the moment
/// right-hand side.
pub fn initial_stepsize<F: Fn(&[f64]) -> f64>(
    ens0: &Ensemble,
    s: f64,
    beta: f64,
    eps_target: f64,
    stream: &mut RandomStream,
    lsf: &F,
) -> Result<InitialStep> {
    let theta0 = moments_of_ensemble(ens0)?;
    let rhs0 = moments_rhs(ens0, s, beta)?;
    let h0 = initial_probe_stepsize(theta0.as_slice(), rhs0.as_slice(), eps_target);
    let probe = cbs_step(ens0, s, beta, h0, stream, lsf)?;
    let rhs1 = moments_rhs(&probe, s, beta)?;
    let h = initial_stepsize_from_probe(theta0.as_slice(), rhs0.as_slice(), rhs1.as_slice(), h0, eps_target);
    Ok(InitialStep { h, h_probe: h0, probe })
}
