//! `log I_nu(x)` for the vMF normalizer.
//!
//! Power series (summed in the log domain) below `x = 50`; above it the
//! Hankel expansion for `nu < 1` and the Debye uniform expansion otherwise.

use std::sync::OnceLock;

use statrs::function::gamma::ln_gamma;

use crate::numkit::log_sum_exp;

const SWITCH: f64 = 50.0;
const DEBYE_TERMS: usize = 10;

pub fn log_bessel_i(nu: f64, x: f64) -> f64 {
    debug_assert!(nu >= 0.0);
    if x <= 0.0 {
        return if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if x < SWITCH {
        log_bessel_series(nu, x)
    } else if nu < 1.0 {
        log_bessel_hankel(nu, x)
    } else {
        log_bessel_debye(nu, x)
    }
}

pub(crate) fn log_bessel_series(nu: f64, x: f64) -> f64 {
    let lhalf = (0.5 * x).ln();
    let mut terms = Vec::with_capacity(64);
    let mut best = f64::NEG_INFINITY;
    for k in 0.. {
        let kf = k as f64;
        let t = 2.0 * kf * lhalf - ln_gamma(kf + 1.0) - ln_gamma(kf + nu + 1.0);
        terms.push(t);
        best = best.max(t);
        // terms are unimodal in k; stop once far past the peak
        if t < best - 40.0 && kf > 0.5 * x {
            break;
        }
        if k > 100_000 {
            break;
        }
    }
    nu * lhalf + log_sum_exp(&terms)
}

fn log_bessel_hankel(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut sum = 1.0;
    let mut term: f64 = 1.0;
    for k in 1..60 {
        let kf = k as f64;
        let odd = 2.0 * kf - 1.0;
        let next = -term * (mu - odd * odd) / (8.0 * x * kf);
        if next.abs() >= term.abs() && k > 2 {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    x - 0.5 * (2.0 * std::f64::consts::PI * x).ln() + sum.ln()
}

/// Coefficients (in powers of t) of the Debye polynomials u_0..u_K.
fn debye_polynomials() -> &'static Vec<Vec<f64>> {
    static POLYS: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    POLYS.get_or_init(|| {
        let mut polys = vec![vec![1.0]];
        for k in 0..DEBYE_TERMS {
            let u = &polys[k];
            let deg = u.len() + 3;
            let mut next = vec![0.0; deg + 1];
            // 0.5 t^2 (1 - t^2) u'(t)
            for (p, &c) in u.iter().enumerate().skip(1) {
                let dc = c * p as f64;
                next[p + 1] += 0.5 * dc;
                next[p + 3] -= 0.5 * dc;
            }
            // 1/8 * int_0^t (1 - 5 s^2) u(s) ds
            for (p, &c) in u.iter().enumerate() {
                next[p + 1] += c / (8.0 * (p as f64 + 1.0));
                next[p + 3] -= 5.0 * c / (8.0 * (p as f64 + 3.0));
            }
            while next.last() == Some(&0.0) {
                next.pop();
            }
            polys.push(next);
        }
        polys
    })
}

fn log_bessel_debye(nu: f64, x: f64) -> f64 {
    let s = (nu * nu + x * x).sqrt();
    let t = nu / s;
    let mut series = 0.0;
    let mut nu_pow = 1.0;
    for poly in debye_polynomials() {
        let mut val = 0.0;
        for &c in poly.iter().rev() {
            val = val * t + c;
        }
        series += val / nu_pow;
        nu_pow *= nu;
    }
    s + nu * (x / (nu + s)).ln() - 0.5 * (2.0 * std::f64::consts::PI * s).ln() + series.ln()
}
