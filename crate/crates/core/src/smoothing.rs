//! Smoothed failure indicator, coefficient of variation and the adaptive
//! smoothing-parameter update.

use crate::densities::std_normal_logpdf;
use crate::numkit::minimize_scalar_bounded;

/// `I(g, s) = (1 - s g / sqrt(s^2 g^2 + 1)) / 2`.
pub fn smooth_indicator(g: f64, s: f64) -> f64 {
    log_smooth_indicator(g, s).exp()
}

/// `log I(g, s)`, computed without cancellation for large `s * g > 0`.
pub fn log_smooth_indicator(g: f64, s: f64) -> f64 {
    let t = s * g;
    let root = (t * t + 1.0).sqrt();
    if t > 0.0 {
        // 1 - t/root = 1 / (root (root + t))
        -std::f64::consts::LN_2 - root.ln() - (root + t).ln()
    } else {
        (0.5 * (1.0 - t / root)).ln()
    }
}

/// Log of the smoothed target `I(G(x), s) pi(x)`, i.e. minus the energy.
pub fn log_target(g: f64, x: &[f64], s: f64) -> f64 {
    log_smooth_indicator(g, s) + std_normal_logpdf(x)
}

/// Population standard deviation over mean. A zero mean (no usable
/// mass) gives `+inf`.
pub fn empirical_cv(weights: &[f64]) -> f64 {
    let n = weights.len();
    if n == 0 {
        return f64::INFINITY;
    }
    let mean = weights.iter().sum::<f64>() / n as f64;
    if !(mean > 0.0) || !mean.is_finite() {
        return f64::INFINITY;
    }
    let var = weights.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / n as f64;
    var.sqrt() / mean
}

/// Empirical estimate of the squared chi-square-type distance between
/// consecutive smoothed targets.
pub fn delta_distance_sq(q: &[f64]) -> f64 {
    let cv = empirical_cv(q);
    cv * cv
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingState {
    pub s: f64,
    pub lip_s: f64,
    pub delta_target: f64,
}

impl SmoothingState {
    pub fn new(lip_s: f64, delta_target: f64) -> Self {
        Self {
            s: 0.0,
            lip_s,
            delta_target,
        }
    }
}

/// Coefficient of variation of `q_j = I(g_j, s_new) / I(g_j, s_old)`.
pub fn ratio_cv(g_values: &[f64], s_old: f64, s_new: f64) -> f64 {
    let logs: Vec<f64> = g_values
        .iter()
        .map(|&g| log_smooth_indicator(g, s_new) - log_smooth_indicator(g, s_old))
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let q: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    empirical_cv(&q)
}

/// Next smoothing parameter: minimizer of `(cv(q) - delta_target)^2` over
/// `[s, s + lip_s * h]`, using only cached limit-state values.
pub fn update_smoothing(g_values: &[f64], state: &SmoothingState, h: f64) -> f64 {
    let lo = state.s;
    let hi = state.s + state.lip_s * h;
    let objective = |s: f64| {
        let cv = ratio_cv(g_values, lo, s);
        if cv.is_finite() {
            (cv - state.delta_target).powi(2)
        } else {
            f64::MAX
        }
    };
    minimize_scalar_bounded(objective, lo, hi, 1e-6).unwrap_or(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn indicator_examples() {
        for s in [0.0, 0.5, 3.0, 1e6] {
            assert_eq!(smooth_indicator(0.0, s), 0.5);
        }
        for g in [-4.0, 0.0, 2.5] {
            assert_eq!(smooth_indicator(g, 0.0), 0.5);
        }
        let expected = 0.5 * (1.0 - 1.0 / 2f64.sqrt());
        assert!((smooth_indicator(1.0, 1.0) - expected).abs() < 1e-15);
        assert!((expected - 0.146_446_609_406_726_24).abs() < 1e-15);
    }

    #[test]
    fn indicator_sharpens_to_step() {
        assert!(smooth_indicator(-0.1, 1e6) > 1.0 - 1e-9);
        assert!(smooth_indicator(0.1, 1e6) < 1e-9);
        // no underflow to zero for large positive s*g
        assert!(log_smooth_indicator(1e3, 1e6).is_finite());
    }

    #[test]
    fn log_target_examples() {
        let x = [0.3, -1.2];
        let half = 0.5f64.ln();
        assert!((log_target(2.0, &x, 0.0) - (half + std_normal_logpdf(&x))).abs() < 1e-15);
        assert!((log_target(0.0, &x, 7.0) - (half + std_normal_logpdf(&x))).abs() < 1e-15);
        assert!((log_target(1.0, &[0.0], 1.0) + 2.840_032_891_064_133).abs() < 1e-12);
    }

    #[test]
    fn cv_examples() {
        assert_eq!(empirical_cv(&[2.0; 5]), 0.0);
        let mut one_hot = vec![0.0; 6];
        one_hot[2] = 3.0;
        assert!((empirical_cv(&one_hot) - 5f64.sqrt()).abs() < 1e-14);
        assert_eq!(empirical_cv(&[0.0; 4]), f64::INFINITY);
    }

    #[test]
    fn delta_distance_examples() {
        assert!(delta_distance_sq(&[0.7; 3]) < 1e-30);
        assert!((delta_distance_sq(&[1.0, 3.0]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn update_flat_objective_takes_upper_bound() {
        let st = SmoothingState {
            s: 0.4,
            lip_s: 2.0,
            delta_target: 1.0,
        };
        assert_eq!(update_smoothing(&[0.7; 10], &st, 0.25), 0.4 + 2.0 * 0.25);
    }

    #[test]
    fn update_matches_grid_scan() {
        let g = [-1.0, -0.5, 0.5, 1.0];
        let st = SmoothingState {
            s: 0.0,
            lip_s: 1.0,
            delta_target: 1.0,
        };
        let h = 10.0;
        let objective = |s: f64| (ratio_cv(&g, 0.0, s) - 1.0).powi(2);
        let n = 1_000_000;
        let (mut best_s, mut best_f) = (0.0, f64::INFINITY);
        for i in 0..=n {
            let s = h * i as f64 / n as f64;
            let f = objective(s);
            if f <= best_f {
                best_f = f;
                best_s = s;
            }
        }
        let s = update_smoothing(&g, &st, h);
        assert!((objective(s) - best_f).abs() < 1e-3);
        assert!((s - best_s).abs() < 1e-3, "golden {s} grid {best_s}");
    }

    proptest! {
        #[test]
        fn indicator_symmetry(g in -50.0f64..50.0, s in 0.0f64..100.0) {
            prop_assert!((smooth_indicator(g, s) + smooth_indicator(-g, s) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn indicator_monotone_in_s(g in -5.0f64..5.0, s in 0.0f64..20.0, ds in 0.0f64..5.0) {
            let (a, b) = (smooth_indicator(g, s), smooth_indicator(g, s + ds));
            if g < 0.0 { prop_assert!(b >= a - 1e-15); }
            if g > 0.0 { prop_assert!(b <= a + 1e-15); }
        }

        #[test]
        fn cv_scale_invariance(w in prop::collection::vec(0.0f64..10.0, 2..40), c in 1e-3f64..1e3) {
            let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
            let (a, b) = (empirical_cv(&w), empirical_cv(&scaled));
            if a.is_finite() {
                prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
            } else {
                prop_assert!(b.is_infinite());
            }
        }

        #[test]
        fn update_stays_in_domain(
            g in prop::collection::vec(-3.0f64..6.0, 2..30),
            s in 0.0f64..5.0, h in 1e-3f64..3.0, delta in 0.1f64..4.0,
        ) {
            let st = SmoothingState { s, lip_s: 1.0, delta_target: delta };
            let next = update_smoothing(&g, &st, h);
            prop_assert!(next >= s && next <= s + h + 1e-12);
        }
    }
}
