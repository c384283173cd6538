//! Benchmark limit-state functions in standard-normal space.
//!
//! Every evaluator is wrapped by [`ProblemSpec`], which counts calls with an
//! atomic counter. Benchmarks give each repetition its own counter through
//! [`ProblemSpec::with_fresh_counter`].

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numkit::{solve_scalar_root, solve_tridiagonal};

pub type LimitState = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    /// Closed form.
    Analytic,
    /// Published crude Monte Carlo value.
    PublishedMonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceValue {
    pub pf: f64,
    pub source: ReferenceSource,
}

/// A named limit-state function with an evaluation counter.
#[derive(Clone)]
pub struct ProblemSpec {
    name: String,
    dim: usize,
    lsf: LimitState,
    reference: Option<ReferenceValue>,
    counter: Arc<AtomicU64>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("reference", &self.reference)
            .field("evaluations", &self.evaluations())
            .finish()
    }
}

/// Wrap an evaluator with a zeroed counter.
pub fn counted(name: impl Into<String>, dim: usize, lsf: LimitState, reference: Option<ReferenceValue>) -> ProblemSpec {
    ProblemSpec {
        name: name.into(),
        dim,
        lsf,
        reference,
        counter: Arc::new(AtomicU64::new(0)),
    }
}

impl ProblemSpec {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn reference(&self) -> Option<ReferenceValue> {
        self.reference
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.counter.fetch_add(1, Ordering::Relaxed);
        (self.lsf)(x)
    }

    pub fn evaluations(&self) -> u64 {
        self.counter.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.counter.store(0, Ordering::Relaxed);
    }

    /// Same evaluator, independent counter.
    pub fn with_fresh_counter(&self) -> Self {
        Self {
            counter: Arc::new(AtomicU64::new(0)),
            ..self.clone()
        }
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn linear_lsf(x: &[f64], c: f64) -> f64 {
    c - x.iter().sum::<f64>() / (x.len() as f64).sqrt()
}

pub fn convex_lsf(x: &[f64]) -> f64 {
    let (a, b) = (x[0], x[1]);
    (a - b).powi(2) / 10.0 - (a + b) / std::f64::consts::SQRT_2 + 0.4
}

pub const OSCILLATOR_MEAN: [f64; 6] = [1.0, 1.0, 0.1, 0.5, 0.3, 1.0];
pub const OSCILLATOR_STD: [f64; 6] = [0.05, 0.1, 0.01, 0.05, 0.2, 0.2];

/// Physical parameters `(M, c1, c2, r, F1, t1)` for a standard-normal input.
pub fn oscillator_transform(u: &[f64]) -> [f64; 6] {
    std::array::from_fn(|i| OSCILLATOR_MEAN[i] + OSCILLATOR_STD[i] * u[i])
}

/// Returned for draws with non-positive mass or stiffness.
pub const OSCILLATOR_GUARD: f64 = 1e10;

pub fn oscillator_lsf(u: &[f64]) -> f64 {
    let [m, c1, c2, r, f1, t1] = oscillator_transform(u);
    let k = c1 + c2;
    if !(m > 0.0) || !(k > 0.0) {
        return OSCILLATOR_GUARD;
    }
    let w0 = (k / m).sqrt();
    3.0 * r - (2.0 * f1 / (m * w0 * w0) * (t1 * w0 / 2.0).sin()).abs()
}

/// Truncated KL expansion of a log-normal field on (0, 1) with exponential
/// covariance `variance * exp(-|y1 - y2| / corr_len)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KlField {
    pub mean_level: f64,
    pub corr_len: f64,
    pub variance: f64,
    pub eigenvalues: Vec<f64>,
    pub frequencies: Vec<f64>,
    /// `1 / ||v_i||_{L2}`.
    pub normalizers: Vec<f64>,
}

fn kl_characteristic(w: f64, l: f64) -> f64 {
    (l * l * w * w - 1.0) * w.sin() - 2.0 * l * w * w.cos()
}

pub fn kl_eigenpairs(n_terms: usize, variance: f64, corr_len: f64, mean_level: f64) -> Result<KlField> {
    if n_terms == 0 {
        return Err(Error::InvalidInput("KL expansion needs at least one term".into()));
    }
    let l = corr_len;
    let pi = std::f64::consts::PI;
    let mut frequencies = Vec::with_capacity(n_terms);
    for k in 0..n_terms {
        // one root per half period; skip the trivial root at 0
        let lo = if k == 0 { 1e-6 } else { k as f64 * pi };
        let hi = (k + 1) as f64 * pi;
        frequencies.push(solve_scalar_root(|w| kl_characteristic(w, l), lo, hi, 1e-14)?);
    }
    let eigenvalues = frequencies
        .iter()
        .map(|w| 2.0 * l * variance / (l * l * w * w + 1.0))
        .collect();
    let normalizers = frequencies
        .iter()
        .map(|&w| {
            let s2 = (2.0 * w).sin() / (4.0 * w);
            let norm_sq = l * l * w * w * (0.5 + s2) + (0.5 - s2) + l * w.sin().powi(2);
            norm_sq.sqrt().recip()
        })
        .collect();
    Ok(KlField {
        mean_level,
        corr_len,
        variance,
        eigenvalues,
        frequencies,
        normalizers,
    })
}

impl KlField {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Normalized eigenfunction `v_i(y)`.
    pub fn eigenfunction(&self, i: usize, y: f64) -> f64 {
        let w = self.frequencies[i];
        (self.corr_len * w * (w * y).cos() + (w * y).sin()) * self.normalizers[i]
    }

    /// `log a(y) = mean_level + sum sqrt(lambda_i) v_i(y) x_i`.
    pub fn log_field(&self, y: f64, x: &[f64]) -> f64 {
        self.mean_level
            + x.iter()
                .enumerate()
                .map(|(i, xi)| self.eigenvalues[i].sqrt() * self.eigenfunction(i, y) * xi)
                .sum::<f64>()
    }
}

pub const FLOWRATE_DIM: usize = 10;
pub const FLOWRATE_MESH: usize = 64;

pub fn flowrate_field() -> KlField {
    kl_eigenpairs(FLOWRATE_DIM, 0.04, 0.3, 0.1).expect("KL roots bracket for the flowrate field")
}

/// `1.7 + a(1) u_h'(1)` for `-(a u')' = 0`, `u(0) = 1`, `u(1) = 0`, with
/// piecewise-linear elements on `elements` uniform cells.
pub fn flowrate_lsf_on_mesh(x: &[f64], field: &KlField, elements: usize) -> f64 {
    let m = elements;
    let h = 1.0 / m as f64;
    let a: Vec<f64> = (0..m).map(|e| field.log_field((e as f64 + 0.5) * h, x).exp()).collect();
    let n = m - 1;
    let mut diag = vec![0.0; n];
    let mut sub = vec![0.0; n];
    let mut sup = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for i in 0..n {
        // interior node i + 1 touches elements i and i + 1
        diag[i] = (a[i] + a[i + 1]) / h;
        if i > 0 {
            sub[i] = -a[i] / h;
        }
        if i + 1 < n {
            sup[i] = -a[i + 1] / h;
        }
    }
    rhs[0] = a[0] / h;
    let u = solve_tridiagonal(&sub, &diag, &sup, &rhs).expect("stiffness matrix is diagonally dominant");
    let u_last_interior = u[n - 1];
    let a_end = field.log_field(1.0, x).exp();
    1.7 + a_end * (0.0 - u_last_interior) / h
}

/// Names accepted by [`problem_by_name`].
pub const PROBLEM_NAMES: [&str; 4] = ["linear", "convex", "oscillator", "flowrate"];

/// Threshold of the linear benchmark.
pub const LINEAR_OFFSET: f64 = 3.5;

pub fn linear_problem(dim: usize, c: f64) -> ProblemSpec {
    counted(
        "linear",
        dim,
        Arc::new(move |x: &[f64]| linear_lsf(x, c)),
        Some(ReferenceValue {
            pf: normal_cdf(-c),
            source: ReferenceSource::Analytic,
        }),
    )
}

pub fn convex_problem() -> ProblemSpec {
    counted("convex", 2, Arc::new(convex_lsf), None)
}

pub fn oscillator_problem() -> ProblemSpec {
    counted(
        "oscillator",
        6,
        Arc::new(oscillator_lsf),
        Some(ReferenceValue {
            pf: 6.43e-6,
            source: ReferenceSource::PublishedMonteCarlo,
        }),
    )
}

pub fn flowrate_problem() -> ProblemSpec {
    let field = Arc::new(flowrate_field());
    counted(
        "flowrate",
        FLOWRATE_DIM,
        Arc::new(move |x: &[f64]| flowrate_lsf_on_mesh(x, &field, FLOWRATE_MESH)),
        Some(ReferenceValue {
            pf: 3.026e-4,
            source: ReferenceSource::PublishedMonteCarlo,
        }),
    )
}

/// Registry lookup. `dim` only applies to the linear problem (default 2).
pub fn problem_by_name(name: &str, dim: Option<usize>) -> Result<ProblemSpec> {
    let fixed = |d: usize| match dim {
        Some(k) if k != d => Err(Error::Config(format!(
            "problem '{name}' has fixed dimension {d}, got {k}"
        ))),
        _ => Ok(()),
    };
    match name {
        "linear" => {
            let d = dim.unwrap_or(2);
            if d == 0 {
                return Err(Error::Config("linear problem needs dimension >= 1".into()));
            }
            Ok(linear_problem(d, LINEAR_OFFSET))
        }
        "convex" => fixed(2).map(|_| convex_problem()),
        "oscillator" => fixed(6).map(|_| oscillator_problem()),
        "flowrate" => fixed(FLOWRATE_DIM).map(|_| flowrate_problem()),
        other => Err(Error::Config(format!(
            "unknown problem '{other}' (expected one of {})",
            PROBLEM_NAMES.join(", ")
        ))),
    }
}
