//! von Mises-Fisher-Nakagami model: a vMF law for the direction `x/|x|`
//! times a Nakagami law for the radius `|x|`.

use rand_distr::{Beta, Distribution, Gamma};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::numkit::{Matrix, RandomStream};

use super::bessel::log_bessel_i;

pub const KAPPA_CAP: f64 = 1e8;
pub const SHAPE_MIN: f64 = 0.5;
pub const SHAPE_MAX: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct VmfnModel {
    mean_direction: Vec<f64>,
    kappa: f64,
    shape: f64,
    spread: f64,
    kappa_capped: bool,
}

impl VmfnModel {
    pub fn new(mean_direction: Vec<f64>, kappa: f64, shape: f64, spread: f64) -> Result<Self> {
        if mean_direction.len() < 2 {
            return Err(Error::InvalidInput("vMFN needs dimension >= 2".into()));
        }
        let norm = mean_direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "mean direction must be a unit vector, norm is {norm}"
            )));
        }
        if !(kappa >= 0.0) || !(shape >= SHAPE_MIN) || !(spread > 0.0) {
            return Err(Error::InvalidInput(format!(
                "invalid vMFN parameters kappa={kappa} m={shape} omega={spread}"
            )));
        }
        Ok(Self {
            mean_direction,
            kappa,
            shape,
            spread,
            kappa_capped: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean_direction.len()
    }

    pub fn mean_direction(&self) -> &[f64] {
        &self.mean_direction
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Nakagami shape `m`.
    pub fn shape(&self) -> f64 {
        self.shape
    }

    /// Nakagami spread `Omega = E[r^2]`.
    pub fn spread(&self) -> f64 {
        self.spread
    }

    /// True when the fit hit the concentration cap.
    pub fn kappa_capped(&self) -> bool {
        self.kappa_capped
    }

    fn log_vmf_normalizer(&self) -> f64 {
        let d = self.dim() as f64;
        let nu = 0.5 * d - 1.0;
        if self.kappa < 1e-8 {
            // reciprocal surface area of the unit sphere
            ln_gamma(0.5 * d) - std::f64::consts::LN_2 - 0.5 * d * std::f64::consts::PI.ln()
        } else {
            nu * self.kappa.ln() - 0.5 * d * super::LN_2PI - log_bessel_i(nu, self.kappa)
        }
    }

    fn log_nakagami(&self, r: f64) -> f64 {
        let (m, om) = (self.shape, self.spread);
        std::f64::consts::LN_2 + m * m.ln() - ln_gamma(m) - m * om.ln() + (2.0 * m - 1.0) * r.ln() - m * r * r / om
    }

    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r == 0.0 {
            return Err(Error::InvalidInput("vMFN density is undefined at the origin".into()));
        }
        let cos: f64 = x.iter().zip(&self.mean_direction).map(|(a, b)| a * b).sum::<f64>() / r;
        let d = self.dim() as f64;
        Ok(self.log_vmf_normalizer() + self.kappa * cos + self.log_nakagami(r) - (d - 1.0) * r.ln())
    }

    /// Directions by Wood's rejection sampler, radii as square roots of
    /// `Gamma(m, Omega/m)` draws.
    pub fn sample(&self, stream: &mut RandomStream, n: usize) -> Matrix {
        let d = self.dim();
        let mut out = Matrix::zeros(n, d);
        let gamma = Gamma::new(self.shape, self.spread / self.shape).expect("validated parameters");
        let mut dir = vec![0.0; d];
        for i in 0..n {
            self.sample_direction(stream, &mut dir);
            let r = gamma.sample(stream).sqrt();
            for (o, u) in out.row_mut(i).iter_mut().zip(&dir) {
                *o = r * u;
            }
        }
        out
    }

    fn sample_direction(&self, stream: &mut RandomStream, out: &mut [f64]) {
        let d = self.dim();
        let dm1 = (d - 1) as f64;
        let kappa = self.kappa;
        let w = if kappa == 0.0 {
            let z = Beta::new(0.5 * dm1, 0.5 * dm1)
                .expect("positive parameters")
                .sample(stream);
            1.0 - 2.0 * z
        } else {
            let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
            let x0 = (1.0 - b) / (1.0 + b);
            let c = kappa * x0 + dm1 * (4.0 * b / ((1.0 + b) * (1.0 + b))).ln();
            let beta = Beta::new(0.5 * dm1, 0.5 * dm1).expect("positive parameters");
            loop {
                let z = beta.sample(stream);
                let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
                let u = stream.uniform();
                if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
                    break w;
                }
            }
        };
        // uniform direction orthogonal to the mean direction
        let mu = &self.mean_direction;
        loop {
            stream.fill_standard_normal(out);
            let proj: f64 = out.iter().zip(mu).map(|(a, b)| a * b).sum();
            out.iter_mut().zip(mu).for_each(|(o, m)| *o -= proj * m);
            let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                let t = (1.0 - w * w).max(0.0).sqrt() / norm;
                out.iter_mut().zip(mu).for_each(|(o, m)| *o = w * m + t * *o);
                return;
            }
        }
    }
}

/// Fits direction, concentration and Nakagami parameters to the rows of
/// `sample`.
///
/// The concentration uses `kappa = rbar (d - rbar^2) / (1 - rbar^2)` with
/// `rbar` the length of the mean unit vector; the radial law is moment
/// matched, `Omega = mean(r^2)` and `m = Omega^2 / var(r^2)` clamped to
/// `[0.5, 1e6]`.
pub fn vmfn_fit(sample: &Matrix) -> Result<VmfnModel> {
    let (j, d) = (sample.rows(), sample.cols());
    if j < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: j });
    }
    if d < 2 {
        return Err(Error::InvalidInput("vMFN fit needs dimension >= 2".into()));
    }
    let mut dir_sum = vec![0.0; d];
    let mut r2 = Vec::with_capacity(j);
    for row in sample.row_iter() {
        let rr: f64 = row.iter().map(|v| v * v).sum();
        if rr == 0.0 {
            return Err(Error::InvalidInput("zero-norm point in vMFN fit".into()));
        }
        let r = rr.sqrt();
        dir_sum.iter_mut().zip(row).for_each(|(s, v)| *s += v / r);
        r2.push(rr);
    }
    let jf = j as f64;
    let mean_dir: Vec<f64> = dir_sum.iter().map(|s| s / jf).collect();
    let rbar = mean_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mean_direction = if rbar > 0.0 {
        mean_dir.iter().map(|v| v / rbar).collect()
    } else {
        let mut e = vec![0.0; d];
        e[0] = 1.0;
        e
    };
    let df = d as f64;
    let (kappa, capped) = if rbar >= 1.0 - 1e-12 {
        (KAPPA_CAP, true)
    } else {
        let k = rbar * (df - rbar * rbar) / (1.0 - rbar * rbar);
        if k > KAPPA_CAP {
            (KAPPA_CAP, true)
        } else {
            (k, false)
        }
    };
    let spread = r2.iter().sum::<f64>() / jf;
    let var = r2.iter().map(|v| (v - spread) * (v - spread)).sum::<f64>() / jf;
    let shape = if var > 0.0 {
        (spread * spread / var).clamp(SHAPE_MIN, SHAPE_MAX)
    } else {
        SHAPE_MAX
    };
    let mut model = VmfnModel::new(mean_direction, kappa, shape, spread)?;
    model.kappa_capped = capped;
    Ok(model)
}
