//! Input density and importance-sampling proposals.

mod bessel;
mod gaussian;
mod vmfn;

pub use bessel::log_bessel_i;
pub use gaussian::{gaussian_fit, GaussianModel};
pub use vmfn::{vmfn_fit, VmfnModel, KAPPA_CAP};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numkit::{Matrix, RandomStream};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-density of `N(0, I_d)`.
pub fn std_normal_logpdf(x: &[f64]) -> f64 {
    let q: f64 = x.iter().map(|v| v * v).sum();
    -0.5 * (x.len() as f64 * LN_2PI + q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProposalKind {
    #[default]
    Gaussian,
    Vmfn,
}

impl std::str::FromStr for ProposalKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "vmfn" => Ok(Self::Vmfn),
            other => Err(format!("unknown proposal kind '{other}' (expected gaussian or vmfn)")),
        }
    }
}

/// A fitted importance-sampling proposal.
#[derive(Debug, Clone)]
pub enum Proposal {
    Gaussian(GaussianModel),
    Vmfn(VmfnModel),
}

impl Proposal {
    pub fn fit(kind: ProposalKind, sample: &Matrix) -> Result<Self> {
        match kind {
            ProposalKind::Gaussian => {
                if sample.rows() < 2 {
                    return Err(crate::error::Error::TooFewPoints {
                        needed: 2,
                        got: sample.rows(),
                    });
                }
                let (mean, cov) = crate::numkit::weighted_moments(sample, &vec![0.0; sample.rows()])?;
                GaussianModel::new(mean, &cov, fit_jitter(&cov)).map(Self::Gaussian)
            }
            ProposalKind::Vmfn => vmfn_fit(sample).map(Self::Vmfn),
        }
    }

    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        match self {
            Self::Gaussian(g) => Ok(g.logpdf(x)),
            Self::Vmfn(v) => v.logpdf(x),
        }
    }

    pub fn sample(&self, stream: &mut RandomStream, n: usize) -> Matrix {
        match self {
            Self::Gaussian(g) => g.sample(stream, n),
            Self::Vmfn(v) => v.sample(stream, n),
        }
    }

    pub fn summary(&self) -> ProposalSummary {
        match self {
            Self::Gaussian(g) => ProposalSummary::Gaussian {
                mean: g.mean().to_vec(),
                cov: g.covariance().row_iter().map(<[f64]>::to_vec).collect(),
            },
            Self::Vmfn(v) => ProposalSummary::Vmfn {
                mu: v.mean_direction().to_vec(),
                kappa: v.kappa(),
                m: v.shape(),
                omega: v.spread(),
            },
        }
    }
}

/// Jitter for fitted covariances: `1e-10 * trace / d`, floored so a
/// collapsed ensemble still yields an invertible model.
pub(crate) fn fit_jitter(cov: &Matrix) -> f64 {
    crate::numkit::default_jitter(cov).max(1e-12)
}

/// Serialized form of a proposal for run records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ProposalSummary {
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    Vmfn {
        mu: Vec<f64>,
        kappa: f64,
        m: f64,
        omega: f64,
    },
}
