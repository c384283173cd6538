//! Simplified ensemble Kalman filter baseline for rare events.
//!
//! Particles are pushed toward `{G = 0}` by a perturbed-observation Kalman
//! update against `max(G, 0)`. After every update a single-component
//! proposal is fit to the ensemble, `J` fresh points are drawn from it and
//! the importance-sampling estimate is formed. The noise scale `h` is fixed
//! per run; there is no inner step adaptation and no mixture fitting.

use serde::{Deserialize, Serialize};

use crate::cbs::Ensemble;
use crate::densities::{GaussianModel, Proposal, ProposalKind};
use crate::driver::{convergence_check, is_estimate, RunRecord, Termination, TraceRow};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, RandomStream};
use crate::problems::ProblemSpec;
use crate::smoothing::empirical_cv;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnkfConfig {
    #[serde(rename = "J")]
    pub ensemble_size: usize,
    /// Inverse noise variance: observation noise is `N(0, 1/h)`.
    pub h: f64,
    pub delta_target: f64,
    pub max_iter: usize,
    pub proposal_kind: ProposalKind,
    pub seed: u64,
}

impl Default for EnkfConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 2000,
            h: 1.0,
            delta_target: 1.0,
            max_iter: 100,
            proposal_kind: ProposalKind::Gaussian,
            seed: 0,
        }
    }
}

impl EnkfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 2 {
            return Err(Error::Config(format!(
                "ensemble size must be at least 2, got {}",
                self.ensemble_size
            )));
        }
        if !(self.h > 0.0) {
            return Err(Error::Config(format!("h must be positive, got {}", self.h)));
        }
        if !(self.delta_target > 0.0) {
            return Err(Error::Config(format!(
                "delta_target must be positive, got {}",
                self.delta_target
            )));
        }
        Ok(())
    }
}

/// Kalman update `x_j - C_xg / (c_gg + eps) * y_j` against perturbed
/// observations `y`.
pub fn enkf_update(points: &Matrix, y: &[f64]) -> Result<Matrix> {
    let (j, d) = (points.rows(), points.cols());
    if j < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: j });
    }
    if y.len() != j {
        return Err(Error::Dimension(format!("{j} points but {} observations", y.len())));
    }
    let nf = j as f64;
    let y_mean = y.iter().sum::<f64>() / nf;
    let mut x_mean = vec![0.0; d];
    for row in points.row_iter() {
        for (m, v) in x_mean.iter_mut().zip(row) {
            *m += v / nf;
        }
    }
    let mut c_xg = vec![0.0; d];
    let mut c_gg = 0.0;
    for (row, &yj) in points.row_iter().zip(y) {
        let dy = yj - y_mean;
        c_gg += dy * dy / nf;
        for k in 0..d {
            c_xg[k] += (row[k] - x_mean[k]) * dy / nf;
        }
    }
    let eps = 1e-12 * c_gg.max(1.0);
    let gain: Vec<f64> = c_xg.iter().map(|c| c / (c_gg + eps)).collect();
    let mut out = points.clone();
    for (row, &yj) in out.as_mut_slice().chunks_mut(d).zip(y) {
        for (x, k) in row.iter_mut().zip(&gain) {
            *x -= k * yj;
        }
    }
    Ok(out)
}

/// One perturbed-observation step; refreshes the limit-state values.
pub fn enkf_step<F: Fn(&[f64]) -> f64>(ens: &Ensemble, h: f64, stream: &mut RandomStream, lsf: &F) -> Result<Ensemble> {
    let sd = h.sqrt().recip();
    let y: Vec<f64> = ens
        .g_values()
        .iter()
        .map(|g| g.max(0.0) + sd * stream.standard_normal())
        .collect();
    let points = enkf_update(ens.points(), &y)?;
    Ok(Ensemble::evaluate(points, lsf))
}

pub fn run_enkf(problem: &ProblemSpec, config: &EnkfConfig) -> Result<RunRecord> {
    config.validate()?;
    let d = problem.dim();
    if d == 0 {
        return Err(Error::Config("problem dimension must be at least 1".into()));
    }
    let j = config.ensemble_size;
    let lsf = |x: &[f64]| problem.evaluate(x);
    let mut stream = RandomStream::new(config.seed);
    let mut ens = Ensemble::evaluate(GaussianModel::standard(d).sample(&mut stream, j), &lsf);
    let mut cost = j as u64;
    let mut trace = Vec::new();

    for n in 0.. {
        let mut step = |ens: &mut Ensemble,
                        stream: &mut RandomStream,
                        cost: &mut u64|
         -> Result<Option<(f64, Termination, Proposal)>> {
            if n > 0 {
                *ens = enkf_step(ens, config.h, stream, &lsf)?;
                *cost += j as u64;
            }
            let proposal = Proposal::fit(config.proposal_kind, ens.points())?;
            let fresh = Ensemble::evaluate(proposal.sample(stream, j), &lsf);
            *cost += j as u64;
            let (estimate, r) = is_estimate(&fresh, &proposal)?;
            let cv = empirical_cv(&r);
            trace.push(TraceRow {
                iter: n,
                s: None,
                beta: None,
                beta_capped: None,
                h: Some(config.h),
                err: None,
                cv,
                pf_estimate: estimate,
                ess: None,
                cost_cum: *cost,
            });
            if convergence_check(&r, config.delta_target) {
                return Ok(Some((estimate, Termination::Converged, proposal)));
            }
            if n >= config.max_iter {
                return Ok(Some((estimate, Termination::MaxIter, proposal)));
            }
            Ok(None)
        };
        if let Some((estimate, termination, proposal)) = step(&mut ens, &mut stream, &mut cost).map_err(|e| e.at(n))? {
            return Ok(RunRecord {
                method: "enkf".into(),
                problem: problem.name().into(),
                seed: config.seed,
                estimate,
                termination,
                iterations: n,
                cost,
                probe_steps: 0,
                trace,
                proposal: proposal.summary(),
                final_ensemble: Some(ens),
            });
        }
    }
    unreachable!("the loop only exits by returning")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{convex_lsf, linear_lsf};

    #[test]
    fn failing_ensemble_without_noise_is_fixed() {
        let p = GaussianModel::standard(2).sample(&mut RandomStream::new(1), 50);
        let ens = Ensemble::evaluate(p.clone(), &|x: &[f64]| -1.0 - x[0] * x[0]);
        let out = enkf_step(&ens, f64::INFINITY, &mut RandomStream::new(2), &|x: &[f64]| {
            -1.0 - x[0] * x[0]
        })
        .unwrap();
        assert_eq!(out.points(), &p);
    }

    #[test]
    fn gain_is_least_squares_slope_in_1d() {
        let xs = [0.3, -1.2, 0.8, 2.0, -0.4];
        let ys = [1.0, -0.5, 0.7, 2.9, 0.1];
        let p = Matrix::from_rows(&xs.map(|v| [v])).unwrap();
        let out = enkf_update(&p, &ys).unwrap();
        // oracle: slope of x regressed on y, i.e. cov(x, y) / var(y)
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
        let k = sxy / syy;
        for i in 0..xs.len() {
            assert!((out[(i, 0)] - (xs[i] - k * ys[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn positive_part_shrinks_on_linear_problem() {
        let lsf = |x: &[f64]| linear_lsf(x, 3.5);
        for seed in 0..10 {
            let mut rs = RandomStream::new(seed);
            let mut ens = Ensemble::evaluate(GaussianModel::standard(2).sample(&mut rs, 5000), &lsf);
            let pos = |e: &Ensemble| e.g_values().iter().map(|g| g.max(0.0)).sum::<f64>() / e.size() as f64;
            let mut prev = pos(&ens);
            for _ in 0..5 {
                ens = enkf_step(&ens, 1e4, &mut rs, &lsf).unwrap();
                let now = pos(&ens);
                assert!(now < prev, "seed {seed}: {now} >= {prev}");
                prev = now;
            }
        }
    }

    #[test]
    fn affine_equivariance() {
        // G(x) = H(Tx + b) with T invertible: stepping x and mapping equals
        // stepping the mapped points against H
        let h_lsf = |z: &[f64]| convex_lsf(z);
        let t = [[1.5, 0.3], [-0.2, 0.8]];
        let b = [0.4, -1.0];
        let map = |x: &[f64]| {
            [
                t[0][0] * x[0] + t[0][1] * x[1] + b[0],
                t[1][0] * x[0] + t[1][1] * x[1] + b[1],
            ]
        };
        let g_lsf = |x: &[f64]| h_lsf(&map(x));
        let p = GaussianModel::standard(2).sample(&mut RandomStream::new(5), 200);
        let mapped = Matrix::from_rows(&p.row_iter().map(map).collect::<Vec<_>>()).unwrap();
        let a = enkf_step(&Ensemble::evaluate(p, &g_lsf), 3.0, &mut RandomStream::new(6), &g_lsf).unwrap();
        let b2 = enkf_step(
            &Ensemble::evaluate(mapped, &h_lsf),
            3.0,
            &mut RandomStream::new(6),
            &h_lsf,
        )
        .unwrap();
        for (x, z) in a.points().row_iter().zip(b2.points().row_iter()) {
            let mx = map(x);
            assert!((mx[0] - z[0]).abs() < 1e-10 && (mx[1] - z[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn config_validation() {
        assert!(EnkfConfig {
            ensemble_size: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(EnkfConfig {
            h: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
