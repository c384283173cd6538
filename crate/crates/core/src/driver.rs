//! The CBREE main loop and its vMFN-resampling variant.
//!
//! Each iteration fits a proposal to the current ensemble, forms the
//! importance-sampling estimate, checks the stopping rules and then moves
//! the ensemble one particle step closer to the failure domain. The
//! smoothing parameter, inverse temperature and step size are adapted
//! along the way.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cbs::{
    cbs_update, coefficients_from_log_targets, ess_from_log_targets, solve_beta, solve_beta_from_log_targets, Ensemble,
    BETA_CAP,
};
use crate::densities::{std_normal_logpdf, GaussianModel, Proposal, ProposalKind, ProposalSummary};
use crate::error::{Error, Result};
use crate::numkit::{ls_slope, RandomStream};
use crate::problems::ProblemSpec;
use crate::smoothing::{empirical_cv, update_smoothing, SmoothingState};
use crate::stepctl::{
    decay_rates, forcing_from_rhs, initial_stepsize, local_error, moments_of_ensemble, next_stepsize,
    rhs_from_coefficients, ComparatorForm, StepClamps, StepPair,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbreeConfig {
    /// Ensemble size `J`.
    #[serde(rename = "J")]
    pub ensemble_size: usize,
    pub delta_target: f64,
    pub eps_target: f64,
    /// Window of the divergence check; 0 disables it.
    pub n_obs: usize,
    pub lip_s: f64,
    pub max_iter: usize,
    pub proposal_kind: ProposalKind,
    pub beta_cap: f64,
    pub fac_min: f64,
    pub fac_max: f64,
    /// Apply `[fac_min, fac_max]` to the step-size ratio.
    pub clamp_steps: bool,
    pub comparator: ComparatorForm,
    pub infinite_cv: InfiniteCvPolicy,
    pub seed: u64,
}

/// Treatment of iterations without failure samples (`cv = +inf`) inside
/// the divergence window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfiniteCvPolicy {
    /// The slope is undefined, so the check does not fire.
    #[default]
    Skip,
    /// Replace `+inf` by ten times the largest finite cv seen so far.
    Sentinel,
}

impl std::str::FromStr for InfiniteCvPolicy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "skip" => Ok(Self::Skip),
            "sentinel" => Ok(Self::Sentinel),
            other => Err(format!(
                "unknown infinite-cv policy '{other}' (expected skip or sentinel)"
            )),
        }
    }
}

impl Default for CbreeConfig {
    fn default() -> Self {
        let clamps = StepClamps::default();
        Self {
            ensemble_size: 2000,
            delta_target: 1.0,
            eps_target: 1.0,
            n_obs: 2,
            lip_s: 1.0,
            max_iter: 100,
            proposal_kind: ProposalKind::Gaussian,
            beta_cap: BETA_CAP,
            fac_min: clamps.fac_min,
            fac_max: clamps.fac_max,
            clamp_steps: true,
            comparator: ComparatorForm::Standard,
            infinite_cv: InfiniteCvPolicy::Skip,
            seed: 0,
        }
    }
}

impl CbreeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.ensemble_size < 2 {
            return bad(format!("ensemble size must be at least 2, got {}", self.ensemble_size));
        }
        if !(self.delta_target > 0.0) {
            return bad(format!("delta_target must be positive, got {}", self.delta_target));
        }
        if !(self.eps_target > 0.0) {
            return bad(format!("eps_target must be positive, got {}", self.eps_target));
        }
        if self.n_obs == 1 {
            return bad("n_obs must be 0 (disabled) or at least 2".into());
        }
        if !(self.lip_s > 0.0) {
            return bad(format!("lip_s must be positive, got {}", self.lip_s));
        }
        if !(self.beta_cap > 0.0) {
            return bad(format!("beta_cap must be positive, got {}", self.beta_cap));
        }
        if !(self.fac_min > 0.0 && self.fac_min <= 1.0 && self.fac_max >= 1.0) {
            return bad(format!(
                "step clamps need 0 < fac_min <= 1 <= fac_max, got [{}, {}]",
                self.fac_min, self.fac_max
            ));
        }
        Ok(())
    }

    fn clamps(&self) -> Option<StepClamps> {
        self.clamp_steps.then_some(StepClamps {
            fac_min: self.fac_min,
            fac_max: self.fac_max,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    Diverged,
    MaxIter,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Converged => "converged",
            Self::Diverged => "diverged",
            Self::MaxIter => "max_iter",
        }
    }
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One row per iteration. `cv` and `pf_estimate` describe the ensemble at
/// this iteration; the step fields describe the move out of it and are
/// empty on the final row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub s: Option<f64>,
    pub beta: Option<f64>,
    pub beta_capped: Option<bool>,
    pub h: Option<f64>,
    /// Local error estimate, present only on controller iterations.
    pub err: Option<f64>,
    pub cv: f64,
    pub pf_estimate: f64,
    pub ess: Option<f64>,
    pub cost_cum: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub problem: String,
    pub seed: u64,
    pub estimate: f64,
    pub termination: Termination,
    pub iterations: usize,
    pub cost: u64,
    /// Limit-state batches spent on step-size probing (0 or 1).
    pub probe_steps: usize,
    pub trace: Vec<TraceRow>,
    pub proposal: ProposalSummary,
    #[serde(skip)]
    pub final_ensemble: Option<Ensemble>,
}

impl RunRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run records serialize")
    }

    pub fn write_trace_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "iter,s,beta,beta_capped,h,err,cv,pf_estimate,ess,cost_cum")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.trace {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.iter,
                opt(r.s),
                opt(r.beta),
                r.beta_capped.map(|b| b.to_string()).unwrap_or_default(),
                opt(r.h),
                opt(r.err),
                r.cv,
                r.pf_estimate,
                opt(r.ess),
                r.cost_cum
            )?;
        }
        Ok(())
    }
}

/// Importance-sampling estimate with weights `pi / mu` on failure points.
pub fn is_estimate(ens: &Ensemble, proposal: &Proposal) -> Result<(f64, Vec<f64>)> {
    let mut r = vec![0.0; ens.size()];
    for (j, (x, &g)) in ens.points().row_iter().zip(ens.g_values()).enumerate() {
        if g <= 0.0 {
            r[j] = (std_normal_logpdf(x) - proposal.logpdf(x)?).exp();
        }
    }
    let estimate = r.iter().sum::<f64>() / r.len() as f64;
    Ok((estimate, r))
}

pub fn convergence_check(weights: &[f64], delta_target: f64) -> bool {
    empirical_cv(weights) <= delta_target
}

/// Strictly positive least-squares slope over the last `n_obs` values.
pub fn divergence_check(cv_history: &[f64], n_obs: usize) -> bool {
    if n_obs < 2 || cv_history.len() < n_obs {
        return false;
    }
    ls_slope(&cv_history[cv_history.len() - n_obs..]).is_ok_and(|s| s > 0.0)
}

/// CBREE with a proposal refit to the ensemble each iteration.
pub fn run_cbree(problem: &ProblemSpec, config: &CbreeConfig) -> Result<RunRecord> {
    run_loop(problem, config, config.proposal_kind, false)
}

/// CBREE where every iteration replaces the ensemble by fresh draws from a
/// fitted vMFN density, which then also serves as the proposal.
pub fn run_cbree_vmfn(problem: &ProblemSpec, config: &CbreeConfig) -> Result<RunRecord> {
    if problem.dim() < 2 {
        return Err(Error::Config("the vMFN variant needs dimension >= 2".into()));
    }
    run_loop(problem, config, ProposalKind::Vmfn, true)
}

struct Runner<'a> {
    problem: &'a ProblemSpec,
    config: &'a CbreeConfig,
    kind: ProposalKind,
    resample: bool,
    rates: Vec<f64>,
    stream: RandomStream,
    ens: Ensemble,
    cost: u64,
    smoothing: SmoothingState,
    h: f64,
    probe_steps: usize,
    cv_history: Vec<f64>,
    max_finite_cv: f64,
    estimates: Vec<f64>,
    trace: Vec<TraceRow>,
    // stage data for the step-size controller, indexed by iteration
    theta: Vec<Vec<f64>>,
    forcing: Vec<Vec<f64>>,
    steps: Vec<f64>,
    // moments of the latest particle-step output
    psi: Vec<f64>,
}

struct Finished {
    estimate: f64,
    termination: Termination,
    proposal: Proposal,
}

impl Runner<'_> {
    fn batch(&self) -> u64 {
        self.config.ensemble_size as u64
    }

    fn evaluate(&mut self, points: crate::numkit::Matrix) -> Ensemble {
        self.cost += self.batch();
        let problem = self.problem;
        Ensemble::evaluate(points, &|x: &[f64]| problem.evaluate(x))
    }

    fn unevaluated(points: crate::numkit::Matrix) -> Result<Ensemble> {
        let j = points.rows();
        Ensemble::from_parts(points, vec![f64::NAN; j])
    }

    fn iterate(&mut self, n: usize) -> Result<Option<Finished>> {
        let config = self.config;
        let j = config.ensemble_size;
        let proposal = Proposal::fit(self.kind, self.ens.points())?;
        if self.resample {
            let fresh = proposal.sample(&mut self.stream, j);
            self.ens = self.evaluate(fresh);
        }
        let (estimate, r) = is_estimate(&self.ens, &proposal)?;
        self.estimates.push(estimate);
        let cv = empirical_cv(&r);
        if cv.is_finite() {
            self.max_finite_cv = self.max_finite_cv.max(cv);
        }
        self.cv_history.push(cv);
        let mut row = TraceRow {
            iter: n,
            s: None,
            beta: None,
            beta_capped: None,
            h: None,
            err: None,
            cv,
            pf_estimate: estimate,
            ess: None,
            cost_cum: self.cost,
        };

        let finish = |termination, estimate| Finished {
            estimate,
            termination,
            proposal: proposal.clone(),
        };
        if convergence_check(&r, config.delta_target) {
            self.trace.push(row);
            return Ok(Some(finish(Termination::Converged, estimate)));
        }
        if config.n_obs > 0 && n >= config.n_obs && self.max_finite_cv.is_finite() {
            let recent = &self.cv_history[self.cv_history.len() - config.n_obs..];
            let window: Option<Vec<f64>> = match config.infinite_cv {
                InfiniteCvPolicy::Skip => recent.iter().all(|c| c.is_finite()).then(|| recent.to_vec()),
                InfiniteCvPolicy::Sentinel => {
                    let sentinel = 10.0 * self.max_finite_cv;
                    Some(
                        recent
                            .iter()
                            .map(|&c| if c.is_finite() { c } else { sentinel })
                            .collect(),
                    )
                }
            };
            if window.is_some_and(|w| divergence_check(&w, config.n_obs)) {
                let tail = &self.estimates[self.estimates.len() - config.n_obs..];
                let avg = tail.iter().sum::<f64>() / tail.len() as f64;
                self.trace.push(row);
                return Ok(Some(finish(Termination::Diverged, avg)));
            }
        }
        if n >= config.max_iter {
            self.trace.push(row);
            return Ok(Some(finish(Termination::MaxIter, estimate)));
        }

        let theta_now = moments_of_ensemble(&self.ens)?;
        let target_ess = j as f64 / 2.0;
        if n == 0 {
            let beta0 = solve_beta(&self.ens, 0.0, target_ess)?.beta.min(config.beta_cap);
            let problem = self.problem;
            let init = initial_stepsize(
                &self.ens,
                0.0,
                beta0,
                config.eps_target,
                &mut self.stream,
                &|x: &[f64]| problem.evaluate(x),
            )?;
            self.cost += self.batch();
            self.probe_steps = 1;
            self.h = init.h;
        } else if n.is_multiple_of(2) {
            let pair = StepPair {
                theta_prev2: &self.theta[n - 2],
                theta_prev1: &self.theta[n - 1],
                theta_now: &self.psi,
                forcing_prev2: &self.forcing[n - 2],
                forcing_prev1: &self.forcing[n - 1],
                h_first: self.steps[n - 2],
                h_second: self.steps[n - 1],
            };
            let err = local_error(&pair, &self.rates, config.eps_target, config.comparator)?;
            row.err = Some(err);
            self.h = next_stepsize(err, self.h, config.clamps());
        }
        let h = self.h;

        let s_next = update_smoothing(self.ens.g_values(), &self.smoothing, h);
        self.smoothing.s = s_next;
        let log_targets = self.ens.log_targets(s_next);
        let solved = solve_beta_from_log_targets(&log_targets, target_ess, BETA_CAP)?;
        let beta = solved.beta.min(config.beta_cap);
        let coeffs = coefficients_from_log_targets(self.ens.points(), &log_targets, beta)?;
        let rhs = rhs_from_coefficients(&theta_now, &coeffs);
        self.forcing.push(forcing_from_rhs(&theta_now, &rhs));
        self.theta.push(theta_now.as_slice().to_vec());
        self.steps.push(h);

        let points = cbs_update(self.ens.points(), &coeffs, h, &mut self.stream)?;
        self.ens = if self.resample {
            Self::unevaluated(points)?
        } else {
            self.evaluate(points)
        };
        self.psi = moments_of_ensemble(&self.ens)?.as_slice().to_vec();

        row.s = Some(s_next);
        row.beta = Some(beta);
        row.beta_capped = Some(solved.capped || solved.beta > config.beta_cap);
        row.h = Some(h);
        row.ess = Some(ess_from_log_targets(&log_targets, beta));
        row.cost_cum = self.cost;
        self.trace.push(row);
        Ok(None)
    }
}

fn run_loop(problem: &ProblemSpec, config: &CbreeConfig, kind: ProposalKind, resample: bool) -> Result<RunRecord> {
    config.validate()?;
    let d = problem.dim();
    if d == 0 {
        return Err(Error::Config("problem dimension must be at least 1".into()));
    }
    let mut stream = RandomStream::new(config.seed);
    let start = GaussianModel::standard(d).sample(&mut stream, config.ensemble_size);
    let mut runner = Runner {
        problem,
        config,
        kind,
        resample,
        rates: decay_rates(d),
        stream,
        ens: Runner::unevaluated(start.clone())?,
        cost: 0,
        smoothing: SmoothingState::new(config.lip_s, config.delta_target),
        h: f64::NAN,
        probe_steps: 0,
        cv_history: Vec::new(),
        max_finite_cv: f64::NEG_INFINITY,
        estimates: Vec::new(),
        trace: Vec::new(),
        theta: Vec::new(),
        forcing: Vec::new(),
        steps: Vec::new(),
        psi: Vec::new(),
    };
    // the resampling variant evaluates only the refit draws
    if !resample {
        runner.ens = runner.evaluate(start);
    }
    let mut n = 0;
    let done = loop {
        if let Some(done) = runner.iterate(n).map_err(|e| e.at(n))? {
            break done;
        }
        n += 1;
    };
    let method = if resample { "cbree-vmfn" } else { "cbree" };
    Ok(RunRecord {
        method: method.into(),
        problem: problem.name().into(),
        seed: config.seed,
        estimate: done.estimate,
        termination: done.termination,
        iterations: n,
        cost: runner.cost,
        probe_steps: runner.probe_steps,
        trace: runner.trace,
        proposal: done.proposal.summary(),
        final_ensemble: Some(runner.ens),
    })
}
