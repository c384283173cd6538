//! Repeated seeded runs and their aggregate error, cost and relative
//! efficiency against crude Monte Carlo.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::densities::{GaussianModel, Proposal};
use crate::driver::{run_cbree, run_cbree_vmfn, CbreeConfig, RunRecord, Termination, TraceRow};
use crate::enkf::{run_enkf, EnkfConfig};
use crate::error::{Error, Result};
use crate::numkit::{derive_seed, RandomStream};
use crate::problems::{problem_by_name, ProblemSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Cbree,
    CbreeVmfn,
    Enkf,
    Mc,
}

pub const METHOD_NAMES: [&str; 4] = ["cbree", "cbree-vmfn", "enkf", "mc"];

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cbree => "cbree",
            Self::CbreeVmfn => "cbree-vmfn",
            Self::Enkf => "enkf",
            Self::Mc => "mc",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cbree" => Ok(Self::Cbree),
            "cbree-vmfn" => Ok(Self::CbreeVmfn),
            "enkf" => Ok(Self::Enkf),
            "mc" => Ok(Self::Mc),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected one of {})",
                METHOD_NAMES.join(", ")
            ))),
        }
    }
}

/// Relative efficiency with a flag for the `MSE = 0` sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RelEff {
    pub value: f64,
    pub infinite: bool,
}

/// `P (1 - P) / (MSE * cost)`.
pub fn rel_eff(mse: f64, mean_cost: f64, pf_ref: f64) -> Result<RelEff> {
    if !(pf_ref > 0.0 && pf_ref < 1.0) {
        return Err(Error::InvalidInput(format!(
            "reference probability {pf_ref} outside (0, 1)"
        )));
    }
    if !(mean_cost > 0.0) {
        return Err(Error::InvalidInput(format!(
            "mean cost must be positive, got {mean_cost}"
        )));
    }
    if mse == 0.0 {
        return Ok(RelEff {
            value: f64::INFINITY,
            infinite: true,
        });
    }
    Ok(RelEff {
        value: pf_ref * (1.0 - pf_ref) / (mse * mean_cost),
        infinite: false,
    })
}

/// Crude Monte Carlo with `n` standard-normal draws.
pub fn run_mc(problem: &ProblemSpec, n: usize, seed: u64) -> Result<RunRecord> {
    if n == 0 {
        return Err(Error::Config("Monte Carlo needs at least one sample".into()));
    }
    let mut stream = RandomStream::new(seed);
    let mut x = vec![0.0; problem.dim()];
    let mut hits = 0u64;
    for _ in 0..n {
        stream.fill_standard_normal(&mut x);
        if problem.evaluate(&x) <= 0.0 {
            hits += 1;
        }
    }
    let estimate = hits as f64 / n as f64;
    let cv = if hits == 0 {
        f64::INFINITY
    } else {
        ((1.0 - estimate) / estimate).sqrt()
    };
    Ok(RunRecord {
        method: Method::Mc.as_str().into(),
        problem: problem.name().into(),
        seed,
        estimate,
        termination: Termination::Converged,
        iterations: 0,
        cost: n as u64,
        probe_steps: 0,
        trace: vec![TraceRow {
            iter: 0,
            s: None,
            beta: None,
            beta_capped: None,
            h: None,
            err: None,
            cv,
            pf_estimate: estimate,
            ess: None,
            cost_cum: n as u64,
        }],
        proposal: Proposal::Gaussian(GaussianModel::standard(problem.dim())).summary(),
        final_ensemble: None,
    })
}

/// Everything a benchmark needs, parsed from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub method: Method,
    pub problem: String,
    pub dim: Option<usize>,
    pub reps: usize,
    pub jobs: usize,
    pub seed: u64,
    /// Count `max_iter` runs as successes using their last estimate.
    pub count_max_iter: bool,
    pub cbree: CbreeConfig,
    pub enkf: EnkfConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            method: Method::Cbree,
            problem: "linear".into(),
            dim: None,
            reps: 10,
            jobs: 1,
            seed: 0,
            count_max_iter: false,
            cbree: CbreeConfig::default(),
            enkf: EnkfConfig::default(),
        }
    }
}

/// Keys accepted in configuration files.
pub const CONFIG_KEYS: [&str; 21] = [
    "method",
    "problem",
    "dim",
    "reps",
    "jobs",
    "seed",
    "count_max_iter",
    "J",
    "delta_target",
    "eps_target",
    "n_obs",
    "lip_s",
    "max_iter",
    "proposal_kind",
    "beta_cap",
    "fac_min",
    "fac_max",
    "clamp_steps",
    "comparator",
    "infinite_cv",
    "h",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value '{value}' for '{key}': {e}")))
}

impl BenchConfig {
    /// Parse `key = value` lines; `#` starts a comment. Unknown or repeated
    /// keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply the keys in `text` on top of `self` without validating, so
    /// command-line overrides can follow.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let cfg = self;
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_config(e))))?;
        }
        Ok(())
    }

    /// Set one key. Shared keys apply to every method.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "method" => self.method = value.parse()?,
            "problem" => self.problem = value.to_string(),
            "dim" => self.dim = Some(parse_value(key, value)?),
            "reps" => self.reps = parse_value(key, value)?,
            "jobs" => self.jobs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "count_max_iter" => self.count_max_iter = parse_value(key, value)?,
            // MC uses J as its sample count
            "J" => {
                let j = parse_value(key, value)?;
                self.cbree.ensemble_size = j;
                self.enkf.ensemble_size = j;
            }
            "delta_target" => {
                let v = parse_value(key, value)?;
                self.cbree.delta_target = v;
                self.enkf.delta_target = v;
            }
            "max_iter" => {
                let v = parse_value(key, value)?;
                self.cbree.max_iter = v;
                self.enkf.max_iter = v;
            }
            "proposal_kind" => {
                let v = parse_value(key, value)?;
                self.cbree.proposal_kind = v;
                self.enkf.proposal_kind = v;
            }
            "eps_target" => self.cbree.eps_target = parse_value(key, value)?,
            "n_obs" => self.cbree.n_obs = parse_value(key, value)?,
            "lip_s" => self.cbree.lip_s = parse_value(key, value)?,
            "beta_cap" => self.cbree.beta_cap = parse_value(key, value)?,
            "fac_min" => self.cbree.fac_min = parse_value(key, value)?,
            "fac_max" => self.cbree.fac_max = parse_value(key, value)?,
            "clamp_steps" => self.cbree.clamp_steps = parse_value(key, value)?,
            "comparator" => self.cbree.comparator = parse_value(key, value)?,
            "infinite_cv" => self.cbree.infinite_cv = parse_value(key, value)?,
            "h" => self.enkf.h = parse_value(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key '{other}' (known keys: {})",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        problem_by_name(&self.problem, self.dim)?;
        match self.method {
            Method::Cbree | Method::CbreeVmfn => self.cbree.validate(),
            Method::Enkf => self.enkf.validate(),
            Method::Mc if self.cbree.ensemble_size == 0 => Err(Error::Config("J must be positive".into())),
            Method::Mc => Ok(()),
        }
    }

    pub fn sample_size(&self) -> usize {
        self.cbree.ensemble_size
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}

/// One run of `method` on `problem` with the given seed.
pub fn run_method(method: Method, problem: &ProblemSpec, cfg: &BenchConfig, seed: u64) -> Result<RunRecord> {
    match method {
        Method::Cbree => run_cbree(
            problem,
            &CbreeConfig {
                seed,
                ..cfg.cbree.clone()
            },
        ),
        Method::CbreeVmfn => run_cbree_vmfn(
            problem,
            &CbreeConfig {
                seed,
                ..cfg.cbree.clone()
            },
        ),
        Method::Enkf => run_enkf(
            problem,
            &EnkfConfig {
                seed,
                ..cfg.enkf.clone()
            },
        ),
        Method::Mc => run_mc(problem, cfg.sample_size(), seed),
    }
}

/// One line of the per-run CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub rep: usize,
    pub seed: u64,
    pub estimate: f64,
    pub cost: u64,
    pub iterations: usize,
    /// `converged`, `diverged`, `max_iter` or `failed`.
    pub termination: String,
}

impl RunRow {
    pub fn succeeded(&self, count_max_iter: bool) -> bool {
        match self.termination.as_str() {
            "converged" | "diverged" => true,
            "max_iter" => count_max_iter,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub k: usize,
    pub success_count: usize,
    pub success_rate: f64,
    pub mse: f64,
    pub rel_rmse: f64,
    pub mean_cost: f64,
    pub rel_eff: f64,
    pub rel_eff_infinite: bool,
    /// Fewer than two successful runs: the MSE is a single squared error.
    pub low_k: bool,
}

/// Aggregates over the successful rows. Cost is averaged over the same rows.
pub fn aggregate(rows: &[RunRow], pf_ref: Option<f64>, count_max_iter: bool) -> Aggregate {
    let ok: Vec<&RunRow> = rows.iter().filter(|r| r.succeeded(count_max_iter)).collect();
    let n = ok.len();
    let nan = f64::NAN;
    let mean_cost = if n == 0 {
        nan
    } else {
        ok.iter().map(|r| r.cost as f64).sum::<f64>() / n as f64
    };
    let (mse, rel_rmse, eff) = match pf_ref {
        Some(p) if n > 0 => {
            let mse = ok.iter().map(|r| (r.estimate - p).powi(2)).sum::<f64>() / n as f64;
            let eff = rel_eff(mse, mean_cost, p).ok();
            (mse, mse.sqrt() / p, eff)
        }
        _ => (nan, nan, None),
    };
    Aggregate {
        k: rows.len(),
        success_count: n,
        success_rate: n as f64 / rows.len().max(1) as f64,
        mse,
        rel_rmse,
        mean_cost,
        rel_eff: eff.map_or(nan, |e| e.value),
        rel_eff_infinite: eff.is_some_and(|e| e.infinite),
        low_k: n < 2,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkResult {
    pub method: Method,
    pub problem: String,
    pub dim: usize,
    pub pf_ref: Option<f64>,
    pub sample_size: usize,
    pub delta_target: f64,
    pub eps_target: f64,
    pub n_obs: usize,
    pub config: serde_json::Value,
    #[serde(flatten)]
    pub aggregate: Aggregate,
    pub estimates: Vec<f64>,
    pub runs: Vec<RunRow>,
}

impl BenchmarkResult {
    /// Estimates of the successful runs.
    pub fn successful_estimates(&self, count_max_iter: bool) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.succeeded(count_max_iter))
            .map(|r| r.estimate)
            .collect()
    }

    pub fn write_runs_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "rep,seed,estimate,cost,iterations,termination")?;
        for r in &self.runs {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.rep, r.seed, r.estimate, r.cost, r.iterations, r.termination
            )?;
        }
        Ok(())
    }

    pub fn write_aggregate_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "method,problem,J,delta_target,eps_target,n_obs,K,success_rate,mse,rel_rmse,mean_cost,rel_eff"
        )?;
        let a = &self.aggregate;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.method.as_str(),
            self.problem,
            self.sample_size,
            self.delta_target,
            self.eps_target,
            self.n_obs,
            a.k,
            a.success_rate,
            a.mse,
            a.rel_rmse,
            a.mean_cost,
            a.rel_eff
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("benchmark results serialize")
    }
}

/// Runs `reps` repetitions; repetition `i` uses `derive_seed(seed, i)` and
/// its own evaluation counter, so results do not depend on `jobs`.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchmarkResult> {
    cfg.validate()?;
    let problem = problem_by_name(&cfg.problem, cfg.dim)?;
    let run_rep = |rep: usize| -> RunRow {
        let seed = derive_seed(cfg.seed, rep as u64);
        let own = problem.with_fresh_counter();
        match run_method(cfg.method, &own, cfg, seed) {
            Ok(r) => RunRow {
                rep,
                seed,
                estimate: r.estimate,
                cost: r.cost,
                iterations: r.iterations,
                termination: r.termination.as_str().into(),
            },
            Err(_) => RunRow {
                rep,
                seed,
                estimate: f64::NAN,
                cost: own.evaluations(),
                iterations: 0,
                termination: "failed".into(),
            },
        }
    };
    let runs: Vec<RunRow> = if cfg.jobs == 1 {
        (0..cfg.reps).map(run_rep).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::Config(format!("could not start {} workers: {e}", cfg.jobs)))?;
        pool.install(|| (0..cfg.reps).into_par_iter().map(run_rep).collect())
    };
    let pf_ref = problem.reference().map(|r| r.pf);
    let aggregate = aggregate(&runs, pf_ref, cfg.count_max_iter);
    let config = match cfg.method {
        Method::Enkf => serde_json::to_value(&cfg.enkf),
        Method::Mc => Ok(serde_json::json!({ "J": cfg.sample_size() })),
        _ => serde_json::to_value(&cfg.cbree),
    }
    .expect("configs serialize");
    Ok(BenchmarkResult {
        method: cfg.method,
        problem: cfg.problem.clone(),
        dim: problem.dim(),
        pf_ref,
        sample_size: cfg.sample_size(),
        delta_target: cfg.cbree.delta_target,
        eps_target: cfg.cbree.eps_target,
        n_obs: cfg.cbree.n_obs,
        config,
        estimates: runs.iter().map(|r| r.estimate).collect(),
        aggregate,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_eff_examples() {
        let e = rel_eff(1e-9, 1e4, 2.3263e-4).unwrap();
        assert!((e.value - 2.3263e-4 * (1.0 - 2.3263e-4) / 1e-5).abs() < 1e-9);
        assert!((e.value - 23.26).abs() < 0.01);
        let e = rel_eff(0.0, 10.0, 0.1).unwrap();
        assert!(e.infinite && e.value.is_infinite());
        assert!(rel_eff(1e-3, 1.0, 0.0).is_err());
        assert!(rel_eff(1e-3, 1.0, 1.0).is_err());
        assert!(rel_eff(1e-3, 0.0, 0.5).is_err());
    }

    #[test]
    fn config_parsing() {
        let text = "# linear benchmark\nmethod = cbree\nproblem = linear\nJ = 500\ndelta_target = 2 # inline\nn_obs = 0\n\nreps = 3\n";
        let cfg = BenchConfig::parse(text).unwrap();
        assert_eq!(cfg.method, Method::Cbree);
        assert_eq!(cfg.cbree.ensemble_size, 500);
        assert_eq!(cfg.enkf.ensemble_size, 500);
        assert_eq!(cfg.cbree.delta_target, 2.0);
        assert_eq!(cfg.cbree.n_obs, 0);
        assert_eq!(cfg.reps, 3);
    }

    #[test]
    fn config_errors() {
        for bad in [
            "bogus = 1",
            "J = many",
            "J",
            "J = 10\nJ = 20",
            "method = sis",
            "problem = nowhere",
            "problem = oscillator\ndim = 3",
            "n_obs = 1",
            "reps = 0",
        ] {
            assert!(matches!(BenchConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn aggregate_excludes_failures() {
        let row = |estimate, termination: &str| RunRow {
            rep: 0,
            seed: 0,
            estimate,
            cost: 100,
            iterations: 3,
            termination: termination.into(),
        };
        let rows = vec![
            row(0.11, "converged"),
            row(0.09, "diverged"),
            row(5.0, "max_iter"),
            row(f64::NAN, "failed"),
        ];
        let a = aggregate(&rows, Some(0.1), false);
        assert_eq!(a.success_count, 2);
        assert!((a.mse - 1e-4).abs() < 1e-15);
        assert!((a.rel_rmse - 0.1).abs() < 1e-12);
        assert_eq!(a.mean_cost, 100.0);
        let b = aggregate(&rows, Some(0.1), true);
        assert_eq!(b.success_count, 3);
        let single = aggregate(&rows[..1], Some(0.1), false);
        assert!(single.low_k);
    }

    #[test]
    fn mc_estimate_and_cost() {
        let p = crate::problems::linear_problem(2, 1.0);
        let r = run_mc(&p, 20_000, 3).unwrap();
        assert_eq!(r.cost, 20_000);
        assert_eq!(p.evaluations(), 20_000);
        let pf = crate::problems::normal_cdf(-1.0);
        let se = (pf * (1.0 - pf) / 20_000.0).sqrt();
        assert!((r.estimate - pf).abs() < 4.0 * se);
    }
}
