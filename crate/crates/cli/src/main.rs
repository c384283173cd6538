use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cbree::bench::{run_benchmark, run_method, BenchConfig, Method, CONFIG_KEYS, METHOD_NAMES};
use cbree::problems::{problem_by_name, PROBLEM_NAMES};
use cbree::Error;

#[derive(Parser)]
#[command(
    name = "cbree",
    version,
    about = "Rare event estimation with consensus-based sampling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the registered problems and methods.
    List,
    /// Run one estimator once and emit its record and trace.
    Run {
        #[arg(long)]
        problem: String,
        #[arg(long)]
        method: String,
        /// Flat `key = value` configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dimension, for problems that take one.
        #[arg(long)]
        dim: Option<usize>,
        /// Directory for `run.json` and `trace.csv`; JSON goes to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat a configured run and aggregate error, cost and efficiency.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        jobs: Option<usize>,
        /// Directory for `runs.csv`, `aggregate.csv` and `aggregate.json`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write the final ensemble of one run as CSV.
    ExportEnsemble {
        #[arg(long)]
        problem: String,
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dim: Option<usize>,
        /// Output file; stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn io_failure(path: &Path) -> impl FnOnce(io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<BenchConfig, Failure> {
    let mut cfg = BenchConfig::default();
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    }
    Ok(cfg)
}

fn single_run_config(
    config: Option<&Path>,
    problem: &str,
    method: &str,
    seed: u64,
    dim: Option<usize>,
) -> Result<BenchConfig, Failure> {
    let mut cfg = load_config(config)?;
    cfg.set("problem", problem)?;
    cfg.set("method", method)?;
    cfg.seed = seed;
    if dim.is_some() {
        cfg.dim = dim;
    }
    cfg.reps = 1;
    cfg.validate()?;
    Ok(cfg)
}

fn list() {
    println!("problems:");
    for name in PROBLEM_NAMES {
        let p = problem_by_name(name, None).expect("registered problems construct");
        let reference = match p.reference() {
            Some(r) => format!(
                "{:e} ({})",
                r.pf,
                serde_json::to_string(&r.source).unwrap_or_default().trim_matches('"')
            ),
            None => "none".into(),
        };
        println!("  {name:<11} dim {:<3} reference {reference}", p.dim());
    }
    println!("methods:");
    for name in METHOD_NAMES {
        println!("  {name}");
    }
    println!("config keys: {}", CONFIG_KEYS.join(", "));
}

fn run(cfg: &BenchConfig, out: Option<&Path>) -> Result<(), Failure> {
    let problem = problem_by_name(&cfg.problem, cfg.dim)?;
    let record = run_method(cfg.method, &problem, cfg, cfg.seed)?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_failure(dir))?;
            let json = dir.join("run.json");
            fs::write(&json, record.to_json()).map_err(io_failure(&json))?;
            let trace = dir.join("trace.csv");
            let file = fs::File::create(&trace).map_err(io_failure(&trace))?;
            record
                .write_trace_csv(io::BufWriter::new(file))
                .map_err(io_failure(&trace))?;
            eprintln!(
                "{} on {}: estimate {:e}, {} after {} iterations, cost {}",
                record.method, record.problem, record.estimate, record.termination, record.iterations, record.cost
            );
        }
        None => println!("{}", record.to_json()),
    }
    Ok(())
}

fn bench(
    mut cfg: BenchConfig,
    reps: Option<usize>,
    jobs: Option<usize>,
    out_dir: Option<&Path>,
) -> Result<(), Failure> {
    if let Some(k) = reps {
        cfg.reps = k;
    }
    if let Some(n) = jobs {
        cfg.jobs = n;
    }
    cfg.validate()?;
    let result = run_benchmark(&cfg)?;
    match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_failure(dir))?;
            let runs = dir.join("runs.csv");
            let file = fs::File::create(&runs).map_err(io_failure(&runs))?;
            result
                .write_runs_csv(io::BufWriter::new(file))
                .map_err(io_failure(&runs))?;
            let agg = dir.join("aggregate.csv");
            let file = fs::File::create(&agg).map_err(io_failure(&agg))?;
            result
                .write_aggregate_csv(io::BufWriter::new(file))
                .map_err(io_failure(&agg))?;
            let json = dir.join("aggregate.json");
            fs::write(&json, result.to_json()).map_err(io_failure(&json))?;
        }
        None => {
            let stdout = io::stdout();
            result
                .write_aggregate_csv(stdout.lock())
                .map_err(|e| Failure::Runtime(e.to_string()))?;
        }
    }
    let a = &result.aggregate;
    eprintln!(
        "{} on {}: {}/{} successful, rel. RMSE {:.4}, mean cost {:.1}, rel. efficiency {:.4}{}",
        result.method.as_str(),
        result.problem,
        a.success_count,
        a.k,
        a.rel_rmse,
        a.mean_cost,
        a.rel_eff,
        if a.low_k {
            " (fewer than two successful runs)"
        } else {
            ""
        }
    );
    Ok(())
}

fn export_ensemble(cfg: &BenchConfig, out: Option<&Path>) -> Result<(), Failure> {
    if cfg.method == Method::Mc {
        return Err(Failure::Config("crude Monte Carlo keeps no ensemble".into()));
    }
    let problem = problem_by_name(&cfg.problem, cfg.dim)?;
    let record = run_method(cfg.method, &problem, cfg, cfg.seed)?;
    let ens = record
        .final_ensemble
        .ok_or_else(|| Failure::Runtime("run produced no final ensemble".into()))?;
    match out {
        Some(path) => {
            let file = fs::File::create(path).map_err(io_failure(path))?;
            ens.write_csv(io::BufWriter::new(file)).map_err(io_failure(path))
        }
        None => {
            let mut lock = io::stdout().lock();
            ens.write_csv(&mut lock)
                .and_then(|_| lock.flush())
                .map_err(|e| Failure::Runtime(e.to_string()))
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::List => {
            list();
            Ok(())
        }
        Command::Run {
            problem,
            method,
            config,
            seed,
            dim,
            out,
        } => {
            let cfg = single_run_config(config.as_deref(), &problem, &method, seed, dim)?;
            run(&cfg, out.as_deref())
        }
        Command::Bench {
            config,
            reps,
            jobs,
            out_dir,
        } => bench(load_config(Some(&config))?, reps, jobs, out_dir.as_deref()),
        Command::ExportEnsemble {
            problem,
            method,
            seed,
            config,
            dim,
            out,
        } => {
            let cfg = single_run_config(config.as_deref(), &problem, &method, seed, dim)?;
            export_ensemble(&cfg, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
