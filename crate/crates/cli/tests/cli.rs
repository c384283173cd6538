use std::fs;
use std::process::{Command, Output};

fn cbree(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbree"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &tempfile::TempDir, text: &str) -> String {
    let path = dir.path().join("bench.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn list_names_everything() {
    let out = cbree(&["list"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in [
        "linear",
        "convex",
        "oscillator",
        "flowrate",
        "cbree",
        "cbree-vmfn",
        "enkf",
        "mc",
    ] {
        assert!(text.contains(name), "{name} missing from:\n{text}");
    }
}

#[test]
fn run_writes_record_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, "J = 500\n");
    let out_dir = dir.path().join("run");
    let out = cbree(&[
        "run",
        "--problem",
        "linear",
        "--method",
        "cbree",
        "--config",
        &cfg,
        "--seed",
        "5",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["method"], "cbree");
    assert_eq!(record["seed"], 5);
    let trace = fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    assert!(trace.starts_with("iter,s,beta,"));
    assert_eq!(trace.lines().count(), record["trace"].as_array().unwrap().len() + 1);
}

#[test]
fn run_to_stdout_is_deterministic() {
    let args = ["run", "--problem", "linear", "--method", "enkf", "--seed", "3"];
    let (a, b) = (cbree(&args), cbree(&args));
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let record: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(record["method"], "enkf");
}

#[test]
fn bench_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        &dir,
        "# small run\nmethod = cbree\nproblem = linear\nJ = 400\nn_obs = 2\n",
    );
    let out_dir = dir.path().join("bench");
    let out = cbree(&[
        "bench",
        "--config",
        &cfg,
        "--reps",
        "3",
        "--jobs",
        "2",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs = fs::read_to_string(out_dir.join("runs.csv")).unwrap();
    assert_eq!(
        runs.lines().next().unwrap(),
        "rep,seed,estimate,cost,iterations,termination"
    );
    assert_eq!(runs.lines().count(), 4);
    let agg = fs::read_to_string(out_dir.join("aggregate.csv")).unwrap();
    assert_eq!(
        agg.lines().next().unwrap(),
        "method,problem,J,delta_target,eps_target,n_obs,K,success_rate,mse,rel_rmse,mean_cost,rel_eff"
    );
    assert!(agg.lines().nth(1).unwrap().starts_with("cbree,linear,400,1,1,2,3,"));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(json["k"], 3);
}

#[test]
fn export_ensemble_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ens.csv");
    let out = cbree(&[
        "export-ensemble",
        "--problem",
        "convex",
        "--method",
        "enkf",
        "--seed",
        "2",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "x1,x2,g");
    assert_eq!(text.lines().count(), 2001);
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    for text in ["bogus = 1\n", "J = 10\nJ = 20\n", "n_obs = 1\n", "method = nope\n"] {
        let cfg = write_config(&dir, text);
        let out = cbree(&["bench", "--config", &cfg]);
        assert_eq!(out.status.code(), Some(2), "{text}");
    }
    assert_eq!(
        cbree(&["run", "--problem", "nowhere", "--method", "cbree"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        cbree(&["bench", "--config", "/nonexistent/file.cfg"]).status.code(),
        Some(2)
    );
    assert_eq!(
        cbree(&["export-ensemble", "--problem", "linear", "--method", "mc"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(cbree(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    // a regular file where the output directory should go
    let blocker = dir.path().join("taken");
    fs::write(&blocker, "").unwrap();
    let out = cbree(&[
        "run",
        "--problem",
        "linear",
        "--method",
        "mc",
        "--out",
        blocker.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}
