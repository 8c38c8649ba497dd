use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_statfem-ipla"))
        .args(args)
        .arg(format!("--output_dir={}", out.display()))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn metadata(dir: &Path, command: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(format!("{command}.json"))).unwrap()).unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}

#[test]
fn solve_writes_csv_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["solve", "--n_nodes=17"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let printed = String::from_utf8(o.stdout).unwrap();
    assert!(printed.trim().ends_with("solve.json"));

    let (header, rows) = read_csv(&dir.path().join("solve.csv"));
    assert_eq!(header, ["node", "x", "y", "boundary", "u"]);
    assert_eq!(rows.len(), 17);
    for r in &rows {
        let u: f64 = r[4].parse().unwrap();
        if r[3] == "true" {
            assert_eq!(u, 0.0);
        }
    }

    let meta = metadata(dir.path(), "solve");
    assert_eq!(meta["command"], "solve");
    assert_eq!(meta["problem"], "poisson-1d");
    assert_eq!(meta["config"]["n_nodes"], 17);
    assert_eq!(meta["outputs"][0], "solve.csv");
    assert!(meta["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn config_file_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{ "problem": "poisson-1d", "n_nodes": 21, "rank": 5 }"#).unwrap();
    let o = run(&["eigs", "--config", cfg.to_str().unwrap(), "--rank=7"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let meta = metadata(dir.path(), "eigs");
    assert_eq!(meta["config"]["n_nodes"], 21);
    assert_eq!(meta["results"]["rank"], 7);
    assert_eq!(meta["results"]["eigenvalues"].as_array().unwrap().len(), 7);
}

#[test]
fn subcommand_picks_its_problem() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["nonlinear", "--ipla.n_iters=20", "--replicates=1", "--nonlinear.particle_sweep=[1]"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(metadata(dir.path(), "nonlinear")["problem"], "nonlinear-1d");
    let (header, rows) = read_csv(&dir.path().join("nonlinear_summary.csv"));
    assert_eq!(header[0], "method");
    assert_eq!(rows.len(), 4);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad_json = dir.path().join("bad.json");
    fs::write(&bad_json, "{ not json").unwrap();
    let unknown = dir.path().join("unknown.json");
    fs::write(&unknown, r#"{ "n_nodez": 3 }"#).unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["solve", "--no_such_key=1"],
        vec!["solve", "--n_nodes=-4"],
        vec!["solve", "--n_nodes=1"],
        vec!["solve", "--problem=heat-3d"],
        vec!["solve", "positional"],
        vec!["solve", "--config", bad_json.to_str().unwrap()],
        vec!["solve", "--config", unknown.to_str().unwrap()],
        vec!["solve", "--config", "/nonexistent/cfg.json"],
        vec!["diffusivity", "--problem=poisson-disc"],
        vec!["frobnicate"],
    ];
    for args in cases {
        let o = run(&args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn numerical_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 2] = [
        &["solve", "--problem=nonlinear-1d", "--nonlinear.right_value=1e8"],
        &["posterior-variance", "--jitter=0", "--misfit_kernel.length_scale=1.0"],
    ];
    for args in cases {
        let o = run(args, dir.path());
        assert_eq!(o.status.code(), Some(3), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn runs_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "convergence",
        "--replicates=2",
        "--particle_ladder=[4,8,16]",
        "--ipla.n_iters=200",
        "--n_nodes=17",
    ];
    for dir in [&a, &b] {
        let o = run(&args, dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["convergence.csv", "convergence_fit.csv"] {
        let x = fs::read_to_string(a.path().join(file)).unwrap();
        let y = fs::read_to_string(b.path().join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between identical runs");
    }
    let ma = metadata(a.path(), "convergence");
    let mb = metadata(b.path(), "convergence");
    assert_eq!(ma["results"], mb["results"]);
}

#[test]
fn csv_values_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["eigs", "--n_nodes=33", "--rank=6"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let meta = metadata(dir.path(), "eigs");
    let from_json: Vec<f64> =
        meta["results"]["eigenvalues"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let (header, rows) = read_csv(&dir.path().join("eigs.csv"));
    let col = header.iter().position(|h| h == "lambda").expect("lambda column");
    let from_csv: Vec<f64> = rows.iter().map(|r| r[col].parse().unwrap()).collect();
    assert_eq!(from_csv.len(), from_json.len());
    for (a, b) in from_csv.iter().zip(&from_json) {
        assert!((a - b).abs() <= 1e-14 * a.abs(), "{a} vs {b}");
    }
    for (l, v) in from_json.iter().enumerate() {
        let exact = ((l + 1) as f64 * std::f64::consts::PI).powi(2);
        assert!((v - exact).abs() / exact < 0.05, "eigenvalue {l}: {v} vs {exact}");
    }
}
