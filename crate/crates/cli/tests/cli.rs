use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn levyrisk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_levyrisk")).args(args).output().expect("binary runs")
}

fn record(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not a record ({e}): {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
    })
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let out = levyrisk(&["simulate", "--seed", "7", "--n-paths", "50", "--jump-lambda", "2", "--jump-gamma", "0.1", "--csv", path_str(p)]);
        assert!(out.status.success());
    }
    let (a, b) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert!(String::from_utf8(a).unwrap().starts_with("path,t,dB,count_0"));
}

#[test]
fn simulate_without_csv_splits_streams() {
    let out = levyrisk(&["simulate", "--seed", "3", "--n-paths", "4", "--n-steps", "5"]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 5);
    let rec: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(rec["results"]["n_paths"], 4);
}

#[test]
fn risk_min_reports_the_closed_form() {
    let out = levyrisk(&["risk-min", "--mu", "0.05", "--sigma", "0.2", "--x0", "1", "--T", "1"]);
    assert!(out.status.success());
    let rec = record(&out);
    assert_eq!(rec["command"], "risk-min");
    assert!(rec["errors"].as_array().unwrap().is_empty());
    let r = &rec["results"];
    assert!((r["minimal_risk_analytic"].as_f64().unwrap() + 1.03125).abs() < 1e-12);
    assert!((r["game_value"].as_f64().unwrap() + 1.03125).abs() < 1e-12);
    let mc = r["minimal_risk_mc"]["mean"].as_f64().unwrap();
    let se = r["minimal_risk_mc"]["std_error"].as_f64().unwrap();
    assert!(se > 0.0 && (mc + 1.03125).abs() <= 3.0 * se);
}

#[test]
fn hjbi_verify_passes_with_and_without_jumps() {
    for extra in [&[][..], &["--jump-lambda", "0.5", "--jump-gamma", "-0.2"]] {
        let mut args = vec!["hjbi", "verify"];
        args.extend_from_slice(extra);
        let out = levyrisk(&args);
        assert_eq!(out.status.code(), Some(0), "{extra:?}");
        assert_eq!(record(&out)["results"]["passed"], true);
    }
}

#[test]
fn verify_battery_passes() {
    let out = levyrisk(&["verify"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(record(&out)["results"]["passed"], true);
}

#[test]
fn usage_and_config_errors_exit_two() {
    assert_eq!(levyrisk(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(levyrisk(&["risk-min", "--sigma", "0"]).status.code(), Some(2));
    assert_eq!(levyrisk(&["risk-min", "--x0", "-1"]).status.code(), Some(2));
    assert_eq!(levyrisk(&["simulate", "--jump-lambda", "1", "--jump-gamma", "-1.5"]).status.code(), Some(2));
    assert_eq!(levyrisk(&["risk-min", "--jump-lambda", "1", "--jump-gamma", "0.1"]).status.code(), Some(2));

    let out = levyrisk(&["risk", "--claim", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
    let rec = record(&out);
    assert!(rec["errors"][0].as_str().unwrap().contains("nonsense"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{ "command": "risk-min", "no_such_field": 1 }"#).unwrap();
    assert_eq!(levyrisk(&["--config", path_str(&bad)]).status.code(), Some(2));
    std::fs::write(&bad, "not json").unwrap();
    assert_eq!(levyrisk(&["risk-min", "--config", path_str(&bad)]).status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{ "command": "risk-min", "market": { "mu": 0.1, "sigma": 0.2 }, "n_paths": 2000, "seed": 5 }"#).unwrap();

    let rec = record(&levyrisk(&["--config", path_str(&cfg)]));
    assert_eq!(rec["seed"], 5);
    assert!((rec["results"]["minimal_risk_analytic"].as_f64().unwrap() + 1.125).abs() < 1e-12);

    let rec = record(&levyrisk(&["--config", path_str(&cfg), "--mu", "0.05", "--seed", "6"]));
    assert_eq!(rec["seed"], 6);
    assert_eq!(rec["config"]["n_paths"], 2000);
    assert!((rec["results"]["minimal_risk_analytic"].as_f64().unwrap() + 1.03125).abs() < 1e-12);
}

#[test]
fn a_record_replays_to_the_same_results() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first.json");
    let out = levyrisk(&["risk", "--claim", "call:1", "--driver", "entropic", "--n-paths", "3000", "--n-steps", "20", "--seed", "11", "--out", path_str(&first)]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let a: Value = serde_json::from_str(&std::fs::read_to_string(&first).unwrap()).unwrap();

    let b = record(&levyrisk(&["--config", path_str(&first)]));
    assert_eq!(a["results"], b["results"]);
    assert_eq!(a["config"]["output"], path_str(&first));
}

#[test]
fn solve_bsde_methods_agree_on_a_call() {
    let common = ["--claim", "call:1", "--driver", "replication", "--mu", "0.06", "--r", "0.02", "--n-paths", "20000", "--n-steps", "25"];
    let mut lin = vec!["solve-bsde", "--method", "linear"];
    lin.extend_from_slice(&common);
    let mut reg = vec!["solve-bsde"];
    reg.extend_from_slice(&common);
    let a = record(&levyrisk(&lin));
    let b = record(&levyrisk(&reg));
    let (ya, sa) = (a["results"]["y0"]["mean"].as_f64().unwrap(), a["results"]["y0"]["std_error"].as_f64().unwrap());
    let yb = b["results"]["y0"]["mean"].as_f64().unwrap();
    assert!((ya - yb).abs() <= 4.0 * sa, "{ya} vs {yb} (s.e. {sa})");
    // a = 1 call with r = 0.02, sigma = 0.2, T = 1 costs about 0.0893
    assert!((ya - 0.0893).abs() < 4.0 * sa + 1e-3, "{ya}");

    let mut bad = vec!["solve-bsde", "--method", "linear", "--driver", "entropic"];
    bad.extend_from_slice(&common[..2]);
    assert_eq!(levyrisk(&bad).status.code(), Some(2));
}

#[test]
fn hjbi_solve_writes_a_control_table() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("controls.csv");
    let out = levyrisk(&["hjbi", "solve", "--jump-lambda", "0.5", "--jump-gamma", "-0.2", "--n-steps", "10", "--csv", path_str(&csv)]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "s,theta0,theta1_0,w,kappa,residual");
    assert_eq!(lines.count(), 11);
    assert!(record(&out)["results"]["max_residual"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn newsvendor_reports_its_residuals() {
    let out = levyrisk(&["newsvendor", "--nv-steps", "50"]);
    let rec = record(&out);
    let r = &rec["results"];
    assert!(r["sales_residual"].as_f64().unwrap() <= 1e-8);
    assert!(r["profit"].as_f64().unwrap() > 0.0);
    // exit status follows the leader residual
    let failing = r["max_leader_residual"].as_f64().unwrap() > 1e-8;
    assert_eq!(out.status.code(), Some(if failing { 1 } else { 0 }));
    assert_eq!(rec["errors"].as_array().unwrap().is_empty(), !failing);
}
