use std::path::Path;
use std::process::{Command, Output};

fn aggflex(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aggflex"))
        .args(args)
        .current_dir(dir)
        .env_remove("AGGFLEX_SOLVER")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = aggflex(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn generate_approximate_verify() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--n", "50", "--seed", "7", "-o", "s.json"]);
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("s.json")).unwrap()).unwrap();
    assert_eq!(s["evs"].as_array().unwrap().len(), 50);
    assert_eq!(s["T"], 18);
    assert_eq!(s["meta"]["seed"], 7);

    ok(d, &["generate", "--n", "6", "--seed", "1", "--periods", "6", "-o", "small.json"]);
    ok(d, &["approximate", "--scenario", "small.json", "--k", "1", "-o", "m.json"]);
    let out = ok(d, &["verify", "--model", "m.json", "--samples", "100"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("100/100 contained samples"));

    ok(
        d,
        &[
            "approximate",
            "--scenario",
            "small.json",
            "--k",
            "2",
            "--norm",
            "linf",
            "--variant",
            "clusterwise",
            "--representation",
            "power",
            "--with-certificates",
            "-o",
            "m2.json",
        ],
    );
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("m2.json")).unwrap()).unwrap();
    assert!(m["map"]["lambda"].is_array());
    assert_eq!(m["grid"]["representation"], "power");
    ok(d, &["verify", "--model", "m2.json", "--samples", "20"]);
}

#[test]
fn peak_shave_and_disaggregate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--n", "5", "--seed", "2", "--periods", "4", "-o", "s.json"]);
    ok(d, &["approximate", "--scenario", "s.json", "--k", "2", "-o", "m.json"]);
    ok(d, &["peak-shave", "--exact", "--scenario", "s.json", "-o", "exact.json"]);
    ok(d, &["peak-shave", "--model", "m.json", "-o", "model.json"]);
    let read = |f: &str| -> serde_json::Value { serde_json::from_str(&std::fs::read_to_string(d.join(f)).unwrap()).unwrap() };
    let (exact, model) = (read("exact.json"), read("model.json"));
    assert!(model["peak_kw"].as_f64().unwrap() >= exact["peak_kw"].as_f64().unwrap() - 1e-6);

    std::fs::write(d.join("u.json"), model["aggregate_kw"].to_string()).unwrap();
    let out = ok(d, &["disaggregate", "--model", "m.json", "--profile", "u.json"]);
    let split: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(split["profiles_kw"].as_array().unwrap().len(), 5);
    assert!(split["max_abs_residual_kw"].as_f64().unwrap() < 1e-7);

    // A profile far outside B is a validation error.
    std::fs::write(d.join("far.json"), "[1000, 1000, 1000, 1000]").unwrap();
    assert_eq!(aggflex(d, &["disaggregate", "--model", "m.json", "--profile", "far.json"]).status.code(), Some(1));

    ok(d, &["plot", "profiles", "--model", "m.json", "-o", "p.svg", "--data", "p.csv"]);
    assert!(std::fs::read_to_string(d.join("p.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn gap_is_byte_identical_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = ["gap", "--k-range", "1..2", "--trials", "2", "--n", "5", "--periods", "4", "--seed", "3"];
    let a = ok(d, &[&args[..], &["-o", "r1.csv"]].concat());
    ok(d, &[&args[..], &["-o", "r2.csv", "--summary", "s.csv"]].concat());
    let (r1, r2) = (std::fs::read(d.join("r1.csv")).unwrap(), std::fs::read(d.join("r2.csv")).unwrap());
    assert_eq!(r1, r2);
    let text = String::from_utf8(r1).unwrap();
    assert!(text.starts_with(
        "trial,seed,K,variant,norm,J_star_kw,J_K_kw,gap_percent,surrogate_objective,cluster_ms,solve_ms,shave_ms,status\n"
    ));
    assert_eq!(text.lines().count(), 5);
    assert!(String::from_utf8_lossy(&a.stderr).contains("K=1"));
    ok(d, &["plot", "gap", "--results", "r1.csv", "-o", "g.svg", "--data", "box.csv"]);
    assert!(std::fs::read_to_string(d.join("box.csv")).unwrap().starts_with("k,count,failures,min,q1,median,q3,max"));
}

#[test]
fn errors_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = aggflex(d, &["--json", "approximate", "--scenario", "missing.json", "--k", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");
    assert_eq!(err["error"]["exit_code"], 1);

    assert_eq!(aggflex(d, &["no-such-command"]).status.code(), Some(1));
    let out = aggflex(d, &["--json", "approximate"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(serde_json::from_slice::<serde_json::Value>(&out.stderr).unwrap()["error"]["kind"], "usage");

    ok(d, &["generate", "--n", "3", "--periods", "3", "-o", "s.json"]);
    let out = aggflex(d, &["--json", "approximate", "--scenario", "s.json", "--k", "4"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(serde_json::from_slice::<serde_json::Value>(&out.stderr).unwrap()["error"]["kind"], "config");

    // The simplex backend cannot take the default L2 objective.
    let out = Command::new(env!("CARGO_BIN_EXE_aggflex"))
        .args(["--json", "approximate", "--scenario", "s.json", "--k", "1"])
        .current_dir(d)
        .env("AGGFLEX_SOLVER", "simplex")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(serde_json::from_slice::<serde_json::Value>(&out.stderr).unwrap()["error"]["kind"], "backend_unsupported");

    let out = Command::new(env!("CARGO_BIN_EXE_aggflex"))
        .args(["generate", "--n", "2"])
        .current_dir(d)
        .env("AGGFLEX_SOLVER", "gurobi")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_sets_solver_and_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), "[solver]\nbackend = \"simplex\"\n\n[experiment.ranges]\nperiods = 5\ndelta = 1.0\n")
        .unwrap();
    ok(d, &["--config", "c.toml", "generate", "--n", "4", "-o", "s.json"]);
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("s.json")).unwrap()).unwrap();
    assert_eq!(s["T"], 5);
    ok(d, &["--config", "c.toml", "approximate", "--scenario", "s.json", "--k", "1", "--norm", "l1", "-o", "m.json"]);
    std::fs::write(d.join("bad.toml"), "[solver]\ncolour = 1\n").unwrap();
    assert_eq!(aggflex(d, &["--config", "bad.toml", "generate", "--n", "2"]).status.code(), Some(1));
}
