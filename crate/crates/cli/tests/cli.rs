use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn jointmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointmix")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the default design with the given size, group weights and effects.
fn design_file(dir: &Path, n: usize, single_group: bool, seed: u64) -> PathBuf {
    let base = dir.join("base");
    let out = jointmix(&["simulate", "--out", s(&base)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut design: Value = serde_json::from_str(&fs::read_to_string(base.join("design.json")).unwrap()).unwrap();
    design["n"] = n.into();
    design["seed"] = seed.into();
    if single_group {
        design["true_params"]["theta"] = serde_json::json!([0.0]);
        design["true_params"]["pi"] = serde_json::json!([1.0]);
    }
    let path = dir.join(format!("design_{n}_{single_group}_{seed}.json"));
    fs::write(&path, serde_json::to_string_pretty(&design).unwrap()).unwrap();
    path
}

fn simulate(dir: &Path, design: &Path, name: &str) -> PathBuf {
    let out_dir = dir.join(name);
    let out = jointmix(&["simulate", "--design", s(design), "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out_dir
}

#[test]
fn ten_subject_fixture_fits_and_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let ord = dir.path().join("ordinal.csv");
    let surv = dir.path().join("survival.csv");
    let mut o = String::from("subject_id,time_index,item,level\n");
    let mut v = String::from("subject_id,time,event,covariate\n");
    for i in 0..10 {
        for m in 1..=2 {
            for j in 1..=2 {
                o.push_str(&format!("p{i},{m},{j},{}\n", 1 + (i + m + j) % 3));
            }
        }
        v.push_str(&format!("p{i},{},{},{}\n", 1.0 + i as f64 * 0.7, u8::from(i % 4 != 3), (i as f64 - 4.5) / 3.0));
    }
    fs::write(&ord, o).unwrap();
    fs::write(&surv, v).unwrap();
    let out_dir = dir.path().join("fit");
    let out = jointmix(&["fit", "--ordinal", s(&ord), "--survival", s(&surv), "--groups", "1", "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "estimates.csv",
        "fit.json",
        "posterior.csv",
        "hazard.csv",
        "information.csv",
        "loglik_trace.csv",
        "params.json",
    ] {
        assert!(out_dir.join(f).is_file(), "missing {f}");
    }
    let est = fs::read_to_string(out_dir.join("estimates.csv")).unwrap();
    assert!(est.starts_with("parameter,estimate,std_error\n"));
    assert!(est.contains("delta1,"));
}

#[test]
fn missing_survival_subject_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let ord = dir.path().join("o.csv");
    let surv = dir.path().join("s.csv");
    fs::write(&ord, "subject_id,time_index,item,level\na,1,1,1\nghost,1,1,2\n").unwrap();
    fs::write(&surv, "subject_id,time,event,covariate\na,1,1,0\n").unwrap();
    let out = jointmix(&["fit", "--ordinal", s(&ord), "--survival", s(&surv), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ghost"));
}

#[test]
fn schema_violation_reports_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let ord = dir.path().join("o.csv");
    let surv = dir.path().join("s.csv");
    fs::write(&ord, "subject_id,time_index,item,level\na,1,1,1\n").unwrap();
    fs::write(&surv, "subject_id,time,event,covariate\na,-1,1,0\n").unwrap();
    let out = jointmix(&["fit", "--ordinal", s(&ord), "--survival", s(&surv), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 2") && err.contains("`time`"), "{err}");
}

#[test]
fn one_iteration_is_non_convergence_with_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let design = design_file(dir.path(), 80, false, 3);
    let data = simulate(dir.path(), &design, "data");
    let out_dir = dir.path().join("fit");
    let out = jointmix(&[
        "fit",
        "--ordinal",
        s(&data.join("ordinal.csv")),
        "--survival",
        s(&data.join("survival.csv")),
        "--max-iter",
        "1",
        "--restarts",
        "1",
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = fs::read_to_string(out_dir.join("loglik_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2);
}

#[test]
fn simulate_is_reproducible_and_round_trips_into_fit() {
    let dir = tempfile::tempdir().unwrap();
    let design = design_file(dir.path(), 120, false, 11);
    let a = simulate(dir.path(), &design, "a");
    let b = simulate(dir.path(), &design, "b");
    for f in ["ordinal.csv", "survival.csv", "latent.csv", "truth.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let fit = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = jointmix(&[
            "fit",
            "--ordinal",
            s(&a.join("ordinal.csv")),
            "--survival",
            s(&a.join("survival.csv")),
            "--restarts",
            "2",
            "--seed",
            "5",
            "--out",
            s(&out_dir),
        ]);
        assert!(matches!(out.status.code(), Some(0 | 2)), "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    };
    let (f1, f2) = (fit("fit1"), fit("fit2"));
    for f in ["estimates.csv", "fit.json", "posterior.csv", "hazard.csv", "information.csv", "loglik_trace.csv"] {
        assert_eq!(fs::read(f1.join(f)).unwrap(), fs::read(f2.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let design = design_file(dir.path(), 60, false, 2);
    let data = simulate(dir.path(), &design, "data");
    let cfg = dir.path().join("cfg.json");
    let out_dir = dir.path().join("fit");
    let body = serde_json::json!({
        "ordinal": data.join("ordinal.csv"),
        "survival": data.join("survival.csv"),
        "max_iter": 500,
        "restarts": 1,
        "out": out_dir,
    });
    fs::write(&cfg, body.to_string()).unwrap();
    let out = jointmix(&["fit", "--config", s(&cfg), "--max-iter", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let fit: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit["config"]["max_iter"], 1);
    assert_eq!(fit["config"]["n_restarts"], 1);

    fs::write(&cfg, r#"{"unknown_key": 1}"#).unwrap();
    assert_eq!(jointmix(&["fit", "--config", s(&cfg)]).status.code(), Some(1));
}

#[test]
fn mc_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let design = design_file(dir.path(), 60, true, 4);
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = jointmix(&[
            "mc",
            "--design",
            s(&design),
            "--replications",
            "4",
            "--restarts",
            "1",
            "--seed",
            "9",
            "--out",
            s(&out_dir),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["mc_report.json", "replications.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let report: Value = serde_json::from_str(&fs::read_to_string(a.join("mc_report.json")).unwrap()).unwrap();
    assert_eq!(report["replications"], 4);
    assert_eq!(report["successes"].as_u64().unwrap() + report["failures"].as_u64().unwrap(), 4);
}

#[test]
fn check_on_single_group_truth_passes_exact_checks() {
    let dir = tempfile::tempdir().unwrap();
    let design = design_file(dir.path(), 300, true, 8);
    let data = simulate(dir.path(), &design, "data");
    let out_dir = dir.path().join("check");
    let out = jointmix(&[
        "check",
        "--ordinal",
        s(&data.join("ordinal.csv")),
        "--survival",
        s(&data.join("survival.csv")),
        "--params",
        s(&data.join("truth.json")),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let diag: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("diagnostics.json")).unwrap()).unwrap();
    let checks = diag["checks"].as_array().unwrap();
    let find = |name: &str| checks.iter().find(|c| c["name"] == name).unwrap().clone();
    assert_eq!(checks.len(), 4);
    assert_eq!(find("contraction")["passed"], true);
    assert_eq!(find("efficient_score_equivalence")["passed"], true);
    assert!(find("information_identity")["values"]["relative_frobenius_gap"].as_f64().unwrap().is_finite());
}

#[test]
fn check_without_params_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let design = design_file(dir.path(), 30, true, 1);
    let data = simulate(dir.path(), &design, "data");
    let out = jointmix(&[
        "check",
        "--ordinal",
        s(&data.join("ordinal.csv")),
        "--survival",
        s(&data.join("survival.csv")),
        "--params",
        s(&dir.path().join("nope.json")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
