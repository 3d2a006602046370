use std::fs;
use std::path::Path;
use std::process::Command;

use fesd::model_json::{model_from_json, model_to_json};
use fesd_core::catalog::{load_catalog, CATALOG_IDS};
use fesd_core::expr::Expr;
use fesd_core::model::{NonsmoothModel, VectorField};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn fesd(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_fesd")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

const TUTORIAL_RUN: [&str; 12] =
    ["simulate", "--model", "tutorial-a", "--scheme", "radau-iia", "--stages", "2", "--nfe", "2", "--T", "1", "--x0=-1"];

#[test]
fn simulate_writes_trajectory_and_switches() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (code, _, err) = fesd(&[&TUTORIAL_RUN[..], &["--out", out]].concat());
    assert_eq!(code, 0, "{}", err);
    let sw = csv_rows(&dir.path().join("switches.csv"));
    assert_eq!(sw.len(), 1);
    assert!((sw[0][0].parse::<f64>().unwrap() - 1.0 / 3.0).abs() < 1e-9);
    assert_eq!(sw[0][2], "crossing");
    let traj = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("t,x0\n"));
    let last = traj.lines().last().unwrap();
    let x: f64 = last.split(',').nth(1).unwrap().parse().unwrap();
    assert!((x - 2.0 / 3.0).abs() < 1e-9);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["exact_steps"], 1);
}

#[test]
fn identical_runs_give_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let (code, _, _) = fesd(&[&TUTORIAL_RUN[..], &["--nsim", "3", "--out", d.path().to_str().unwrap()]].concat());
        assert_eq!(code, 0);
    }
    for f in ["trajectory.csv", "switches.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{}", f);
    }
}

#[test]
fn complexity_report_for_robot_regions() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, _) = fesd(&["report-complexity", "--model", "robot-regions", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0);
    let rows = csv_rows(&dir.path().join("complexity.csv"));
    let find = |v: &str| rows.iter().find(|r| r[0] == "robot-regions" && r[1] == v).unwrap().clone();
    // columns: model, variant, n_psi, n_f, n_beta, n_alg, n_comp_pairs, n_comp_scalar, n_eq
    assert_eq!((find("step")[6].as_str(), find("step")[8].as_str()), ("3", "6"));
    assert_eq!((find("stewart")[6].as_str(), find("stewart")[8].as_str()), ("8", "9"));
    assert_eq!(rows.iter().filter(|r| r[0].starts_with("dense-")).count(), 12);
}

#[test]
fn order_study_against_closed_form_reference() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = fesd(&[
        "bench-order", "--model", "tutorial-c", "--nfe", "2", "--nsim", "2,4,8", "--orders", "1,2",
        "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{}", err);
    let rows = csv_rows(&dir.path().join("order_study.csv"));
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r[4].parse::<f64>().unwrap().is_finite()));
    let report = fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert!(report.contains("\"reference\": \"analytic\""));
}

#[test]
fn exit_codes_follow_failure_class() {
    assert_eq!(fesd(&["simulate", "--model", "no-such-model"]).0, 1);
    assert_eq!(fesd(&["simulate", "--model", "tutorial-a", "--no-such-flag"]).0, 1);
    assert_eq!(fesd(&["simulate", "--model", "tutorial-a", "--x0", "1,2"]).0, 1);
    assert_eq!(fesd(&["simulate", "--model", "tutorial-a", "--kappa", "2"]).0, 1);
    assert_eq!(fesd(&["--help"]).0, 0);

    // a field that overflows produces NaN residuals inside the solver
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("blowup.json");
    fs::write(
        &path,
        r#"{"name":"blowup","n_x":1,"switching":["x0"],
            "field":{"kind":"regions","sign_matrix":[[1],[-1]],"regions":[[0],[1]],
                     "fields":[["exp(x0*x0)"],["exp(x0*x0)"]]},
            "x0":[40.0],"horizon":1.0}"#,
    )
    .unwrap();
    let (code, _, err) = fesd(&["simulate", "--model", path.to_str().unwrap()]);
    assert_eq!(code, 2, "{}", err);
}

#[test]
fn validate_dumps_loadable_json() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, _) = fesd(&["validate", "--model", "union-2region", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0);
    let dumped = dir.path().join("model.json");
    assert_eq!(fesd(&["validate", "--model", dumped.to_str().unwrap()]).0, 0);

    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        r#"{"name":"bad","n_x":1,"switching":["x0"],
            "field":{"kind":"regions","sign_matrix":[[1],[1]],"regions":[[0],[1]],"fields":[["1"],["2"]]}}"#,
    )
    .unwrap();
    assert_eq!(fesd(&["validate", "--model", bad.to_str().unwrap()]).0, 1);
}

fn all_exprs(m: &NonsmoothModel) -> Vec<Expr> {
    let mut out = m.switching.clone();
    match &m.field {
        VectorField::Regions { fields, .. } => out.extend(fields.iter().flatten().cloned()),
        VectorField::StepComposite { rhs } => out.extend(rhs.iter().cloned()),
    }
    out
}

#[test]
fn catalog_models_survive_json_round_trip() {
    let mut rng = StdRng::seed_from_u64(3);
    for id in CATALOG_IDS {
        let m = load_catalog(id).unwrap().model;
        let (back, _) = model_from_json(&model_to_json(&m)).unwrap();
        let n_in = m.n_x + m.n_u + m.n_psi();
        for (a, b) in all_exprs(&m).iter().zip(all_exprs(&back)) {
            for _ in 0..100 {
                let x: Vec<f64> = (0..n_in).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let (va, vb) = (a.eval(&x).unwrap(), b.eval(&x).unwrap());
                assert!((va - vb).abs() <= 1e-15 * va.abs().max(1.0), "{}: {} vs {}", id, va, vb);
            }
        }
    }
}
