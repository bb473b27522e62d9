use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn calshift(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calshift"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn calshift")
}

fn ok_json(out: Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

#[test]
fn gen_fit_apply_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = calshift(&["gen", "--samples", "400", "--seed", "4", "--out-dir", "data"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["id_calib", "id_test", "shifted_0", "ood_pool"] {
        assert!(d.join("data").join(format!("{f}.jsonl")).exists(), "{f}");
    }

    let out = calshift(
        &[
            "fit", "--calib", "data/id_calib.jsonl", "--method", "ts", "--ood-pool", "data/ood_pool.jsonl",
            "--out", "ts_ood.json",
        ],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model: Value = serde_json::from_str(&std::fs::read_to_string(d.join("ts_ood.json")).unwrap()).unwrap();
    assert_eq!(model["name"], "TS+OOD");

    let raw = ok_json(calshift(&["eval", "--input", "data/shifted_0.jsonl"], d));
    let cal = ok_json(calshift(
        &[
            "eval", "--input", "data/shifted_0.jsonl", "--model", "ts_ood.json", "--reliability-csv", "rel.csv",
        ],
        d,
    ));
    // temperature scaling never changes the predicted class
    assert_eq!(raw["accuracy"], cal["accuracy"]);
    assert!(cal["ece"].as_f64().unwrap() < raw["ece"].as_f64().unwrap());
    let rel = std::fs::read_to_string(d.join("rel.csv")).unwrap();
    assert_eq!(rel.lines().next().unwrap(), "bin_lo,bin_hi,count,conf,acc");
    assert_eq!(rel.lines().count(), 16);

    let out = calshift(&["apply", "--model", "ts_ood.json", "--input", "data/id_test.jsonl"], d);
    assert!(out.status.success());
    let rows: Vec<Vec<f64>> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 400);
    assert!(rows.iter().all(|r| r.len() == 5 && (r.iter().sum::<f64>() - 1.0).abs() < 1e-9));
}

#[test]
fn ensemble_and_dac_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for seed in ["1", "2"] {
        let out = calshift(&["gen", "--samples", "300", "--seed", seed, "--out-dir", seed], d);
        assert!(out.status.success());
    }
    for order in ["pre", "post"] {
        let report = ok_json(calshift(
            &[
                "ensemble", "--members", "1/id_calib.jsonl,2/id_calib.jsonl", "--eval-members",
                "1/shifted_0.jsonl,2/shifted_0.jsonl", "--ensemble-order", order, "--method", "ts",
            ],
            d,
        ));
        assert!(report["ece"].as_f64().unwrap() >= 0.0);
    }

    let out = calshift(
        &["fit", "--calib", "1/id_calib.jsonl", "--method", "ts", "--dac", "--dac-k", "5", "--out", "dac.json"],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = ok_json(calshift(&["eval", "--input", "1/shifted_0.jsonl", "--model", "dac.json"], d));
    assert!(report["nll"].as_f64().unwrap().is_finite());
}

#[test]
fn grid_then_stats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let plan = r#"{
        "datasets": [{"name": "toy", "synth": {"samples_per_split": 200}}],
        "calibrators": [{"method": "none"}, {"method": "ts"}, {"method": "ts", "ood": true}],
        "seeds": [0, 1, 2, 3]
    }"#;
    std::fs::write(d.join("plan.json"), plan).unwrap();
    let out = calshift(&["grid", "--plan", "plan.json", "--out-dir", "out"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let s = ok_json(calshift(&["stats", "--report", "out/results.csv", "--metric", "ece"], d));
    assert_eq!(s["treatments"].as_array().unwrap().len(), 3);
    assert_eq!(s["blocks"], 4);
    let p = s["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = calshift(&["eval", "--input", "missing.jsonl"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    std::fs::write(d.join("bad.jsonl"), "{\"logits\": [1.0, NaN], \"label\": 0}\n").unwrap();
    assert!(!calshift(&["eval", "--input", "bad.jsonl"], d).status.success());

    let out = calshift(&["gen", "--samples", "50", "--out-dir", "g"], d);
    assert!(out.status.success());
    let out = calshift(&["fit", "--calib", "g/id_calib.jsonl", "--method", "bogus", "--out", "m.json"], d);
    assert_eq!(out.status.code(), Some(1));
}
