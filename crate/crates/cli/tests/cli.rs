use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn laxcat(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_laxcat"))
        .args(args)
        .current_dir(dir)
        .env("LAXCAT_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn masked(path: &Path) -> String {
    let mut v = read_json(path);
    v.as_object_mut().unwrap().remove("timing").expect("timing key present");
    serde_json::to_string_pretty(&v).unwrap()
}

const QUICK: &str = r#"{"protocol": {"max_epochs": 3, "repeats": 2}, "model": {"filters": 4, "hidden": 4}}"#;

fn quick_setup(dir: &Path) {
    std::fs::write(dir.join("quick.json"), QUICK).unwrap();
    let out = laxcat(dir, &["synth", "--out", "d.mts", "--n", "80", "--seed", "7"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_is_byte_identical_and_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a = laxcat(d, &["synth", "--out", "a.mts", "--n", "100", "--seed", "7"]);
    let b = laxcat(d, &["synth", "--out", "b.mts", "--n", "100", "--seed", "7"]);
    assert_eq!(code(&a), 0);
    assert_eq!(code(&b), 0);
    assert!(String::from_utf8_lossy(&a.stdout).contains("negative=50 positive=50"));
    assert_eq!(std::fs::read(d.join("a.mts")).unwrap(), std::fs::read(d.join("b.mts")).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad_range = laxcat(d, &["synth", "--out", "x.mts", "--len-min", "20", "--len-max", "10"]);
    assert_eq!(code(&bad_range), 2);
    assert_eq!(code(&laxcat(d, &["frobnicate"])), 2);
    assert_eq!(code(&laxcat(d, &["synth"])), 2);

    quick_setup(d);
    let method = laxcat(d, &["baseline", "--data", "d.mts", "--method", "svm", "--report", "r.json"]);
    assert_eq!(code(&method), 2);
    std::fs::write(d.join("bad.json"), r#"{"model": {"filterz": 3}}"#).unwrap();
    let unknown = laxcat(
        d,
        &["train", "--data", "d.mts", "--config", "bad.json", "--out", "m.json", "--report", "r.json"],
    );
    assert_eq!(code(&unknown), 2);
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("filterz"));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = laxcat(d, &["train", "--data", "nope.mts", "--out", "m.json", "--report", "r.json"]);
    assert_eq!(code(&missing), 1);

    quick_setup(d);
    let args = ["train", "--data", "d.mts", "--config", "quick.json", "--out", "m.json", "--report", "r.json"];
    assert_eq!(code(&laxcat(d, &args)), 0);
    let far = laxcat(d, &["explain", "--data", "d.mts", "--model", "m.json", "--index", "80", "--out", "h.csv"]);
    assert_eq!(code(&far), 1);
}

#[test]
fn train_reports_are_deterministic_modulo_timing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    quick_setup(d);
    let args = |report: &'static str| {
        [
            "train", "--data", "d.mts", "--config", "quick.json", "--out", "m.json", "--report", report,
            "--ablate", "no_var_attention", "--deterministic",
        ]
    };
    assert_eq!(code(&laxcat(d, &args("r1.json"))), 0);
    assert_eq!(code(&laxcat(d, &args("r2.json"))), 0);
    assert_eq!(masked(&d.join("r1.json")), masked(&d.join("r2.json")));

    let report = read_json(&d.join("r1.json"));
    assert_eq!(report["result"]["ablation"], "no_var_attention");
    assert_eq!(report["result"]["test_accuracies"].as_array().unwrap().len(), 2);
    assert_eq!(report["timing"]["run_seconds"].as_array().unwrap().len(), 2);
}

#[test]
fn eval_explain_baseline_and_gridsearch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    quick_setup(d);
    let train = ["train", "--data", "d.mts", "--config", "quick.json", "--out", "m.json", "--report", "r.json"];
    assert_eq!(code(&laxcat(d, &train)), 0);

    let eval = laxcat(d, &["eval", "--data", "d.mts", "--model", "m.json", "--report", "e.json"]);
    assert_eq!(code(&eval), 0);
    let e = read_json(&d.join("e.json"));
    assert_eq!(e["result"]["indices"], 80);
    assert!(e["result"]["report"]["mean_aam"].is_number());
    let confusion = e["result"]["report"]["confusion"].as_array().unwrap();
    let total: u64 = confusion
        .iter()
        .flat_map(|r| r.as_array().unwrap())
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(total, 80);

    let explain = laxcat(d, &["explain", "--data", "d.mts", "--model", "m.json", "--index", "0", "--out", "h.csv"]);
    assert_eq!(code(&explain), 0);
    let csv = std::fs::read_to_string(d.join("h.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "interval_start,interval_end,var_1,var_2,var_3");
    let mass: f64 = lines
        .flat_map(|l| l.split(',').skip(2).map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .sum();
    assert!((mass - 1.0).abs() < 1e-9);
    assert!(d.join("h.json").exists());

    let lr = laxcat(d, &["baseline", "--data", "d.mts", "--method", "lr", "--report", "lr.json", "--repeats", "1"]);
    assert_eq!(code(&lr), 0);
    assert!(read_json(&d.join("lr.json"))["result"]["runs"][0]["weight_l2_norm"].as_f64().unwrap() > 0.0);

    std::fs::write(d.join("g.json"), r#"{"filters": [2, 3], "kernel_lens": [3, 5], "hidden": [2], "reg_alpha": [0.01]}"#)
        .unwrap();
    let grid = laxcat(
        d,
        &["gridsearch", "--data", "d.mts", "--grids", "g.json", "--config", "quick.json", "--report", "g_out.json", "--repeats", "1"],
    );
    assert_eq!(code(&grid), 0);
    assert_eq!(read_json(&d.join("g_out.json"))["result"]["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn data_without_masks_omits_aam() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    quick_setup(d);
    let text = std::fs::read_to_string(d.join("d.mts")).unwrap();
    let stripped: String = text
        .lines()
        .map(|l| match l.find(" mask ") {
            Some(k) if l.starts_with("label ") => l[..k].to_string(),
            _ => l.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
        + "\n";
    std::fs::write(d.join("plain.mts"), stripped).unwrap();
    let train = ["train", "--data", "plain.mts", "--config", "quick.json", "--out", "m.json", "--report", "r.json"];
    assert_eq!(code(&laxcat(d, &train)), 0);
    let eval = laxcat(d, &["eval", "--data", "plain.mts", "--model", "m.json", "--report", "e.json"]);
    assert_eq!(code(&eval), 0);
    assert!(read_json(&d.join("e.json"))["result"]["report"].get("mean_aam").is_none());
}
