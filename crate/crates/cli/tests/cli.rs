use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const RECORD: &str = r#"{"quat_wxyz":[1,0,0,0],"t_m":[0.01,-0.02,1.5],"f_px":600,"img_wh":[640,480],"bbox":[250,190,390,290]}"#;

const CONFIG: &str = r#"{"n_trials": 6, "iterations": 4, "seed": 3,
  "predictor": {"kind": "clamped_noisy",
    "noise": {"x_px": 6, "y_px": 6, "z_log": 0.05, "rot_deg": 15, "f_log": 0.15},
    "clamp": {"pixel": 20, "log_depth": 0.1, "rot_deg": 5, "log_focal": 0.05}}}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_posefocal"));
    c.env("SOURCE_DATE_EPOCH", "1700000000");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Annotation lines with some spread in every field.
fn annotations(n: usize) -> String {
    (0..n)
        .map(|i| {
            let a = i as f64 * 0.37;
            let (c, sn) = ((a * 0.1).cos(), (a * 0.1).sin());
            format!(
                r#"{{"quat_wxyz":[{c},{sn},0,0],"t_m":[{},{},{}],"f_px":{},"img_wh":[640,480],"bbox":[250,190,390,290]}}"#,
                0.05 * a.sin(),
                0.04 * (1.3 * a).cos(),
                1.5 + 0.3 * (0.7 * a).sin(),
                600.0 + 80.0 * (1.1 * a).cos(),
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn fit_dist_three_records() {
    let dir = TempDir::new().unwrap();
    let text = [RECORD, r#"{"quat_wxyz":[1,0,0,0],"t_m":[0.03,0.0,1.7],"f_px":650,"img_wh":[640,480],"bbox":[250,190,390,290]}"#,
        r#"{"quat_wxyz":[1,0,0,0],"t_m":[-0.02,0.02,1.2],"f_px":580,"img_wh":[640,480],"bbox":[250,190,390,290]}"#]
        .join("\n");
    let path = write(dir.path(), "three.jsonl", &text);
    // Enough for the Gaussians, too few for a rotation fit.
    let out = run(&["fit-dist", s(&path), "--kind", "parametric"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sample") || err.contains("insufficient"), "{err}");
    let doc: Value = serde_json::from_str(&ok(&["fit-dist", s(&path), "--kind", "nonparametric"])).unwrap();
    assert_eq!(doc["distribution"]["kind"], "nonparametric");
    assert_eq!(doc["distribution"]["records"].as_array().unwrap().len(), 3);
}

#[test]
fn fit_dist_rejects_empty_file() {
    let dir = TempDir::new().unwrap();
    let path = write(dir.path(), "empty.jsonl", "\n\n");
    let out = run(&["fit-dist", s(&path), "--kind", "parametric"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no records"));
}

#[test]
fn fit_dist_reports_bad_line() {
    let dir = TempDir::new().unwrap();
    let path = write(dir.path(), "bad.jsonl", &format!("{RECORD}\n{{\"quat_wxyz\": 1}}\n"));
    let out = run(&["fit-dist", s(&path), "--kind", "nonparametric"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn fit_then_sample() {
    let dir = TempDir::new().unwrap();
    let ann = write(dir.path(), "ann.jsonl", &annotations(60));
    let dist = dir.path().join("dist.json");
    ok(&["fit-dist", s(&ann), "--kind", "parametric", "--out", s(&dist)]);
    let fitted: Value = serde_json::from_str(&std::fs::read_to_string(&dist).unwrap()).unwrap();
    assert_eq!(fitted["manifest"]["inputs"][0]["sha256"].as_str().unwrap().len(), 64);

    let text = ok(&["sample", s(&dist), "-n", "100000", "--seed", "5", "--format", "csv"]);
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# manifest: "));
    assert_eq!(lines.next().unwrap(), "qw,qx,qy,qz,tx_m,ty_m,tz_m,f_px");
    let mut count = 0;
    for line in lines {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!(v[6] > 0.0 && v[7] > 0.0);
        count += 1;
    }
    assert_eq!(count, 100_000);

    let json = ok(&["sample", s(&dist), "-n", "3", "--seed", "5"]);
    let lines: Vec<Value> = json.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].get("manifest").is_some());
    assert!(lines[1].get("focal_px").is_some());
}

#[test]
fn sample_zero_and_same_seed() {
    let dir = TempDir::new().unwrap();
    let dist = write(dir.path(), "u.json", r#"{"kind":"uniform","xy_box_m":0.15,"z_range_m":[0.8,2.4],"f_range_px":[200,1000]}"#);
    let empty = ok(&["sample", s(&dist), "-n", "0"]);
    assert_eq!(empty.lines().count(), 1);
    let a = ok(&["sample", s(&dist), "-n", "50", "--seed", "9"]);
    let b = ok(&["sample", s(&dist), "-n", "50", "--seed", "9", "--workers", "1"]);
    let c = ok(&["sample", s(&dist), "-n", "50", "--seed", "10"]);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn simulate_outputs() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "sim.json", CONFIG);
    let doc: Value = serde_json::from_str(&ok(&["simulate", "--config", s(&cfg)])).unwrap();
    let arms = doc["report"]["arms"].as_array().unwrap();
    assert_eq!(arms.len(), 2);
    assert_eq!(doc["manifest"]["seed"], 3);
    let over: Value = serde_json::from_str(&ok(&["simulate", "--config", s(&cfg), "--seed", "8"])).unwrap();
    assert_eq!(over["manifest"]["seed"], 8);
    let csv = ok(&["simulate", "--config", s(&cfg), "--format", "csv"]);
    assert_eq!(
        csv.lines().nth(1).unwrap(),
        "rule,iteration,median_e_r,median_e_t,median_e_rt,median_e_f,median_e_p"
    );
    assert_eq!(csv.lines().count(), 2 + 2 * 5);
}

#[test]
fn simulate_config_errors_name_the_field() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "bad.json",
        r#"{"n_trials": 2, "iterations": 3, "predictor": {"kind": "clamped", "clamp": {"pixel": "wide", "log_depth": 0.1, "rot_deg": 5, "log_focal": 0.05}}}"#,
    );
    let out = run(&["simulate", "--config", s(&cfg)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`predictor`") && err.contains("\"wide\""), "{err}");
    let cfg = write(dir.path(), "typo.json", r#"{"n_trials": 2, "iterations": 3, "predictor": {"kind": "oracle"}, "model": {"size_m": [1, 1, 1], "n_points": -4}}"#);
    let err = String::from_utf8_lossy(&run(&["simulate", "--config", s(&cfg)]).stderr).to_string();
    assert!(err.contains("model.n_points"), "{err}");
    let out = run(&["simulate"]);
    assert!(!out.status.success());
}

fn pair(pred: &str, gt: &str, model: &str) -> String {
    format!(
        r#"{{"pred": {pred}, "gt": {gt}, "model": "{model}", "gt_bbox": [280, 200, 360, 280], "img_wh": [640, 480]}}"#
    )
}

const GT: &str = r#"{"quat_wxyz": [1, 0, 0, 0], "t_m": [0, 0, 2], "focal_px": 600}"#;
const CUBE: &str = "[[-0.1,-0.1,-0.1],[0.1,-0.1,-0.1],[-0.1,0.1,-0.1],[0.1,0.1,-0.1],[-0.1,-0.1,0.1],[0.1,-0.1,0.1],[-0.1,0.1,0.1],[0.1,0.1,0.1]]";

#[test]
fn evaluate_perfect_predictions() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "cube.json", CUBE);
    let pairs = write(dir.path(), "pairs.jsonl", &pair(GT, GT, "cube.json"));
    let doc: Value = serde_json::from_str(&ok(&["evaluate", s(&pairs)])).unwrap();
    let summary = &doc["summary"];
    for k in ["median_e_r", "median_e_t", "median_e_rt", "median_e_f", "median_e_p"] {
        assert_eq!(summary[k].as_f64().unwrap(), 0.0, "{k}");
    }
    assert_eq!(summary["acc_r"], 1.0);
    assert_eq!(summary["acc_p"], 1.0);
    assert_eq!(doc["manifest"]["inputs"].as_array().unwrap().len(), 2);
}

#[test]
fn evaluate_hand_computed_pairs() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "cube.json", CUBE);
    let far = r#"{"quat_wxyz": [1, 0, 0, 0], "t_m": [0, 0, 2.2], "focal_px": 660}"#;
    // 90 degrees about z.
    let turned = r#"{"quat_wxyz": [0.7071067811865476, 0, 0, 0.7071067811865476], "t_m": [0, 0, 2], "focal_px": 600}"#;
    let text = [pair(GT, GT, "cube.json"), pair(far, GT, "cube.json"), pair(turned, GT, "cube.json")].join("\n");
    let pairs = write(dir.path(), "pairs.jsonl", &text);
    let hist = dir.path().join("hist.csv");
    let doc: Value = serde_json::from_str(&ok(&["evaluate", s(&pairs), "--histograms", s(&hist)])).unwrap();
    let recs = doc["records"].as_array().unwrap();
    assert!((recs[1]["e_t"].as_f64().unwrap() - 0.1).abs() < 1e-12);
    assert!((recs[1]["e_f"].as_f64().unwrap() - 60.0 / 600.0).abs() < 1e-12);
    assert!((recs[2]["e_r"].as_f64().unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    let summary = &doc["summary"];
    // Lower median of {0, 0, pi/2} and {0, 0.1, 0}.
    assert_eq!(summary["median_e_r"].as_f64().unwrap(), 0.0);
    assert_eq!(summary["median_e_t"].as_f64().unwrap(), 0.0);
    assert!((summary["acc_r"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    let h = std::fs::read_to_string(&hist).unwrap();
    assert!(h.contains("metric,bin_lo,bin_hi,count"));

    let csv = ok(&["evaluate", s(&pairs), "--format", "csv"]);
    assert_eq!(
        csv.lines().nth(1).unwrap(),
        "count,median_e_r,acc_r,median_e_t,median_e_rt,median_e_f,median_e_p,acc_p,acc_d"
    );
}

#[test]
fn evaluate_missing_model_names_pair() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "cube.json", CUBE);
    let text = [pair(GT, GT, "cube.json"), pair(GT, GT, "nowhere.json")].join("\n");
    let pairs = write(dir.path(), "pairs.jsonl", &text);
    let out = run(&["evaluate", s(&pairs)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("pair 1") && err.contains("nowhere.json"), "{err}");
}

#[test]
fn gradcheck_exit_codes() {
    let out = run(&["gradcheck", "-n", "5", "--points", "50"]);
    assert_eq!(out.status.code(), Some(0));
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["summary"]["passed"], true);
    // A coarse step leaves truncation error far above the tolerance.
    let out = run(&["gradcheck", "-n", "20", "--points", "1", "--h", "1e-2", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn schema_is_json() {
    let schema: Value = serde_json::from_str(&ok(&["schema"])).unwrap();
    assert_eq!(schema["type"], "object");
    assert!(schema["$defs"]["predictor"].is_object());
}
