use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_teleposture"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn teleposture")
}

fn ok(args: &[&str]) {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_estimate_rula_compare() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--task", "circle", "--out-dir", s(d), "--duration", "2", "--seed", "4"]);
    for f in ["observations.csv", "truth.csv", "task.json"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    let obs = d.join("observations.csv");
    let est = d.join("est.jsonl");
    ok(&["estimate", "--input", s(&obs), "--out", s(&est), "--rula", s(&d.join("risk.csv"))]);
    let lines = std::fs::read_to_string(&est).unwrap().lines().count();
    assert_eq!(lines, 101);

    ok(&["rula", "--input", s(&est), "--out", s(&d.join("rula.csv")), "--summary", s(&d.join("rula.json"))]);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("rula.json")).unwrap()).unwrap();
    let max = summary["max_score"]["grand"].as_f64().unwrap();
    assert!((1.0..=7.0).contains(&max));

    let report = d.join("report.json");
    ok(&["compare", "--input", s(&est), "--against", s(&d.join("truth.csv")), "--out", s(&report)]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["steps"], 101);
    assert_eq!(r["deviation"]["per_joint"].as_array().unwrap().len(), 10);
}

#[test]
fn estimate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--task", "line_y", "--out-dir", s(d), "--duration", "1", "--seed", "1"]);
    let obs = d.join("observations.csv");
    let (a, b) = (d.join("a.jsonl"), d.join("b.jsonl"));
    ok(&["estimate", "--input", s(&obs), "--out", s(&a), "--seed", "9"]);
    ok(&["estimate", "--input", s(&obs), "--out", s(&b), "--seed", "9"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn ik_baselines_and_compare_symmetry() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--task", "line_x", "--out-dir", s(d), "--duration", "1"]);
    let obs = d.join("observations.csv");
    let (on, off) = (d.join("online.csv"), d.join("offline.csv"));
    ok(&["ik", "--method", "online", "--input", s(&obs), "--out", s(&on)]);
    ok(&["ik", "--method", "offline", "--input", s(&obs), "--out", s(&off), "--report", s(&d.join("ik.json"))]);

    let (ab, ba) = (d.join("ab.json"), d.join("ba.json"));
    ok(&["compare", "--input", s(&on), "--against", s(&off), "--out", s(&ab)]);
    ok(&["compare", "--input", s(&off), "--against", s(&on), "--out", s(&ba)]);
    let read = |p: &Path| -> serde_json::Value { serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap() };
    assert_eq!(read(&ab)["deviation"], read(&ba)["deviation"]);
}

#[test]
fn calibration_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--task", "calibration", "--out-dir", s(d), "--noiseless"]);
    let recordings: Vec<String> = std::fs::read_dir(d)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("calib_"))
        .map(|p| s(&p).to_string())
        .collect();
    assert_eq!(recordings.len(), 5);
    let model = d.join("model.toml");
    let mut args = vec!["calibrate", "--out", s(&model), "--recordings"];
    args.extend(recordings.iter().map(String::as_str));
    ok(&args);
    let text = std::fs::read_to_string(&model).unwrap();
    let fitted = teleposture::io::parse_model_toml(&text, "model.toml").unwrap();
    let truth = teleposture::HumanModel::default_seated();
    for (a, b) in fitted.lengths.as_array().iter().zip(truth.lengths.as_array()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn usage_and_pipeline_errors_exit_differently() {
    let out = cli(&["estimate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = cli(&["synth", "--task", "spiral", "--out-dir", "/tmp"]);
    assert_ne!(out.status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "not,a,trajectory\n1,2\n").unwrap();
    let out = cli(&["estimate", "--input", s(&bad), "--out", s(&dir.path().join("e.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
