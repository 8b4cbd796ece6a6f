use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn fakesat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fakesat")).args(args).env("FAKESAT_THREADS", "1").output().expect("spawn fakesat")
}

fn ok(args: &[&str]) -> Output {
    let out = fakesat(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset plus one trained hop-A model shared by the tests.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    model: PathBuf,
    root: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        ok(&["synth", "--out", s(&data), "--n", "12", "--size", "32", "--seed", "4"]);
        let model = root.join("model.json");
        ok(&[
            "train",
            "--data",
            s(&data),
            "--hops",
            "A",
            "--out",
            s(&model),
            "--seed",
            "2",
            "--retain-all-channels",
            "--channel-grid",
            "1,2",
        ]);
        Fixture { _dir: dir, data, model, root }
    })
}

#[test]
fn synth_writes_class_directories() {
    let f = fixture();
    for class in ["real", "fake"] {
        let n = std::fs::read_dir(f.data.join(class)).unwrap().count();
        assert_eq!(n, 12);
    }
}

#[test]
fn train_writes_model_metrics_and_manifest() {
    let f = fixture();
    let model = read_json(&f.model);
    assert_eq!(model["format_version"], 1);
    let metrics = read_json(&f.root.join("model.metrics.json"));
    assert_eq!(metrics["split"], "test");
    assert!(metrics["metrics"]["f1"].as_f64().unwrap() >= 0.0);
    let manifest = read_json(&f.root.join("model.manifest.json"));
    assert_eq!(manifest["seed"], 2);
    assert_eq!(manifest["dataset_hash"].as_str().unwrap().len(), 64);
    assert!(manifest["build_id"].as_str().unwrap().starts_with("fakesat-cli-"));
    assert!(manifest["command_line"].as_array().unwrap().iter().any(|a| a == "train"));
    assert!(manifest["timings_s"]["train"].as_f64().unwrap() > 0.0);
}

#[test]
fn training_is_reproducible() {
    let f = fixture();
    let again = f.root.join("again.json");
    ok(&[
        "train",
        "--data",
        s(&f.data),
        "--hops",
        "A",
        "--out",
        s(&again),
        "--seed",
        "2",
        "--retain-all-channels",
        "--channel-grid",
        "1,2",
    ]);
    assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(&f.model).unwrap());
    assert_eq!(
        std::fs::read(f.root.join("again.metrics.json")).unwrap(),
        std::fs::read(f.root.join("model.metrics.json")).unwrap()
    );
}

#[test]
fn eval_reports_metrics_per_split() {
    let f = fixture();
    let all = stdout_json(&ok(&["eval", "--model", s(&f.model), "--data", s(&f.data)]));
    assert_eq!(all["tiles"], 24);
    let test = stdout_json(&ok(&["eval", "--model", s(&f.model), "--data", s(&f.data), "--split", "test"]));
    let trained = read_json(&f.root.join("model.metrics.json"));
    assert_eq!(test["metrics"], trained["metrics"]);
}

#[test]
fn size_matches_accounting() {
    let f = fixture();
    let size = stdout_json(&ok(&["size", "--model", s(&f.model)]));
    let n = size["selected_channels"].as_u64().unwrap();
    assert_eq!(size["system"], "A");
    assert_eq!(size["total"].as_u64().unwrap(), 12 + 800 * n);
}

#[test]
fn heatmap_renders_png_and_scores() {
    let f = fixture();
    let image = f.data.join("fake").join("fake_00000.png");
    let png = f.root.join("heat.png");
    let scores = f.root.join("heat.json");
    ok(&["heatmap", "--model", s(&f.model), "--image", s(&image), "--out", s(&png), "--scores", s(&scores)]);
    assert!(std::fs::metadata(&png).unwrap().len() > 0);
    let grid = read_json(&scores);
    assert_eq!(grid["height"], 32);
    assert_eq!(grid["stride"], 4);
    let rows = grid["scores"].as_array().unwrap();
    assert_eq!(rows.len(), 32);
    assert!(rows.iter().flat_map(|r| r.as_array().unwrap()).all(|v| (0.0..=1.0).contains(&v.as_f64().unwrap())));

    let channel_png = f.root.join("heat_a5.png");
    ok(&["heatmap", "--model", s(&f.model), "--image", s(&image), "--channel", "A:5", "--out", s(&channel_png)]);
    let out = fakesat(&["heatmap", "--model", s(&f.model), "--image", s(&image), "--channel", "B:1", "--out", s(&png)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn format_version_mismatch_exits_with_error() {
    let f = fixture();
    let mut model = read_json(&f.model);
    model["format_version"] = 99.into();
    let bad = f.root.join("v99.json");
    std::fs::write(&bad, serde_json::to_vec(&model).unwrap()).unwrap();
    let out = fakesat(&["eval", "--model", s(&bad), "--data", s(&f.data)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("99"));
    assert!(out.stdout.is_empty());
}

#[test]
fn empty_dataset_exits_with_error() {
    let f = fixture();
    let empty = f.root.join("empty");
    std::fs::create_dir_all(empty.join("real")).unwrap();
    let out = fakesat(&["eval", "--model", s(&f.model), "--data", s(&empty)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_arguments_are_rejected() {
    let f = fixture();
    let out = fakesat(&["train", "--data", s(&f.data), "--out", "x.json", "--perturb", "blur:3"]);
    assert_eq!(out.status.code(), Some(1));
    let out = fakesat(&["train", "--data", s(&f.data), "--out", "x.json", "--hops", "D"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn robustness_runs_selected_settings() {
    let f = fixture();
    let out = ok(&[
        "robustness",
        "--data",
        s(&f.data),
        "--hops",
        "A",
        "--channel-grid",
        "1",
        "--settings",
        "none,jpeg:90,awgn:0.02",
    ]);
    let report = stdout_json(&out);
    let settings: Vec<&str> =
        report["rows"].as_array().unwrap().iter().map(|r| r["setting"].as_str().unwrap()).collect();
    assert_eq!(settings, ["none", "jpeg:90", "awgn:0.02"]);
    let table = String::from_utf8_lossy(&out.stderr);
    assert!(table.contains("| setting"));
}
