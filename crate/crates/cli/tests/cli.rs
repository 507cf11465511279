use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn msls(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msls")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn claim1_gaussian_is_strictly_decreasing() {
    let out = msls(&["claim1", "--kernel-size", "13", "--sigma", "2"]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    let dd = column(&csv, "delta_distance");
    assert!(dd.len() >= 5);
    assert!(dd.windows(2).all(|p| p[1] < p[0]), "{dd:?}");
    assert_eq!(*dd.last().unwrap(), 0.0);
    assert!(column(&csv, "commutation_error").iter().all(|e| *e < 0.02));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = msls(&["synth", "--scenes", "2", "--size", "48", "--kernel-sizes", "5,7", "--seed", "3", "--out-dir", p(&out_dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let mut names: Vec<_> = fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 2 * 2 * 3);
    for name in names {
        assert_eq!(fs::read(dir.path().join("a").join(&name)).unwrap(), fs::read(dir.path().join("b").join(&name)).unwrap());
    }
}

#[test]
fn eval_with_true_kernels_gives_unit_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = msls(&["synth", "--scenes", "3", "--size", "48", "--kernel-sizes", "7", "--out-dir", p(&data)]);
    assert!(out.status.success());
    let report = dir.path().join("report");
    let out = msls(&["eval", p(&data), "--estimates", p(&data), "--out-dir", p(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    let r = column(&csv, "error_ratio");
    assert_eq!(r.len(), 3);
    assert!(r.iter().all(|v| *v == 1.0), "{r:?}");
    assert!(column(&csv, "kernel_similarity").iter().all(|s| (s - 1.0).abs() < 1e-12));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["count"], 3);
}

#[test]
fn deblur_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(msls(&["synth", "--scenes", "1", "--size", "64", "--kernel-sizes", "5", "--out-dir", p(&data)]).status.success());
    let input = data.join("shapes0-k0.blur.png");
    let out_dir = dir.path().join("out");
    let out = msls(&["deblur", p(&input), "--kernel-size", "5", "--trace", "--snapshots", "--out-dir", p(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["shapes0-k0.blur.deblurred.png", "shapes0-k0.blur.kernel.txt", "shapes0-k0.blur.kernel.png", "shapes0-k0.blur.trace.csv"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    assert!(fs::read_dir(out_dir.join("snapshots")).unwrap().count() > 0);
    let kernel = out_dir.join("shapes0-k0.blur.kernel.txt");
    let out = msls(&["nonblind", p(&input), "--kernel", p(&kernel), "--out-dir", p(&out_dir)]);
    assert!(out.status.success());
    assert!(out_dir.join("shapes0-k0.blur.restored.png").exists());
}

#[test]
fn deblur_nu_writes_weights() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(msls(&["synth", "--scenes", "1", "--size", "48", "--kernel-sizes", "3", "--out-dir", p(&data)]).status.success());
    let input = data.join("shapes0-k0.blur.png");
    let out = msls(&["deblur-nu", p(&input), "--kernel-size", "3", "--rotation-steps", "3", "--out-dir", p(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("shapes0-k0.blur.weights.json")).unwrap()).unwrap();
    assert_eq!(json["poses"].as_array().unwrap().len(), 27);
    assert!(dir.path().join("shapes0-k0.blur.kernel-grid.png").exists());
}

#[test]
fn schedule_prints_plan() {
    let out = msls(&["schedule", "--width", "1024", "--height", "768", "--kernel-size", "27"]);
    assert!(out.status.success());
    let plan: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(plan["n_levels"], 8);
}

#[test]
fn bad_input_exits_with_two() {
    assert_eq!(msls(&["deblur", "/nonexistent/image.png"]).status.code(), Some(2));
    assert_eq!(msls(&["schedule", "--width", "10", "--height", "10", "--kernel-size", "27"]).status.code(), Some(2));
    assert_eq!(msls(&["claim1", "--kernel-size", "8"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"beta": -1.0}"#).unwrap();
    assert_eq!(msls(&["schedule", "--width", "64", "--height", "64", "--config", p(&cfg)]).status.code(), Some(2));
}
