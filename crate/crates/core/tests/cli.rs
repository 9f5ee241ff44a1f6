use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::Command;

use tempfile::TempDir;

fn run(dir: &Path, args: &[&str], config: Option<&str>) -> i32 {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_unduloid"));
    cmd.args(args).arg("--out").arg(dir);
    if let Some(text) = config {
        let path = dir.join("input.json");
        fs::create_dir_all(dir).unwrap();
        fs::write(&path, text).unwrap();
        cmd.arg("--config").arg(path);
    }
    let out = cmd.output().expect("binary runs");
    out.status.code().expect("exited normally")
}

fn rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect()
}

fn header_value(path: &Path, key: &str) -> f64 {
    let text = fs::read_to_string(path).unwrap();
    let prefix = format!("# {key} = ");
    text.lines().find_map(|l| l.strip_prefix(&prefix)).unwrap().parse().unwrap()
}

const SMALL_CONTINUATION: &str = r#"{
    "grid": {"n_z": 17, "n_s": 16},
    "continuation": {"dlambda": 0.0025, "max_lambda": 0.005}
}"#;

#[test]
fn unduloid_table_has_constant_curvature() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run(dir.path(), &["unduloid-table"], Some(r#"{"shape": {"b0": 1.5, "k0": 0.6}}"#)), 0);
    assert!(dir.path().join("config.json").exists());
    let table = dir.path().join("unduloid_table.csv");
    let kappa = header_value(&table, "kappa");
    assert!((header_value(&table, "period") - 3.0 * PI).abs() < 1e-12);
    let data = rows(&table);
    assert_eq!(data.len(), 512);
    for r in &data {
        assert!((r[4] - kappa).abs() < 1e-8, "{r:?}");
    }
}

#[test]
fn flat_table_is_a_cylinder() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run(dir.path(), &["unduloid-table"], Some(r#"{"shape": {"b0": 2.0, "k0": 0.0}, "table": {"points": 16}}"#)), 0);
    for r in rows(&dir.path().join("unduloid_table.csv")) {
        assert_eq!(r[1], 2.0);
        assert_eq!(r[4], -0.5);
    }
}

#[test]
fn curvature_sweep_agrees_with_differences() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run(dir.path(), &["curvature-sweep"], Some(r#"{"sweep": {"k_count": 11}}"#)), 0);
    let data = rows(&dir.path().join("curvature_sweep.csv"));
    assert_eq!(data.len(), 11);
    assert_eq!(data[0][0], 0.01);
    assert_eq!(data[10][0], 0.99);
    for r in &data {
        assert!(r[4] < 1e-6, "{r:?}");
    }
}

#[test]
fn kernel_cert_and_eig_check_write_reports() {
    let dir = TempDir::new().unwrap();
    let config = r#"{"certificate": {"grids": [33, 65]}, "grid": {"n_z": 17, "n_s": 16}}"#;
    assert_eq!(run(dir.path(), &["kernel-cert"], Some(config)), 0);
    let cert: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("kernel_certificate.json")).unwrap()).unwrap();
    assert_eq!(cert["levels"].as_array().unwrap().len(), 2);
    assert_eq!(run(dir.path(), &["eig-check"], Some(config)), 0);
    let eig: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("eig_check.json")).unwrap()).unwrap();
    assert!(eig["magnitude"].as_f64().unwrap() > 0.0);
}

#[test]
fn continue_then_verify() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run(dir.path(), &["continue"], Some(SMALL_CONTINUATION)), 0);
    for f in ["branch_plus.jsonl", "branch_minus.jsonl", "continuation_summary.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(run(dir.path(), &["verify-branch"], None), 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("verify_branch.json")).unwrap()).unwrap();
    for branch in report.as_array().unwrap() {
        assert_eq!(branch["ok"], true);
    }
}

#[test]
fn seeded_runs_are_reproducible() {
    let config = r#"{
        "grid": {"n_z": 17, "n_s": 16},
        "continuation": {"dlambda": 0.0025, "max_lambda": 0.0025, "perturbation": 1e-4}
    }"#;
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    assert_eq!(run(a.path(), &["continue", "--seed", "7"], Some(config)), 0);
    assert_eq!(run(b.path(), &["continue", "--seed", "7"], Some(config)), 0);
    let read = |d: &TempDir| fs::read(d.path().join("branch_plus.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn tampered_branch_fails_verification() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run(dir.path(), &["continue"], Some(SMALL_CONTINUATION)), 0);
    let path = dir.path().join("branch_plus.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
    let eta0 = rec["eta"][0].as_f64().unwrap();
    rec["eta"][0] = serde_json::json!(eta0 + 1e-3);
    lines[2] = rec.to_string();
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    assert_eq!(run(dir.path(), &["verify-branch"], None), 3);
}

#[test]
fn bad_configs_exit_with_config_code() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run(dir.path(), &["unduloid-table"], Some(r#"{"shape": {"k0": 1.5}}"#)), 2);
    assert_eq!(run(dir.path(), &["unduloid-table"], Some(r#"{"unknown": 1}"#)), 2);
    assert_eq!(run(dir.path(), &["unduloid-table"], Some("not json")), 2);
    assert_eq!(run(dir.path(), &["no-such-command"], None), 2);
}

#[test]
fn missing_branch_file_is_io_error() {
    let dir = TempDir::new().unwrap();
    let config = r#"{"verify": {"branches": ["/nonexistent/branch.jsonl"]}}"#;
    assert_eq!(run(dir.path(), &["verify-branch"], Some(config)), 4);
}
