use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_microservo")).args(args).arg("--out").arg(out).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn gen_is_deterministic_and_named_by_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&bin(&["gen", "--seed", "2", "--repeats", "2"], a.path())), 0);
    assert_eq!(code(&bin(&["gen", "--seed", "2", "--repeats", "2"], b.path())), 0);
    for name in ["warmup_seed2000006.jsonl", "warmup_seed2000007.jsonl"] {
        let x = fs::read(a.path().join(name)).unwrap();
        assert_eq!(x, fs::read(b.path().join(name)).unwrap());
        assert_eq!(x.iter().filter(|&&c| c == b'\n').count(), 500);
    }
}

#[test]
fn calibrate_reads_generated_log() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&bin(&["gen", "--seed", "1", "--repeats", "1"], d.path())), 0);
    let log = d.path().join("warmup_seed1000003.jsonl");
    let o = bin(&["calibrate", "--log", log.to_str().unwrap()], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("calibration_warmup_seed1000003.json")).unwrap()).unwrap();
    for m in ["bi_chamfer", "euclidean", "jacobian_regression"] {
        assert!(v[m]["rotation_error_vs_rig_deg"].as_f64().unwrap().is_finite());
    }
    assert!(v["bi_chamfer"]["rotation_error_vs_rig_deg"].as_f64().unwrap() < 2.0);
}

#[test]
fn track_writes_both_formats() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&bin(&["track", "--repeats", "1"], d.path())), 0);
    let csv = fs::read_to_string(d.path().join("tracking_ablation_summary.csv")).unwrap();
    assert!(csv.starts_with("experiment,method,metric,n,"));
    assert_eq!(code(&bin(&["track", "--repeats", "1", "--format", "jsonl"], d.path())), 0);
    let jl = fs::read_to_string(d.path().join("tracking_ablation_summary.jsonl")).unwrap();
    for line in jl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["experiment"], "tracking_ablation");
    }
}

#[test]
fn config_file_overrides_defaults() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.json");
    fs::write(&cfg, r#"{"name": "tracking_ablation", "repeats": 3, "tracking": {"outlier_rate": 0.0}}"#).unwrap();
    let o = bin(&["track", "--config", cfg.to_str().unwrap()], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(d.path().join("tracking_ablation_samples.csv")).unwrap();
    assert!(csv.lines().count() > 3);
}

#[test]
fn config_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.json");
    fs::write(&bad, "{not json").unwrap();
    assert_eq!(code(&bin(&["track", "--config", bad.to_str().unwrap()], d.path())), 2);
    let zero = d.path().join("zero.json");
    fs::write(&zero, r#"{"repeats": 0}"#).unwrap();
    assert_eq!(code(&bin(&["simulate", "--config", zero.to_str().unwrap()], d.path())), 2);
    assert_eq!(code(&bin(&["simulate", "--experiment", "nope"], d.path())), 2);
    assert_eq!(code(&bin(&["track", "--experiment", "reach9"], d.path())), 2);
    assert_eq!(code(&bin(&["verify", "--only", "15"], d.path())), 2);
    assert_eq!(code(&bin(&["calibrate", "--log", "/nonexistent.jsonl"], d.path())), 2);
}

#[test]
fn verify_subset_passes_and_reports() {
    let d = tempfile::tempdir().unwrap();
    let o = bin(&["verify", "--only", "4,14", "--format", "jsonl"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = fs::read_to_string(d.path().join("acceptance_seed0.jsonl")).unwrap();
    let ids: Vec<u64> = text.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["id"].as_u64().unwrap()).collect();
    assert_eq!(ids, vec![4, 14]);
}
