use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn reference() -> String {
    fs::read_to_string(configs().join("reference.toml")).unwrap()
}

fn run(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_uqboltz"));
    cmd.args(args).env_remove("UQBOLTZ_THREADS");
    if let Some(t) = threads {
        cmd.env("UQBOLTZ_THREADS", t);
    }
    cmd.output().unwrap()
}

fn run_config(suite: &str, text: &str, dir: &Path, extra: &[&str]) -> Output {
    let cfg = dir.join("config.toml");
    fs::write(&cfg, text).unwrap();
    let out = dir.join("out");
    let mut args = vec![suite, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args, None)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn reference_validates() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config("validate", &reference(), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().count() >= 9);
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
}

#[test]
fn failing_gap_condition_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let text = reference().replace("coeffs = [0.05]", "coeffs = [0.2]");
    let o = run_config("validate", &text, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL gap condition on the angular kernel"), "{}", stdout(&o));
    assert!(dir.path().join("out/manifest.json").exists());
}

#[test]
fn bad_configs_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let low_q = reference().replace("q = 3.0", "q = 1.5");
    assert_eq!(run_config("validate", &low_q, dir.path(), &[]).status.code(), Some(2));
    assert_eq!(run_config("gap", "modes = [", dir.path(), &[]).status.code(), Some(2));
    assert_eq!(run(&["decay", "--config", "/nonexistent.toml", "--out", "/tmp/x"], None).status.code(), Some(2));
    assert_eq!(run(&["gap"], None).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"], None).status.code(), Some(2));
}

#[test]
fn over_budget_gap_fails_with_advice() {
    let dir = tempfile::tempdir().unwrap();
    let text = reference().replace("n = 12", "n = 48").replace("k_sweep = [1, 2, 3, 4]", "k_sweep = [9]");
    let text = text.replace("modes = 4", "modes = 9");
    let o = run_config("gap", &text, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("reduce the velocity resolution"), "{err}");
}

#[test]
fn tensor_dump_values() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config("tensors", &reference(), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let dump: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/tensors.json")).unwrap()).unwrap();
    let c = &dump["tensors"]["c"];
    let c12 = c[0][1].as_f64().unwrap();
    assert!((c12 - 1.0 / 3f64.sqrt()).abs() <= 1e-12, "{c12}");
    assert!((c12 - 0.5773503).abs() < 1e-7);

    let one = reference().replace("modes = 4", "modes = 1").replace("k_sweep = [1, 2, 3, 4]", "k_sweep = [1]");
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_config("tensors", &one, dir.path(), &[]).status.code(), Some(0));
    let dump: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/tensors.json")).unwrap()).unwrap();
    let t = &dump["tensors"];
    assert!(t["c"][0][0].as_f64().unwrap().abs() < 1e-15);
    assert!((t["e"][0][0][0].as_f64().unwrap() - 1.0).abs() < 1e-14);
    assert!(t["f"][0][0][0].as_f64().unwrap().abs() < 1e-15);
}

fn small_decay() -> String {
    reference()
        .replace("n = 12", "n = 8")
        .replace("modes = 4", "modes = 2")
        .replace("k_sweep = [1, 2, 3, 4]", "k_sweep = [1, 2]")
        .replace("t_final = 1.0", "t_final = 0.5")
}

fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn outputs_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("decay.toml");
    fs::write(&cfg, small_decay()).unwrap();
    let mut results = Vec::new();
    for (i, threads) in [("1", None), ("3", Some("3"))].iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        let mut args = vec!["decay", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "42"];
        if threads.1.is_none() {
            args.extend(["--threads", threads.0]);
        }
        let o = run(&args, threads.1);
        // the short run is not asked to reach the asymptotic rate
        assert!(matches!(o.status.code(), Some(0 | 1)), "{}", stdout(&o));
        let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["threads"].as_u64().unwrap(), threads.0.parse::<u64>().unwrap());
        assert_eq!(manifest["seed"].as_u64(), Some(42));
        results.push((o.status.code(), stdout(&o), outputs(&out)));
    }
    assert!(results[0].2.iter().any(|(n, _)| n == "decay.csv"));
    assert!(results[0].2.iter().any(|(n, _)| n == "decay.gp"));
    assert_eq!(results[0], results[1]);
}

#[test]
fn manifest_lists_existing_files_with_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config("tensors", &reference(), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0));
    let out = dir.path().join("out");
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let files = m["files"].as_array().unwrap();
    assert!(!files.is_empty());
    for f in files {
        let bytes = fs::read(out.join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(f["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
        assert_eq!(f["bytes"].as_u64().unwrap(), bytes.len() as u64);
    }
    let config_hash = hex::encode(Sha256::digest(fs::read(dir.path().join("config.toml")).unwrap()));
    assert_eq!(m["config_sha256"].as_str().unwrap(), config_hash);
    assert!(m["finished"].as_f64().unwrap() >= m["started"].as_f64().unwrap());
    assert_eq!(m["passed"], Value::Bool(true));
    assert_eq!(m["checks"].as_array().unwrap().len(), 4);
}

#[test]
fn convergence_writes_table_and_script() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs().join("convergence-exact.toml"))
        .unwrap()
        .replace("k_sweep = [1, 2, 3, 4, 5, 6]", "k_sweep = [1, 3, 4]")
        .replace("n = 12", "n = 8")
        .replace("reference_nodes = 12", "reference_nodes = 8")
        .replace("modes = 6", "modes = 4");
    let o = run_config("convergence", &text, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let table = fs::read_to_string(dir.path().join("out/error.csv")).unwrap();
    let mut lines = table.lines();
    assert!(lines.next().unwrap().starts_with("modes,error_t"));
    assert_eq!(lines.count(), 3);
    let script = fs::read_to_string(dir.path().join("out/convergence.gp")).unwrap();
    assert!(script.contains("'error.csv'"));
}
