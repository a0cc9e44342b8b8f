use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn tubefield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tubefield")).args(args).env_remove("RUST_LOG").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn schema_lists_documented_keys() {
    let o = tubefield(&["--print-schema"]);
    assert_eq!(o.status.code(), Some(0));
    let schema: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(schema["training.adam_epochs"]["default"], 20000);
    assert!(schema["noise.snr_db"]["description"].as_str().unwrap().contains("dB"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(tubefield(&[]).status.code(), Some(2));
    assert_eq!(tubefield(&["forward"]).status.code(), Some(2));
    assert_eq!(tubefield(&["forward", "--config", "/nonexistent.json"]).status.code(), Some(2));
    let o = tubefield(&["forward", "--config", smoke().to_str().unwrap(), "--set", "training.adam_epoch=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("training.adam_epochs"), "{}", stderr(&o));
}

#[test]
fn forward_writes_reference_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = tubefield(&["forward", "-q", "--config", smoke().to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["config.json", "manifest.json", "fdm/field.csv", "fdm/boundary.csv", "fdm/summary.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stages"]["forward"]["completed"], true);
}

#[test]
fn overrides_change_the_run_and_guard_its_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = smoke();
    let base = ["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "-q"];
    let with = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };
    let args = with(&["--set", "training.adam_epochs=3", "--set", "training.lbfgs_epochs=0"]);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    for stage in ["forward", "synth-obs", "train"] {
        let o = tubefield(&[&[stage], &args[..]].concat());
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", stderr(&o));
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("gamma/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["epochs"], 3);
    // same directory, different config
    let o = tubefield(&[&["train"], &base[..]].concat());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("holds a run with config hash"), "{}", stderr(&o));
}

#[test]
fn run_all_resume_skips_completed_stages() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = smoke();
    let args = ["run-all", "-q", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert_eq!(tubefield(&args).status.code(), Some(0));
    let table = std::fs::read(out.join("table2.json")).unwrap();
    let log = std::fs::read(out.join("gamma/train_log.csv")).unwrap();
    let o = tubefield(&[&args[..], &["--resume"]].concat());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read(out.join("table2.json")).unwrap(), table);
    assert_eq!(std::fs::read(out.join("gamma/train_log.csv")).unwrap(), log);
    let table: serde_json::Value = serde_json::from_slice(&table).unwrap();
    for k in ["GT", "FTM", "TOM", "TOMB"] {
        assert!(table[k]["alpha"].is_number(), "{k}");
    }
}
