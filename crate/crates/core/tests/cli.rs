use std::path::{Path, PathBuf};
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_sidsearch");

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn sidsearch(out: &Path, args: &[&str]) -> i32 {
    Command::new(BIN)
        .arg("--config")
        .arg(smoke_config())
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
        .status
        .code()
        .expect("exit code")
}

#[test]
fn stages_run_in_order_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for stage in ["gen-data", "build-sids", "align", "evolve", "evaluate", "ablate-rl", "report"] {
        assert_eq!(sidsearch(out, &[stage]), 0, "{stage}");
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["curve"].as_array().unwrap().len(), 3);
    assert_eq!(summary["ablation"].as_array().unwrap().len(), 2);
    assert!(out.join("summary.md").exists());
    assert!(!out.join(".lock").exists());
}

#[test]
fn missing_upstream_stage_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sidsearch(dir.path(), &["align"]), 1);
    assert_eq!(sidsearch(dir.path(), &["evaluate"]), 1);
}

#[test]
fn changed_config_hash_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sidsearch(dir.path(), &["gen-data"]), 0);
    assert_eq!(sidsearch(dir.path(), &["--override", "corpus.noise=0.5", "build-sids"]), 1);
    assert_eq!(sidsearch(dir.path(), &["build-sids"]), 0);
}

#[test]
fn held_lock_blocks_a_second_run() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(".lock"), "").unwrap();
    assert_eq!(sidsearch(dir.path(), &["gen-data"]), 1);
    assert!(!dir.path().join("data").exists());
}

#[test]
fn bad_arguments_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sidsearch(dir.path(), &["--override", "corpus.bogus=1", "gen-data"]), 1);
    assert_eq!(sidsearch(dir.path(), &["--override", "corpus.noise=2", "gen-data"]), 1);
    assert_eq!(sidsearch(dir.path(), &["no-such-stage"]), 1);
    assert_eq!(sidsearch(dir.path(), &["--help"]), 0);
}

#[test]
fn evaluate_accepts_an_explicit_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for stage in ["gen-data", "build-sids", "align"] {
        assert_eq!(sidsearch(out, &[stage]), 0, "{stage}");
    }
    let ckpt = out.join("align/params.bin");
    assert_eq!(sidsearch(out, &["evaluate", "--checkpoint", ckpt.to_str().unwrap()]), 0);
    assert!(out.join("eval/report.json").exists());
    std::fs::write(out.join("junk.bin"), b"not a checkpoint").unwrap();
    let junk = out.join("junk.bin");
    assert_ne!(sidsearch(out, &["evaluate", "--checkpoint", junk.to_str().unwrap()]), 0);
}
