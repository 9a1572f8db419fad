//! Black-box tests of the `deskrl` binary: exit codes, the run-directory
//! override, file formats, and the labeler on the golden fixtures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/labeler");

fn deskrl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deskrl"))
        .args(args)
        .env("DESKRL_RUN_DIR", dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(FIXTURES).join(name)
}

const TINY: [&str; 4] = ["--set", "suite.only=[\"goal\"]", "--set", "sft.episodes_per_task=1"];

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = deskrl(dir.path(), &["sft", "--set", "ppo.lrr=1"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("ppo.lrr"));
    assert_eq!(code(&deskrl(dir.path(), &["sft", "--set", "ppo.clip_eps=3"])), 2);
    assert_eq!(code(&deskrl(dir.path(), &["no-such-command"])), 2);

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"sft.epochs": 2, "sft.unknown": 1}"#).unwrap();
    assert_eq!(code(&deskrl(dir.path(), &["sft", "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn missing_inputs_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["sft", "train-rprm", "train"] {
        let o = deskrl(dir.path(), &[cmd]);
        assert_eq!(code(&o), 4, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let missing = dir.path().join("nope.jsonl");
    assert_eq!(code(&deskrl(dir.path(), &["label", "--input", missing.to_str().unwrap()])), 4);
}

#[test]
fn divergence_exits_3_and_run_dir_override_applies() {
    let dir = tempfile::tempdir().unwrap();
    let o = deskrl(dir.path(), &[&TINY[..], &["gen-demos"]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["demos.ckpt", "vocab.tsv", "suite.json", "resolved_config.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing from the overridden run dir");
    }
    let vocab = std::fs::read_to_string(dir.path().join("vocab.tsv")).unwrap();
    assert!(vocab.lines().all(|l| l.split('\t').count() >= 2));

    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(echo["sft.episodes_per_task"], 1);
    assert!(echo.as_object().unwrap().keys().all(|k| k.contains('.')));

    let o = deskrl(dir.path(), &[&TINY[..], &["sft", "--set", "sft.epochs=4", "--set", "sft.lr=1e300"]].concat());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn labeler_reproduces_golden_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("trajectories.jsonl");
    let o = deskrl(dir.path(), &["label", "--input", input.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["skipped_unsuccessful"], 1);
    let got = std::fs::read_to_string(dir.path().join("labels.jsonl")).unwrap();
    let want = std::fs::read_to_string(fixture("expected_labels.jsonl")).unwrap();
    assert_eq!(got, want);
}
