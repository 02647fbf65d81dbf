use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn saclog(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saclog"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Fixture config with `patch` applied to its text, written next to copies
/// of the fixture data.
fn patched_config(dir: &Path, patch: impl Fn(String) -> String) -> PathBuf {
    for f in ["dialogs.jsonl", "schema.json"] {
        std::fs::copy(fixture(f), dir.join(f)).unwrap();
    }
    let text = std::fs::read_to_string(fixture("config.toml")).unwrap();
    let path = dir.join("saclog.toml");
    std::fs::write(&path, patch(text)).unwrap();
    path
}

#[test]
fn every_command_succeeds_on_the_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = fixture("config.toml");
    for args in [
        &["ingest"][..],
        &["score"],
        &["bucket"],
        &["pretrain"],
        &["train", "--mode", "curriculum"],
        &["train", "--mode", "baseline"],
        &["augment", "--mode", "curriculum"],
        &["evaluate", "--mode", "baseline"],
        &["report"],
    ] {
        let o = saclog(&config, &out, args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        assert!(!o.stdout.is_empty());
    }
    let scores = std::fs::read_to_string(out.join("scores.jsonl")).unwrap();
    assert_eq!(scores.lines().count(), 6);
    for f in ["config.resolved.toml", "manifest.jsonl", "curriculum.json", "encoder.bin", "report.md", "augment/summary.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let manifest = std::fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 9);
}

#[test]
fn missing_schema_is_a_config_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let config = patched_config(dir.path(), |t| t.replace("schema.json", "absent.json"));
    let out = dir.path().join("run");
    let o = saclog(&config, &out, &["score"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("absent.json"));
    assert!(!out.exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = patched_config(dir.path(), |t| t.replace("[scoring]", "[scoring]\nfolds = 3"));
    let o = saclog(&config, &dir.path().join("run"), &["score"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("folds"));
}

#[test]
fn bad_weights_are_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = patched_config(dir.path(), |t| t.replace("[scoring]", "[scoring]\nterm_weights = [0.5, 0.5, 0.5, 0.0, 0.0]"));
    let o = saclog(&config, &dir.path().join("run"), &["score"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_slot_is_a_data_error_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let config = patched_config(dir.path(), |t| t);
    let dialogs = std::fs::read_to_string(dir.path().join("dialogs.jsonl")).unwrap();
    std::fs::write(dir.path().join("dialogs.jsonl"), dialogs.replace("taxi-leaveat", "taxi-fare")).unwrap();
    let out = dir.path().join("run");
    let o = saclog(&config, &out, &["ingest"]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("dialogs.jsonl:1") && err.contains("taxi-fare"), "{err}");
}

#[test]
fn curriculum_training_needs_scores() {
    let dir = tempfile::tempdir().unwrap();
    let o = saclog(&fixture("config.toml"), &dir.path().join("run"), &["train", "--mode", "curriculum"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("score"));
}

#[test]
fn usage_errors_exit_with_two() {
    let o = Command::new(env!("CARGO_BIN_EXE_saclog")).arg("fly").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_saclog")).args(["train", "--mode", "sideways"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_on_an_empty_run_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let o = saclog(&fixture("config.toml"), &out, &["report"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = std::fs::read_to_string(out.join("report.md")).unwrap();
    assert!(report.contains("No artifacts"));
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_saclog"))
        .arg("--config")
        .arg(fixture("config.toml"))
        .args(["--seed", "99", "--out"])
        .arg(&out)
        .args(["train", "--mode", "baseline"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("train/baseline-seed99/metrics.json").is_file());
    let resolved = std::fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("seed = 99"));
}
