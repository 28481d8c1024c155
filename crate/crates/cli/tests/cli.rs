use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seeds = [0]
presets = ["full"]

[stream.synthetic]
tasks = 2
n_per_class = 8
input_dim = 4

[model]
input_dim = 4
hidden = [8]
projection_hidden = 8

[train]
eta = 0.1
epochs_first_task = 1
epochs_later = 1
warmup_epochs = 0
batch_size = 8
buffer_capacity = 6

[eval.probe]
epochs = 2
milestones = [1]
"#;

fn run(dir: &Path, args: &[&str], config: &str) -> Output {
    let path = dir.join("config.toml");
    std::fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_cclis"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .env("CCLIS_OUT", dir.join("out"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn unknown_key_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = run(dir.path(), &["train"], &TINY.replace("eta = 0.1", "etaa = 0.1"));
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("train.eta"));
}

#[test]
fn export_before_train_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["export", "--what", "metrics"], TINY);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_writes_into_override_dir_and_clears_marker() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["train"], TINY);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let root = dir.path().join("out");
    assert!(root.join("summary.json").is_file());
    assert!(root.join("config.resolved.toml").is_file());
    assert!(!root.join(".incomplete").exists());
    let metrics = std::fs::read_to_string(root.join("full").join("seed0").join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("seed,scenario,after_task"));
}
