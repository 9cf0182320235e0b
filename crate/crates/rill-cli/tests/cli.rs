use std::path::{Path, PathBuf};
use std::process::Command;

fn rill() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rill"))
}

fn write_config(dir: &Path, with_checkpoint: bool) -> PathBuf {
    let out = dir.join("out").display().to_string();
    let ckpt_table = if with_checkpoint {
        format!("[checkpoint]\npath = \"{}\"\n", dir.join("run.ckpt").display())
    } else {
        String::new()
    };
    let toml = format!(
        r#"
seed = 5
output_dir = "{out}"
loggers = ["csv"]

[benchmark.split_synthetic]
n_classes = 4
n_experiences = 2
n_per_class = 10
n_per_class_test = 5
dim = 4
spread = 0.3

[model]
hidden = [16]
head = "incremental"

[strategy]
name = "naive"

[train]
lr = 0.1
epochs = 2
batch_size = 8

{ckpt_table}
"#
    );
    let path = dir.join("experiment.toml");
    std::fs::write(&path, toml).unwrap();
    path
}

#[test]
fn unknown_flag_exits_2() {
    let out = rill().args(["run", "--nonsense"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_file_exits_2() {
    let out = rill()
        .args(["run", "--config", "/definitely/not/here.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error:"), "stderr: {stderr}");
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), false);
    let broken = std::fs::read_to_string(&path)
        .unwrap()
        .replace("lr = 0.1", "lr = 0.1\nmomentum = 0.9");
    std::fs::write(&path, broken).unwrap();

    let out = rill()
        .args(["run", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("momentum"), "stderr: {stderr}");
}

#[test]
fn run_then_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), true);

    let out = rill()
        .args(["run", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(0), "stderr: {stderr}");
    assert!(
        stdout.contains("trained through 2 experiences"),
        "stdout: {stdout}"
    );
    assert!(stdout.contains("final test-stream accuracy"), "stdout: {stdout}");
    assert!(dir.path().join("out").join("metrics.csv").exists());

    let ckpt = dir.path().join("run.ckpt");
    let out = rill()
        .args(["inspect", "--ckpt", ckpt.to_str().unwrap()])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout.contains("version: 1"), "stdout: {stdout}");
    assert!(stdout.contains("next experience: 2"), "stdout: {stdout}");
    assert!(stdout.contains("config digest: "), "stdout: {stdout}");
    assert!(stdout.contains("after exp 001"), "stdout: {stdout}");
}

#[test]
fn max_experiences_then_resume_completes() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), true);

    let out = rill()
        .args([
            "run",
            "--config",
            path.to_str().unwrap(),
            "--max-experiences",
            "1",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("trained through 1 experiences"), "stdout: {stdout}");

    let out = rill()
        .args(["run", "--config", path.to_str().unwrap(), "--resume"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("trained through 2 experiences"), "stdout: {stdout}");
}

#[test]
fn resume_without_checkpoint_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), false);
    let out = rill()
        .args(["run", "--config", path.to_str().unwrap(), "--resume"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn inspect_garbage_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"this is not a checkpoint").unwrap();
    let out = rill()
        .args(["inspect", "--ckpt", junk.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("magic"), "stderr: {stderr}");
}
