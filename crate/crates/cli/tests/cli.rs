use std::path::Path;
use std::process::{Command, Output};

fn meow(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meow"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const SHORT: &str = "[trainer]\nsteps = 0\n[eval]\nepisodes = 1\n";

#[test]
fn invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[trainer]\ntau = 3.0\n");
    let out = meow(&["train", "--config", &cfg, "--out", "runs"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau"));

    let cfg = write_config(dir.path(), "[model]\ncoupling = \"affine\"\n");
    let out = meow(&["train", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_steps_then_eval_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let out = meow(&["train", "--config", &cfg, "--seed", "3", "--out", "runs"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("runs/seed-3");
    for f in [
        "config.toml",
        "metrics.csv",
        "summary.json",
        "checkpoint/manifest.json",
        "checkpoint/params.bin",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);

    let ckpt = run.join("checkpoint");
    let ckpt = ckpt.to_str().unwrap();
    let out = meow(
        &[
            "eval",
            "--checkpoint",
            ckpt,
            "--episodes",
            "1",
            "--trajectories",
            "traj.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["episodes"], 1);
    assert!(summary["mean_return"].as_f64().unwrap().is_finite());
    let traj = std::fs::read_to_string(dir.path().join("traj.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 31);

    let out = meow(
        &[
            "value-compare",
            "--checkpoint",
            ckpt,
            "--proposal",
            "init",
            "--m-list",
            "4,16",
            "--trials",
            "5",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "M,sql_abs_err_mean,sql_abs_err_std,sac_abs_err_mean,sac_abs_err_std"
    );
    assert_eq!(lines.len(), 3);

    let out = meow(&["eval", "--checkpoint", ckpt, "--env", "onestep"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_arguments_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = meow(&["eval", "--checkpoint", "nowhere"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = meow(&["train", "--seed", "x"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_prints_four_passing_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = meow(&["gradcheck", "--seed", "2"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l.ends_with("PASS")));
}
