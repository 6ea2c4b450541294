use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn augicl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_augicl")).args(args).output().unwrap()
}

fn small(out: &Path) -> Vec<String> {
    [
        "--iters", "20", "--eval-every", "10", "--batch", "8", "--seeds", "2", "--eval-instances", "5", "--unlabeled", "1",
        "--unlabeled", "4", "--out",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([out.display().to_string()])
    .collect()
}

fn run(cmd: &str, out: &Path) -> Output {
    let mut args = vec![cmd.to_string()];
    args.extend(small(out));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    augicl(&refs)
}

#[test]
fn list_prints_suites_without_running_them() {
    let out = augicl(&["verify", "--list"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["rollout_equivalence", "gradient_check", "isotropy", "decay_rate"] {
        assert!(text.contains(name));
    }
}

#[test]
fn verify_reports_json_and_negative_control_exits_one() {
    let ok = augicl(&["verify", "--suite", "rollout_equivalence", "--suite", "gradient_check"]);
    assert_eq!(ok.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["suites"].as_array().unwrap().len(), 2);

    let bad = augicl(&["verify", "--suite", "rollout_equivalence", "--beta", "1"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn configuration_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    assert_eq!(augicl(&["train", "--iters", "0", "--out", &out]).status.code(), Some(2));
    assert_eq!(augicl(&["sweep", "--iters", "30", "--eval-every", "7", "--out", &out]).status.code(), Some(2));
    assert_eq!(augicl(&["verify", "--suite", "nonsense"]).status.code(), Some(2));
    assert_eq!(augicl(&["emit-plots", "--report", &out]).status.code(), Some(2));
    assert_eq!(augicl(&["train", "--init", "uniform"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "sigma2 = 1.0\nunknown_key = 3\n").unwrap();
    assert_eq!(
        augicl(&["sweep", "--config", &cfg.display().to_string(), "--out", &out]).status.code(),
        Some(2)
    );
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, "sigma2 = 1.5\nunlabeled = [3]\n[train]\niters = 10\nbatch = 4\n[eval]\neval_every = 5\nn_instances = 3\n").unwrap();
    let out = dir.path().join("o");
    let status = augicl(&[
        "sweep",
        "--config",
        &cfg.display().to_string(),
        "--seeds",
        "1",
        "--iters",
        "20",
        "--out",
        &out.display().to_string(),
    ]);
    assert!(status.status.success());
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let iters: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iters, ["0", "5", "10", "15", "20"]);
    assert!(metrics.lines().skip(1).all(|l| l.split(',').nth(2) == Some("1.5")));
}

#[test]
fn small_train_and_eval_finish_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    assert!(run("train", dir.path()).status.success());
    assert!(start.elapsed() < Duration::from_secs(5));
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 21);
    let weights = dir.path().join("weights.json").display().to_string();
    let eval_dir = dir.path().join("eval");
    let out = augicl(&["eval", "--weights", &weights, "--unlabeled", "4", "--seeds", "1", "--out", &eval_dir.display().to_string()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(eval_dir.join("metrics.csv").exists());
}

#[test]
fn sweep_reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        assert!(run("sweep", d).status.success());
        assert!(augicl(&["emit-plots", "--report", &d.display().to_string()]).status.success());
    }
    for f in ["metrics.csv", "plot_data.csv", "train_log_mu4_seed1.csv", "weights_mu1_seed0.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    // The summary echoes the config, including the differing output directory.
    let summary = |d: &Path| {
        let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("summary.json")).unwrap()).unwrap();
        v["config"]["out"] = serde_json::Value::Null;
        v
    };
    assert_eq!(summary(a.path()), summary(b.path()));
    let plot = std::fs::read_to_string(a.path().join("plot_data.csv")).unwrap();
    assert_eq!(plot.lines().count(), 1 + 3 * 2 * 3);
}
