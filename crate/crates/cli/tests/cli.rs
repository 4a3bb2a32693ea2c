use std::path::Path;
use std::process::{Command, Output};

fn vln(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vln")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// Overrides for a run small enough to finish in seconds.
fn tiny(dir: &Path) -> Vec<String> {
    [
        ("output_dir", dir.to_str().unwrap()),
        ("train_worlds", "3"),
        ("stage2_worlds", "3"),
        ("eval_worlds", "3"),
        ("total_steps", "3"),
        ("dagger_steps", "2"),
        ("batch_size", "2"),
    ]
    .iter()
    .flat_map(|(k, v)| [format!("--{k}"), v.to_string()])
    .collect()
}

fn with<'a>(head: &[&'a str], tail: &'a [String]) -> Vec<&'a str> {
    head.iter().copied().chain(tail.iter().map(String::as_str)).collect()
}

#[test]
fn unknown_key_is_config_error() {
    assert_eq!(code(&vln(&["train", "--no_such_key", "1"])), 2);
}

#[test]
fn invalid_config_value_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "memory_mode = \"recursive\"\nstride = 2\n").unwrap();
    assert_eq!(code(&vln(&["eval", "--oracle", "--config", cfg.to_str().unwrap()])), 2);
    std::fs::write(&cfg, "unknown = 1\n").unwrap();
    assert_eq!(code(&vln(&["eval", "--oracle", "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn missing_config_file_is_missing_artifact() {
    assert_eq!(code(&vln(&["train", "--config", "/nonexistent/run.toml"])), 3);
}

#[test]
fn missing_checkpoint_is_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let args = tiny(dir.path());
    let out = vln(&with(&["eval", "--checkpoint", "/nonexistent/model.ckpt"], &args));
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&vln(&with(&["dagger"], &args))), 3);
}

#[test]
fn oracle_eval_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = vln(&with(&["eval", "--oracle"], &tiny(dir.path())));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let kv = std::fs::read_to_string(dir.path().join("eval_report.kv")).unwrap();
    assert!(kv.lines().any(|l| l == "sr=1.0"), "{kv}");
    assert!(dir.path().join("eval_report.txt").exists());
    assert!(dir.path().join("manifest_eval.json").exists());
}

#[test]
fn gen_worlds_writes_splits_and_vocab() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&vln(&with(&["gen-worlds"], &tiny(dir.path())))), 0);
    for split in ["train", "stage2", "eval"] {
        let n = std::fs::read_dir(dir.path().join("worlds").join(split)).unwrap().count();
        assert!(n >= 3, "{split}: {n} files");
    }
    assert!(dir.path().join("vocab.txt").exists());
}

#[test]
fn train_dagger_eval_plot_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let args = tiny(dir.path());
    for cmd in [&["train"][..], &["dagger"], &["eval"]] {
        let out = vln(&with(cmd, &args));
        assert_eq!(code(&out), 0, "{cmd:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let bogus = dir.path().join("bogus.json");
    std::fs::write(&bogus, "{ not json").unwrap();
    let plots = dir.path().join("plots");
    let manifests = ["manifest_train.json", "manifest_dagger.json", "manifest_eval.json"].map(|m| dir.path().join(m));
    let mut plot_args = vec!["plot", "--out", plots.to_str().unwrap(), bogus.to_str().unwrap()];
    plot_args.extend(manifests.iter().map(|p| p.to_str().unwrap()));
    let out = vln(&plot_args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("skipped 1"));
    assert!(std::fs::read_dir(&plots).unwrap().count() > 0);

    assert_ne!(code(&vln(&["plot", "--out", plots.to_str().unwrap(), bogus.to_str().unwrap()])), 0);
}
