mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::tiny_config;

fn skillplan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skillplan")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn tiny_config_file(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    fs::write(&path, tiny_config().to_text()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&skillplan(&[])), 2);
    assert_eq!(code(&skillplan(&["train"])), 2);
    assert_eq!(code(&skillplan(&["eval"])), 2);
    assert_eq!(code(&skillplan(&["frobnicate"])), 2);
    assert_eq!(code(&skillplan(&["--help"])), 0);
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = skillplan(&["eval", "--checkpoint", "/nonexistent/ckpt.bin", "--out", out]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = skillplan(&["train", "--data", "/nonexistent/d.skdd", "--out", out]);
    assert_eq!(code(&o), 1);
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "horizon = banana\n").unwrap();
    let o = skillplan(&["gen-data", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(code(&o), 1);
    let o = skillplan(&["eval", "--random", "--families", "klingon", "--out", out]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_passes() {
    let o = skillplan(&["gradcheck", "--seeds", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(String::from_utf8_lossy(&o.stdout).matches(" pass").count(), 8);
}

#[test]
fn end_to_end_run_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config_file(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let out = out.to_str().unwrap();
        let data = format!("{out}/dataset.skdd");
        let ckpt = format!("{out}/checkpoint.bin");
        for args in [
            vec!["gen-data", "--num", "12"],
            vec!["train", "--data", &data],
            vec!["eval", "--checkpoint", &ckpt, "--episodes", "1"],
            vec!["heatmap", "--checkpoint", &ckpt, "--data", &data],
        ] {
            let mut full = args.clone();
            full.extend(["--config", &cfg, "--seed", "9", "--out", out]);
            let o = skillplan(&full);
            assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        }
        dir.path().join(name)
    };
    let (a, b) = (run("a"), run("b"));
    for f in [
        "dataset.skdd",
        "dataset_summary.csv",
        "checkpoint.bin",
        "metrics.csv",
        "config.txt",
        "vocab.txt",
        "eval.csv",
        "episodes.txt",
        "heatmap.csv",
        "heatmap_top5.txt",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let eval = fs::read_to_string(a.join("eval.csv")).unwrap();
    // 6 tasks x 5 families, then per-family aggregates for the seed and overall
    assert_eq!(eval.lines().count(), 1 + 30 + 5 + 5);
}

#[test]
fn flat_checkpoints_need_the_flat_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config_file(dir.path());
    let out = dir.path().to_str().unwrap();
    let data = format!("{out}/dataset.skdd");
    assert_eq!(code(&skillplan(&["gen-data", "--num", "6", "--config", &cfg, "--out", out])), 0);
    assert_eq!(code(&skillplan(&["train", "--flat", "--data", &data, "--config", &cfg, "--out", out])), 0);
    let ckpt = format!("{out}/checkpoint.bin");
    let o = skillplan(&["eval", "--checkpoint", &ckpt, "--episodes", "1", "--config", &cfg, "--out", out]);
    assert_eq!(code(&o), 1);
    let o = skillplan(&["eval", "--flat", "--checkpoint", &ckpt, "--episodes", "1", "--config", &cfg, "--out", out]);
    assert_eq!(code(&o), 0);
    let o = skillplan(&["heatmap", "--checkpoint", &ckpt, "--data", &data, "--config", &cfg, "--out", out]);
    assert_eq!(code(&o), 1);
}
