use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
seed = 3
tasks = stand, walk
embodiments_eval = light, heavy
episodes = 8
episode_len = 20
eval_episodes = 2
batch = 2
seq_len = 8
pretrain_steps = 3
behavior_steps = 2
log_every = 2
horizon = 3
";

fn bitagent(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.cfg");
    if !cfg.exists() {
        std::fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_bitagent"))
        .arg("--config")
        .arg(&cfg)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn evaluate_without_checkpoint_fails_with_a_hint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = bitagent(dir.path(), &["--out", run.to_str().unwrap(), "evaluate"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no checkpoint"), "{err}");
}

#[test]
fn unknown_config_key_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "sead = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_bitagent"))
        .arg("--config")
        .arg(&cfg)
        .arg("show-config")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key `sead`"));
}

#[test]
fn pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let a_s = a.to_str().unwrap();

    ok(bitagent(dir.path(), &["--out", a_s, "collect"]));
    assert!(a.join("data/light.bin").exists());
    ok(bitagent(dir.path(), &["--out", a_s, "pretrain"]));
    let pre = a.join("pretrain/checkpoint.ckpt");
    ok(bitagent(dir.path(), &["--out", a_s, "train", "--init", pre.to_str().unwrap()]));
    for f in ["checkpoint.ckpt", "manifest.txt", "metrics.csv", "reward_curves.svg", "gates.svg"] {
        assert!(a.join("train").join(f).exists(), "missing train/{f}");
    }
    let eval = ok(bitagent(dir.path(), &["--out", a_s, "evaluate"]));
    assert!(String::from_utf8_lossy(&eval.stdout).contains("heavy"));
    let scores = std::fs::read_to_string(a.join("eval/scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + 2 * 2);
    for f in ["gates.svg", "trace_light_walk.svg", "imagined_heavy_stand.svg"] {
        assert!(a.join("eval").join(f).exists(), "missing eval/{f}");
    }

    let metrics = std::fs::read_to_string(a.join("train/metrics.csv")).unwrap();
    assert!(metrics.lines().skip(1).all(|l| l.contains(",behavior,")), "{metrics}");

    let manifest = std::fs::read_to_string(a.join("train/manifest.txt")).unwrap();
    assert!(manifest.contains("dataset.light = "));
    assert!(manifest.contains("param_count = "));
}

#[test]
fn metrics_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(bitagent(dir.path(), &["--out", a.to_str().unwrap(), "train"]));
    ok(bitagent(dir.path(), &["--out", b.to_str().unwrap(), "train"]));
    assert_eq!(
        std::fs::read(a.join("train/metrics.csv")).unwrap(),
        std::fs::read(b.join("train/metrics.csv")).unwrap()
    );
}

#[test]
fn evaluate_refuses_a_different_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let r = run.to_str().unwrap();
    ok(bitagent(dir.path(), &["--out", r, "train"]));
    ok(bitagent(dir.path(), &["--out", r, "--seed", "99", "collect"]));
    let out = bitagent(dir.path(), &["--out", r, "evaluate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--allow-dataset-mismatch"));
    ok(bitagent(dir.path(), &["--out", r, "evaluate", "--allow-dataset-mismatch"]));
}
