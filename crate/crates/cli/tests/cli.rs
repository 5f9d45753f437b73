use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rmgpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rmgpt")).args(args).env("RMGPT_THREADS", "1").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rmgpt(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small model and two tiny datasets referenced from a config file.
fn workspace(root: &Path) -> PathBuf {
    ok(&["data", "synth", "--out", s(&root.join("diag")), "--n", "3", "--seed", "1", "--name", "diag"]);
    ok(&["data", "synth", "--out", s(&root.join("life")), "--kind", "prognosis", "--n", "2", "--life-steps", "5", "--name", "life"]);
    let cfg = root.join("run.toml");
    std::fs::write(
        &cfg,
        r#"preset = "desk"

[model]
d_model = 16
heads = 2
d_ff = 32
layers = 1

[train]
pretrain_epochs = 1
prompt_epochs = 1
finetune_epochs = 1
batch_size = 8

[data]
manifests = ["diag/manifest.toml", "life/manifest.toml"]
"#,
    )
    .unwrap();
    cfg
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = workspace(root);
    let inspect = ok(&["data", "inspect", s(&root.join("diag/manifest.toml"))]);
    assert!(inspect.contains("records 12"), "{inspect}");

    let pre = root.join("pre");
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&pre)]);
    let ckpt = pre.join("model.ckpt");
    assert!(ckpt.exists());
    let summary = std::fs::read_to_string(pre.join("summary.toml")).unwrap();
    assert!(summary.contains("command = \"pretrain\""), "{summary}");

    let adapted = root.join("adapt");
    let out = ok(&["adapt", "--config", s(&cfg), "--out", s(&adapted), "--checkpoint", s(&ckpt)]);
    assert!(out.contains("trainable"), "{out}");
    let out = ok(&["eval", "--config", s(&cfg), "--out", s(&root.join("eval")), "--checkpoint", s(&adapted.join("model.ckpt"))]);
    assert!(out.contains("diag: accuracy") && out.contains("life: mae"), "{out}");

    let exp = root.join("exp");
    ok(&["export-embeddings", "--config", s(&cfg), "--out", s(&exp), "--checkpoint", s(&adapted.join("model.ckpt"))]);
    for f in ["health.csv", "prototypes.csv", "pca.csv"] {
        assert!(exp.join("embeddings/diag").join(f).exists(), "{f}");
    }
}

#[test]
fn same_seed_same_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = workspace(root);
    let hashes: Vec<String> = ["a", "b"]
        .iter()
        .map(|d| {
            let out = ok(&["pretrain", "--config", s(&cfg), "--out", s(&root.join(d)), "--seed", "4"]);
            out.lines().find(|l| l.contains("sha256")).unwrap().split_whitespace().last().unwrap().to_string()
        })
        .collect();
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn bench_reports_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["bench", "--out", s(tmp.path()), "--repeats", "0"]);
    for v in ["orig", "without_patch", "without_tc_attention"] {
        assert!(out.contains(v), "{v} missing:\n{out}");
    }
    assert!(tmp.path().join("bench.toml").exists());
}

#[test]
fn config_errors_exit_2_runtime_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nd_model = 30\nheads = 4\n").unwrap();
    let out = rmgpt(&["pretrain", "--config", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));

    assert_eq!(rmgpt(&["no-such-command"]).status.code(), Some(2));

    let missing = rmgpt(&["data", "inspect", s(&tmp.path().join("absent.toml"))]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn mismatched_checkpoint_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = workspace(root);
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&root.join("pre"))]);
    let out = rmgpt(&["eval", "--preset", "desk", "--out", s(&root.join("e")), "--checkpoint", s(&root.join("pre/model.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint has d_"), "{}", String::from_utf8_lossy(&out.stderr));
}
