use std::path::Path;
use std::process::{Command, Output};

const FAST: &[&str] = &[
    "corpus.n_samples=12",
    "corpus.n_test=6",
    "codec.steps=4",
    "codec.hidden=8",
    "generator.steps=3",
    "generator.width=16",
    "generator.heads=2",
    "generator.blocks=1",
    "generator.schedule.t_steps=4",
    "generator.sbca.k=2",
    "eval.seeds=[1]",
    "eval.segmenter.steps=3",
    "eval.null_shuffles=4",
];

fn trigen(root: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_trigen"));
    cmd.arg("--preset").arg("tiny").arg("--run-root").arg(root);
    for s in FAST {
        cmd.arg("--set").arg(s);
    }
    cmd.args(args).output().expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> Output {
    let out = trigen(root, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn full_pipeline_leaves_a_consistent_run_root() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(root, &["gen-corpus", "--out", "corpus"]);
    assert!(root.join("corpus/manifest.json").exists());
    ok(root, &["train-codecs", "--corpus", "corpus", "--out", "codecs"]);
    ok(root, &["train-gen", "--corpus", "corpus", "--codecs", "codecs", "--out", "gen"]);
    assert!(root.join("gen/sampling_weights.csv").exists());
    ok(root, &["sample", "--generator", "gen", "--codecs", "codecs", "--n", "4", "--out", "syn"]);
    ok(root, &["evaluate", "--real", "corpus", "--syn", "syn", "--out", "report"]);
    assert!(root.join("report/report.json").exists());
    ok(root, &["export-weights", "--corpus", "corpus", "--out", "weights.csv"]);
    ok(root, &["check-run"]);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("run_manifest.json")).unwrap()).unwrap();
    let stages: Vec<&str> = manifest["records"].as_array().unwrap().iter().map(|r| r["stage"].as_str().unwrap()).collect();
    assert_eq!(stages, ["gen-corpus", "train-codecs", "train-gen", "sample", "evaluate", "export-weights"]);

    let again = trigen(root, &["gen-corpus", "--out", "corpus"]);
    assert_eq!(code(&again), 2);
    ok(root, &["--force", "gen-corpus", "--out", "corpus"]);

    std::fs::create_dir(root.join("stray")).unwrap();
    let orphan = trigen(root, &["check-run"]);
    assert_eq!(code(&orphan), 3);
    assert!(String::from_utf8_lossy(&orphan.stdout).contains("stray"));
}

#[test]
fn zero_samples_is_a_config_error_that_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = trigen(dir.path(), &["sample", "--generator", "gen", "--codecs", "codecs", "--n", "0", "--out", "syn"]);
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("syn").exists());
    assert!(!dir.path().join("syn.partial").exists());
    let err: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"], "config");
}

#[test]
fn bad_configuration_and_missing_inputs_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&trigen(dir.path(), &["--set", "generator.nope=1", "show-config"])), 2);
    assert_eq!(code(&trigen(dir.path(), &["--set", "generator.lambda=-1", "show-config"])), 2);
    assert_eq!(code(&trigen(dir.path(), &["train-codecs", "--corpus", "missing", "--out", "codecs"])), 3);
    let shown = ok(dir.path(), &["--set", "generator.lambda=0.25", "show-config"]);
    assert!(String::from_utf8_lossy(&shown.stdout).contains("lambda = 0.25"));
}
