//! End-to-end tests of the `t3d` binary: exit codes, file formats and
//! config overrides, on a small corpus with the toy config.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use t3d_core::dataset::read_manifest;
use t3d_core::model::Model;
use t3d_core::training::{load_checkpoint, read_metrics};

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json")
}

fn t3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_t3d"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn ok(out: Output) -> Output {
    assert_eq!(
        code(&out),
        0,
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn synth(dir: &Path, n: usize) -> PathBuf {
    let corpus = dir.join("corpus");
    ok(t3d(&["synth", "--out", corpus.to_str().unwrap(), "--n", &n.to_string(), "--seed", "3"]));
    corpus
}

/// `--override` arguments pointing the toy config at `corpus` and `out`.
fn paths(corpus: &Path, out: &Path) -> Vec<String> {
    vec![
        "--override".into(),
        format!("paths.corpus_dir={}", corpus.display()),
        "--override".into(),
        format!("paths.output_dir={}", out.display()),
    ]
}

fn pretrain(corpus: &Path, out: &Path, extra: &[&str]) -> Output {
    let cfg = toy_config();
    let mut args: Vec<String> = vec!["pretrain".into(), "--config".into(), cfg.display().to_string()];
    args.extend(paths(corpus, out));
    args.extend(extra.iter().map(|s| s.to_string()));
    t3d(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn eval(task: &str, ckpt: &Path, corpus: &Path, out: &Path, extra: &[&str]) -> Output {
    let cfg = toy_config();
    let mut args: Vec<String> = vec![
        "eval".into(),
        "--task".into(),
        task.into(),
        "--checkpoint".into(),
        ckpt.display().to_string(),
        "--config".into(),
        cfg.display().to_string(),
    ];
    args.extend(paths(corpus, out));
    args.extend(extra.iter().map(|s| s.to_string()));
    t3d(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn synth_writes_manifest_vocab_prompts_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 100);
    let records = read_manifest(corpus.join("manifest.jsonl")).unwrap();
    let count = |s: &str| records.iter().filter(|r| serde_json::to_value(r.split).unwrap() == s).count();
    assert_eq!((count("train"), count("val"), count("test")), (80, 10, 10));
    assert!(corpus.join("vocab.txt").is_file());
    let prompts: Value = serde_json::from_str(&fs::read_to_string(corpus.join("prompts.json")).unwrap()).unwrap();
    assert!(!prompts.as_object().unwrap().is_empty());
    assert_eq!(fs::read_dir(corpus.join("volumes")).unwrap().count(), 100);
}

#[test]
fn synth_with_zero_samples_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 0);
    assert!(read_manifest(corpus.join("manifest.jsonl")).unwrap().is_empty());
}

#[test]
fn bad_spec_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"grid_dims": [0, 4, 4]}"#).unwrap();
    let out = t3d(&["synth", "--spec", spec.to_str().unwrap(), "--out", "unused", "--n", "1"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_config_unknown_override_and_axis_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(code(&t3d(&["pretrain", "--config", missing.to_str().unwrap()])), 2);
    let cfg = toy_config();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&t3d(&["pretrain", "--config", cfg, "--override", "no_such_key=1"])), 2);
    assert_eq!(code(&t3d(&["ablate", "--config", cfg, "--axis", "colour"])), 2);
    assert_eq!(code(&t3d(&["eval", "--task", "segment", "--checkpoint", "x", "--config", cfg])), 2);
}

#[test]
fn missing_corpus_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain(&dir.path().join("absent"), &dir.path().join("run"), &[]);
    assert_eq!(code(&out), 3);
}

#[test]
fn pretrain_eval_and_resume_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 40);
    let run = dir.path().join("run");
    ok(pretrain(&corpus, &run, &[]));
    let ckpt = run.join("checkpoint.t3dc");
    let log = read_metrics(run.join("metrics.jsonl")).unwrap();
    // 32 training samples, batches of 8, 3 epochs.
    assert_eq!(log.len(), 12);
    let first: Value = serde_json::from_str(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    let mut keys: Vec<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["epoch", "gca", "lr", "step", "tma", "total", "wall_ms"]);
    assert!(log.iter().all(|r| r.tma > 0.0 && (r.total - r.gca - r.tma).abs() < 1e-12));

    let mut hashes = Vec::new();
    for task in ["retrieval", "zeroshot", "probe"] {
        let report_path = dir.path().join(format!("{task}.json"));
        ok(eval(task, &ckpt, &corpus, &run, &["--out", report_path.to_str().unwrap()]));
        let report: Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
        let mut keys: Vec<&str> = report.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["checkpoint_hash", "config", "metrics", "per_attribute", "task"]);
        assert_eq!(report["task"], task);
        hashes.push(report["checkpoint_hash"].as_str().unwrap().to_string());
    }
    assert!(hashes.iter().all(|h| h == &hashes[0] && h.len() == 64));

    // Default report path.
    ok(eval("retrieval", &ckpt, &corpus, &run, &[]));
    assert!(run.join("eval-retrieval.json").is_file());

    // Resuming with a different config is refused.
    let out = pretrain(&corpus, &run, &["--resume", ckpt.to_str().unwrap(), "--override", "train.base_lr=0.0005"]);
    assert_eq!(code(&out), 5);
    // Evaluating with a different architecture is refused.
    let out = eval("retrieval", &ckpt, &corpus, &run, &["--override", "fusion_layers=2"]);
    assert_eq!(code(&out), 5);
}

#[test]
fn empty_prompt_set_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 20);
    let run = dir.path().join("run");
    ok(pretrain(&corpus, &run, &["--stop-after", "1"]));
    let prompts = dir.path().join("empty.json");
    fs::write(&prompts, "{}").unwrap();
    let override_arg = format!("paths.prompt_file={}", prompts.display());
    let out = eval("zeroshot", &run.join("checkpoint.t3dc"), &corpus, &run, &["--override", &override_arg]);
    assert_eq!(code(&out), 2);
}

#[test]
fn zero_epochs_writes_initial_checkpoint_and_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 20);
    let run = dir.path().join("run");
    ok(pretrain(&corpus, &run, &["--override", "total_epochs=0", "--override", "warmup_epochs=0"]));
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap(), "");
    let state = load_checkpoint(run.join("checkpoint.t3dc")).unwrap();
    assert_eq!(state.step, 0);
    let fresh = Model::new(&state.config.model, state.config.batch_size).unwrap();
    assert_eq!(state.model.store, fresh.store);
}

#[test]
fn tma_weight_zero_leaves_fusion_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 20);
    let run = dir.path().join("run");
    ok(pretrain(&corpus, &run, &["--override", "tma_weight=0", "--stop-after", "4"]));
    let log = read_metrics(run.join("metrics.jsonl")).unwrap();
    assert_eq!(log.len(), 4);
    assert!(log.iter().all(|r| r.tma == 0.0 && r.total == r.gca));

    let state = load_checkpoint(run.join("checkpoint.t3dc")).unwrap();
    let fresh = Model::new(&state.config.model, state.config.batch_size).unwrap();
    let mut fusion = 0;
    for ((_, trained), (_, init)) in state.model.store.iter().zip(fresh.store.iter()) {
        if trained.name.starts_with("fusion.") || trained.name.starts_with("cluster.") {
            assert_eq!(trained.value, init.value, "{} moved", trained.name);
            fusion += 1;
        } else if trained.name.starts_with("proj_v.") {
            assert_ne!(trained.value, init.value, "{} did not move", trained.name);
        }
    }
    assert!(fusion > 0);
}

#[test]
fn interrupted_run_resumes_to_the_same_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 20);
    let whole = dir.path().join("whole");
    ok(pretrain(&corpus, &whole, &["--stop-after", "4"]));
    let parts = dir.path().join("parts");
    ok(pretrain(&corpus, &parts, &["--stop-after", "2"]));
    let ckpt = parts.join("checkpoint.t3dc");
    ok(pretrain(&corpus, &parts, &["--resume", ckpt.to_str().unwrap(), "--stop-after", "4"]));
    assert_eq!(
        fs::read(whole.join("checkpoint.t3dc")).unwrap(),
        fs::read(parts.join("checkpoint.t3dc")).unwrap()
    );
    assert_eq!(
        fs::read(whole.join("metrics.jsonl")).unwrap(),
        fs::read(parts.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 20);
    let mut logs = Vec::new();
    for workers in ["1", "3"] {
        let run = dir.path().join(format!("w{workers}"));
        let cfg = toy_config();
        let mut args: Vec<String> = vec!["pretrain".into(), "--config".into(), cfg.display().to_string()];
        args.extend(paths(&corpus, &run));
        args.extend(["--stop-after".into(), "2".into()]);
        let out = Command::new(env!("CARGO_BIN_EXE_t3d"))
            .args(&args)
            .env("T3D_NUM_WORKERS", workers)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        ok(out);
        logs.push(fs::read(run.join("checkpoint.t3dc")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn help_exits_0() {
    assert_eq!(code(&t3d(&["--help"])), 0);
    assert_eq!(code(&t3d(&["pretrain", "--help"])), 0);
}
