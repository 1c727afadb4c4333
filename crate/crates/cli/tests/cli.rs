use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ovseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovseg"))
        .current_dir(dir)
        .args(args)
        .env_remove("RUST_BACKTRACE")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ovseg(dir, args);
    assert!(
        out.status.success(),
        "ovseg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

// Small dataset plus a few training steps, shared by the train/eval tests.
fn tiny_run(dir: &Path, extra: &[&str]) -> PathBuf {
    ok(
        dir,
        &["synth", "--out", "ds", "--images", "4", "--size", "32", "--classes", "3", "--seed", "1"],
    );
    let mut args = vec![
        "train", "--data", "ds/manifest.json", "--run-dir", "run", "--steps", "3",
        "--set", "model.embed_dim=8", "--set", "model.feature_dim=8", "--set", "model.window=3", "--set", "train.warmup_steps=0",
        "--set", "train.batch_size=2", "--set", "train.diag_every=1",
    ];
    args.extend_from_slice(extra);
    ok(dir, &args);
    dir.join("run")
}

#[test]
fn help_and_unknown_flags() {
    let d = tempfile::tempdir().unwrap();
    assert!(ovseg(d.path(), &["--help"]).status.success());
    assert!(ovseg(d.path(), &["train", "--help"]).status.success());
    assert!(!ovseg(d.path(), &["synth", "--out", "x", "--no-such-flag"]).status.success());
    assert!(!ovseg(d.path(), &["frobnicate"]).status.success());
}

#[test]
fn synth_writes_pairs_and_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let args = ["synth", "--images", "32", "--classes", "4", "--size", "64", "--seed", "7"];
    ok(d.path(), &[&args[..], &["--out", "a"]].concat());
    ok(d.path(), &[&args[..], &["--out", "b"]].concat());
    let a = tree(&d.path().join("a"));
    let pngs = a.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "png")).count();
    assert_eq!(pngs, 64);
    assert!(a.iter().any(|(p, _)| p == Path::new("manifest.json")));
    assert_eq!(a, tree(&d.path().join("b")));

    let out = ovseg(d.path(), &["synth", "--out", "c", "--images", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_images"));
}

#[test]
fn validate_flags_broken_datasets() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth", "--out", "ds", "--images", "2", "--size", "16"]);
    ok(d.path(), &["validate", "ds/manifest.json"]);
    fs::remove_file(d.path().join("ds/masks/0001.png")).unwrap();
    assert!(!ovseg(d.path(), &["validate", "ds/manifest.json"]).status.success());
}

#[test]
fn train_runs_to_completion_and_echoes_config() {
    let d = tempfile::tempdir().unwrap();
    let run = tiny_run(d.path(), &[]);
    assert!(run.join("final.safetensors").exists());
    let log = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| r["loss"].as_f64().unwrap().is_finite()));
    let cfg = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(cfg.contains("total_steps = 3"));
    assert!(cfg.contains("embed_dim = 8"));
}

#[test]
fn config_precedence_file_env_flag() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth", "--out", "ds", "--images", "2", "--size", "32"]);
    fs::write(
        d.path().join("cfg.toml"),
        "[train]\ntotal_steps = 1\nbatch_size = 1\nseed = 1\nbase_lr = 0.5\n[model]\nembed_dim = 4\nfeature_dim = 4\nwindow = 3\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ovseg"))
        .current_dir(d.path())
        .args(["train", "--config", "cfg.toml", "--data", "ds/manifest.json", "--run-dir", "r", "--seed", "3"])
        .env("OVSEG_TRAIN__SEED", "2")
        .env("OVSEG_TRAIN__BASE_LR", "0.25")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = fs::read_to_string(d.path().join("r/config.toml")).unwrap();
    assert!(cfg.contains("seed = 3"), "{cfg}");
    assert!(cfg.contains("base_lr = 0.25"), "{cfg}");
    assert!(cfg.contains("total_steps = 1"), "{cfg}");
}

#[test]
fn identity_spm_parity_is_reported() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth", "--out", "ds", "--images", "2", "--size", "32"]);
    let stdout = ok(
        d.path(),
        &[
            "train", "--data", "ds/manifest.json", "--run-dir", "r", "--steps", "1",
            "--sigma-t", "0", "--zero-image-spm",
            "--set", "model.text_spm=true", "--set", "model.image_spm=true",
            "--set", "model.embed_dim=8", "--set", "model.feature_dim=4", "--set", "model.window=3", "--set", "train.warmup_steps=0",
        ],
    );
    assert!(stdout.contains("parity at init: exact"), "{stdout}");
    assert_eq!(read_json(d.path().join("r/parity.json"))["exact"], Value::Bool(true));
}

#[test]
fn noise_flags_are_recorded_and_checked() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth", "--out", "ds", "--images", "2", "--size", "32"]);
    let base = [
        "train", "--data", "ds/manifest.json", "--steps", "1",
        "--set", "model.embed_dim=4", "--set", "model.feature_dim=4", "--set", "model.window=3", "--set", "train.warmup_steps=0",
    ];
    ok(d.path(), &[&base[..], &["--run-dir", "t", "--noise-family", "student_t", "--df", "10"]].concat());
    let cfg = fs::read_to_string(d.path().join("t/config.toml")).unwrap();
    assert!(cfg.contains("family = \"student_t\""), "{cfg}");
    assert!(cfg.contains("df = 10.0"), "{cfg}");

    let bad = ovseg(d.path(), &[&base[..], &["--run-dir", "u", "--df", "5"]].concat());
    assert!(!bad.status.success());
    let bad = ovseg(d.path(), &[&base[..], &["--run-dir", "u", "--noise-family", "laplace", "--df", "5"]].concat());
    assert!(!bad.status.success());
    let bad = ovseg(d.path(), &[&base[..], &["--run-dir", "u", "--noise-family", "cauchy"]].concat());
    assert!(!bad.status.success());
}

#[test]
fn resume_continues_the_schedule() {
    let d = tempfile::tempdir().unwrap();
    let run = tiny_run(d.path(), &[]);
    ok(
        d.path(),
        &["train", "--resume", "run/final.safetensors", "--run-dir", "run2", "--steps", "5", "--data", "ds/manifest.json"],
    );
    let log = fs::read_to_string(d.path().join("run2/metrics.jsonl")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![3, 4]);
    assert!(run.join("final.safetensors").exists());
    let bad = ovseg(
        d.path(),
        &["train", "--resume", "run/final.safetensors", "--run-dir", "run3", "--set", "train.base_lr=1", "--data", "ds/manifest.json"],
    );
    assert!(!bad.status.success());
}

#[test]
fn eval_single_split_and_cross() {
    let d = tempfile::tempdir().unwrap();
    tiny_run(d.path(), &[]);
    let p = d.path();
    ok(p, &["eval", "--checkpoint", "run/final.safetensors", "ds/manifest.json", "--out", "e1"]);
    let single = read_json(p.join("e1/synthetic.json"));
    assert!(single["miou"].is_f64());
    assert!(p.join("e1/synthetic.txt").exists());
    assert!(!p.join("e1/cross.json").exists());

    ok(
        p,
        &[
            "eval", "--checkpoint", "run/final.safetensors", "ds/manifest.json",
            "--out", "e2", "--split", "seen=background,red;unseen=green",
        ],
    );
    let split = &read_json(p.join("e2/synthetic.json"))["split"];
    assert_eq!(split["unseen_classes"], serde_json::json!(["green"]));

    // a second dataset with a different id
    ok(p, &["synth", "--out", "ds2", "--images", "3", "--size", "32", "--classes", "3", "--seed", "9"]);
    let mut m = read_json(p.join("ds2/manifest.json"));
    m["id"] = Value::String("other".into());
    fs::write(p.join("ds2/manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
    ok(
        p,
        &["eval", "--checkpoint", "run/final.safetensors", "ds/manifest.json", "ds2/manifest.json", "--out", "e3"],
    );
    let a = read_json(p.join("e3/synthetic.json"))["miou"].as_f64().unwrap();
    let b = read_json(p.join("e3/other.json"))["miou"].as_f64().unwrap();
    let cross = read_json(p.join("e3/cross.json"));
    assert!((cross["m_miou"].as_f64().unwrap() - (a + b) / 2.0).abs() < 1e-12);
}

#[test]
fn eval_rejects_incompatible_inputs() {
    let d = tempfile::tempdir().unwrap();
    tiny_run(d.path(), &[]);
    let p = d.path();
    let bad = ovseg(
        p,
        &["eval", "--checkpoint", "run/final.safetensors", "ds/manifest.json", "--out", "e", "--split", "seen=purple"],
    );
    assert!(!bad.status.success());
    let mut cfg = fs::read_to_string(p.join("run/config.toml")).unwrap();
    cfg = cfg.replace("embed_dim = 8", "embed_dim = 16");
    fs::write(p.join("other.toml"), cfg).unwrap();
    let bad = ovseg(
        p,
        &["eval", "--checkpoint", "run/final.safetensors", "ds/manifest.json", "--out", "e", "--config", "other.toml"],
    );
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("does not match"));
    ok(
        p,
        &["eval", "--checkpoint", "run/final.safetensors", "ds/manifest.json", "--out", "e", "--config", "run/config.toml"],
    );
}

#[test]
fn taxonomy_then_overlap() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["synth", "--out", "ds", "--images", "2", "--size", "16", "--classes", "4"]);
    fs::write(p.join("map.tsv"), "background\t<DROP>\nred\tbuilding\ngreen\ttree\nblue\troad\n").unwrap();
    fs::write(p.join("vocab.txt"), "road\nbuilding\ntree\nwater\n").unwrap();
    ok(
        p,
        &["taxonomy", "--manifest", "ds/manifest.json", "--mapping", "map.tsv", "--vocab", "vocab.txt", "--out", "mapped"],
    );
    ok(p, &["validate", "mapped/manifest.json"]);
    fs::write(p.join("train_vocab.txt"), "road\ntree\n").unwrap();
    ok(p, &["overlap", "--vocab", "train_vocab.txt", "mapped/manifest.json", "--out", "ov"]);
    let report = read_json(p.join("ov/overlap.json"));
    assert_eq!(report[0]["raw_unique"], 3);
    assert_eq!(report[0]["covered"], 2);
    assert_eq!(report[0]["test_only"], 1);
    assert!(fs::read_to_string(p.join("ov/overlap.svg")).unwrap().starts_with("<svg"));

    let mut raw = read_json(p.join("ds/manifest.json"));
    raw["taxonomy_mapped"] = Value::Bool(false);
    fs::write(p.join("ds/manifest.json"), serde_json::to_string(&raw).unwrap()).unwrap();
    let bad = ovseg(p, &["overlap", "--vocab", "train_vocab.txt", "ds/manifest.json", "--out", "ov2"]);
    assert!(!bad.status.success());
    fs::write(p.join("partial.tsv"), "red\tbuilding\n").unwrap();
    let bad = ovseg(
        p,
        &["taxonomy", "--manifest", "ds/manifest.json", "--mapping", "partial.tsv", "--vocab", "vocab.txt", "--out", "m2"],
    );
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unmapped"));
}

#[test]
fn plots_and_diagnose() {
    let d = tempfile::tempdir().unwrap();
    tiny_run(d.path(), &["--set", "model.text_spm=true", "--set", "model.image_spm=true"]);
    let p = d.path();
    ok(p, &["plots", "--log", "run/metrics.jsonl", "--out", "pl"]);
    for name in ["gt_in_mean", "non_gt_mean", "gap", "align_ratio"] {
        assert!(p.join(format!("pl/{name}.svg")).exists());
        let csv = fs::read_to_string(p.join(format!("pl/{name}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }
    assert!(p.join("pl/delta_panel.svg").exists());

    ok(
        p,
        &["diagnose", "--checkpoint", "run/final.safetensors", "--manifest", "ds/manifest.json", "--out", "dg"],
    );
    let report = read_json(p.join("dg/diagnostics.json"));
    let m = &report["mean"];
    let gap = m["gap"].as_f64().unwrap();
    assert!((gap - (m["gt_in_mean"].as_f64().unwrap() - m["non_gt_mean"].as_f64().unwrap())).abs() < 1e-12);
}
