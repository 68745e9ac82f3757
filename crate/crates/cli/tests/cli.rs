use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "seed": 3,
  "model": {"num_layers": 1, "model_dim": 16, "ffn_dim": 32, "heads": 2, "vocab_size": 12, "max_len": 7},
  "train": {"batch_size": 16, "adam": {"schedule": {"kind": "inverse_sqrt", "peak": 0.003, "warmup": 40}, "beta1": 0.9, "beta2": 0.98, "eps": 1e-9}},
  "general": {
    "data": {"name": "general", "task": {"kind": "copy"}, "vocab_size": 10, "min_len": 2, "max_len": 5, "train": 300, "dev": 20, "test": 20},
    "steps": 60
  },
  "extraction": {
    "schedule": {"kind": "cubic", "initial_sparsity": 0.0, "final_sparsity": 0.5, "start_step": 0, "prune_interval": 10, "num_prunings": 3},
    "steps": 30
  },
  "domains": [
    {"data": {"name": "rev", "task": {"kind": "reverse"}, "vocab_size": 10, "min_len": 2, "max_len": 5, "train": 60, "dev": 10, "test": 10},
     "warmup_steps": 5, "tune_steps": 20},
    {"data": {"name": "shf", "task": {"kind": "shift", "k": 2}, "vocab_size": 10, "min_len": 2, "max_len": 5, "train": 60, "dev": 10, "test": 10},
     "warmup_steps": 5, "tune_steps": 20}
  ],
  "eval_every": 10,
  "fisher_batches": 2
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("config.json");
    if !cfg.exists() {
        std::fs::write(&cfg, CONFIG).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_prunetune"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn failure(dir: &Path, args: &[&str]) -> serde_json::Value {
    let out = run(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    let line = err.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| serde_json::json!({ "raw": err }))
}

#[test]
fn staged_workflow_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();

    let data: serde_json::Value = serde_json::from_str(&ok(d, &["gen-data"])).unwrap();
    assert_eq!(data["domains"].as_array().unwrap().len(), 3);
    assert!(d.join("out/data/rev.train.src").exists());

    let general: serde_json::Value = serde_json::from_str(&ok(d, &["train-general"])).unwrap();
    assert_eq!(general["step"], 60);

    let extracted: serde_json::Value = serde_json::from_str(&ok(d, &["extract-subnet"])).unwrap();
    assert_eq!(extracted["domains"], serde_json::json!(["general"]));

    let table = ok(d, &["adapt", "--sequential"]);
    assert!(table.contains("prune-tune") && table.contains("rev") && table.contains("shf"));

    let masks = ok(d, &["inspect-masks", "--stage", "adapted-prune-tune-sequential"]);
    assert!(masks.contains("TOTAL") && masks.contains("shf"));
    assert!(ok(d, &["inspect-masks", "--list"]).contains("general"));

    let eval: serde_json::Value = serde_json::from_str(&ok(d, &["evaluate", "--domain", "rev"])).unwrap();
    assert_eq!(eval["source"], "adapted-prune-tune-sequential");
    let acc = eval["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let beam: serde_json::Value =
        serde_json::from_str(&ok(d, &["evaluate", "--domain", "general", "--beam", "3"])).unwrap();
    assert_eq!(beam["beam_width"], 3);

    let base = ok(d, &["baseline", "--strategy", "ewc", "--lambda", "2.0"]);
    assert!(base.contains("ewc"));
    let ckpt = d.join("out/models/ewc-rev.ckpt");
    let from_ckpt: serde_json::Value =
        serde_json::from_str(&ok(d, &["evaluate", "--domain", "rev", "--checkpoint", ckpt.to_str().unwrap()])).unwrap();
    assert!(from_ckpt["accuracy"].is_number());

    let report = ok(d, &["report"]);
    assert!(report.contains("prune-tune") && report.contains("ewc"));
}

#[test]
fn sweeps_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = ok(d, &["sweep", "fraction", "--values", "0.5,1.0"]);
    assert!(out.contains("fraction0.5"));
    let csv = std::fs::read_to_string(d.join("out/reports/lowresource.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let cfg: serde_json::Value = serde_json::from_str(&ok(d, &["--seed", "11", "config"])).unwrap();
    assert_eq!(cfg["seed"], 11);
    assert_eq!(cfg["freeze_shared"], true);
}

#[test]
fn failures_exit_nonzero_with_structured_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();

    let unknown = failure(d, &["evaluate", "--domain", "nowhere"]);
    assert_eq!(unknown["error"], "cli");
    assert!(unknown["message"].as_str().unwrap().contains("nowhere"));

    let wrong_flag = failure(d, &["baseline", "--strategy", "finetune", "--alpha", "0.3"]);
    assert!(wrong_flag["message"].as_str().unwrap().contains("--alpha"));

    let missing = failure(d, &["inspect-masks", "--masks", "/nonexistent.masks"]);
    assert_eq!(missing["error"], "io");

    std::fs::write(d.join("bad.masks"), b"PTMASK01garbage").unwrap();
    let corrupt = failure(d, &["inspect-masks", "--masks", d.join("bad.masks").to_str().unwrap()]);
    assert_eq!(corrupt["error"], "truncated");

    let over = failure(d, &["extract-subnet", "--sparsity", "1.5"]);
    assert_eq!(over["error"], "contract");

    let out = run(d, &["no-such-command"]);
    assert!(!out.status.success());
}
