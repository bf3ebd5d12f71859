use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;
use solobot_core::model::load_checkpoint;

fn solobot(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_solobot"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY: &[&str] = &[
    "--d-model", "16", "--layers", "1", "--heads", "2", "--vocab-size", "300", "--max-len", "256",
    "--batch-size", "8",
];

fn synth(dir: &Path, domain: &str, dialogs: &str, seed: &str) {
    let out = solobot(
        dir,
        &[
            "synth", "--domain", domain, "--dialogs", dialogs, "--seed", seed,
            "--out", &format!("{domain}.json"), "--db", &format!("{domain}.db.json"),
        ],
    );
    ok(&out);
}

#[test]
fn dry_run_echoes_config_with_precedence() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.json"),
        r#"{"seed": 5, "decode": {"top_p": 0.3, "temperature": 0.7}, "train": {"epochs": 3}}"#,
    )
    .unwrap();
    let out = solobot(
        dir.path(),
        &["pretrain", "--config", "run.json", "--top-p", "0.4", "--dry-run"],
    );
    ok(&out);
    let cfg: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["command"], "pretrain");
    assert_eq!(cfg["decode"]["top_p"], 0.4, "flag beats file");
    assert_eq!(cfg["decode"]["temperature"], 0.7, "file beats default");
    assert_eq!(cfg["train"]["epochs"], 3);
    assert_eq!(cfg["seed"], 5);
    assert_eq!(cfg["max_len"], 512, "default");
    assert!(!dir.path().join("model.ckpt").exists());
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = solobot(dir.path(), &["pretrain", "--corpus", "missing.json", "--db", "x", "--out", "m"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
    let out = solobot(dir.path(), &["eval", "--top-p", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    let out = solobot(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let out = solobot(dir.path(), &["pretrain", "--optimizer", "lbfgs"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pipeline_from_synth_to_chat() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "hotel", "8", "1");
    synth(d, "attraction", "8", "2");
    synth(d, "restaurant", "6", "3");
    assert!(d.join("hotel.json.config.json").exists());

    // Pretrain on two domains.
    let mut args = vec![
        "pretrain", "--corpus", "hotel.json", "--corpus", "attraction.json",
        "--db", "hotel.db.json", "--db", "attraction.db.json", "--db", "restaurant.db.json",
        "--out", "base.ckpt", "--epochs", "1", "--seed", "7", "--dump-text", "train.txt",
    ];
    args.extend_from_slice(TINY);
    ok(&solobot(d, &args));
    for f in ["base.ckpt", "base.ckpt.vocab.json", "base.ckpt.history.jsonl", "base.ckpt.config.json", "train.txt"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    let dump = std::fs::read_to_string(d.join("train.txt")).unwrap();
    assert!(dump.contains("=> Belief State :") && dump.contains("<EOS>"));
    let resolved: Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("base.ckpt.config.json")).unwrap()).unwrap();
    assert_eq!(resolved["vocab"], "base.ckpt.vocab.json");
    assert_eq!(resolved["model"]["seed"], 7);

    // Zero epochs leaves the parameters unchanged.
    let common = [
        "--vocab", "base.ckpt.vocab.json", "--db", "hotel.db.json", "--db", "attraction.db.json",
        "--db", "restaurant.db.json",
    ];
    let mut args = vec![
        "finetune", "--checkpoint", "base.ckpt", "--corpus", "restaurant.json", "--out", "same.ckpt",
        "--epochs", "0",
    ];
    args.extend_from_slice(&common);
    ok(&solobot(d, &args));
    let a = load_checkpoint(&d.join("base.ckpt")).unwrap();
    let b = load_checkpoint(&d.join("same.ckpt")).unwrap();
    assert_eq!(a.tensors(), b.tensors());

    let mut args = vec![
        "finetune", "--checkpoint", "base.ckpt", "--corpus", "restaurant.json", "--out", "tuned.ckpt",
        "--epochs", "1",
    ];
    args.extend_from_slice(&common);
    ok(&solobot(d, &args));
    assert_ne!(load_checkpoint(&d.join("tuned.ckpt")).unwrap().tensors(), a.tensors());

    // A vocabulary that does not fit the checkpoint is a validation error.
    let out = solobot(
        d,
        &[
            "pretrain", "--corpus", "restaurant.json", "--db", "restaurant.db.json", "--out", "other.ckpt",
            "--epochs", "0", "--vocab-size", "280", "--d-model", "16", "--layers", "1", "--heads", "2",
        ],
    );
    ok(&out);
    let mut args = vec![
        "finetune", "--checkpoint", "base.ckpt", "--corpus", "restaurant.json", "--out", "bad.ckpt",
        "--vocab", "other.ckpt.vocab.json", "--db", "restaurant.db.json",
    ];
    args.push("--epochs");
    args.push("1");
    let out = solobot(d, &args);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));

    // Eval writes a report; the same seed reproduces it.
    let mut args = vec![
        "eval", "--checkpoint", "tuned.ckpt", "--corpus", "restaurant.json", "--report", "r1.json",
        "--top-p", "0.3",
    ];
    args.extend_from_slice(&common);
    ok(&solobot(d, &args));
    args[6] = "r2.json";
    ok(&solobot(d, &args));
    let r1 = std::fs::read_to_string(d.join("r1.json")).unwrap();
    assert_eq!(r1, std::fs::read_to_string(d.join("r2.json")).unwrap());
    let report: Value = serde_json::from_str(&r1).unwrap();
    for key in ["inform", "success", "bleu", "combined", "joint_goal_accuracy"] {
        assert!(report[key].is_number(), "{key}");
    }
    let table = std::fs::read_to_string(d.join("r1.json.txt")).unwrap();
    assert!(table.starts_with("Inform"));

    // Missing database is a validation error.
    let out = solobot(
        d,
        &["eval", "--checkpoint", "tuned.ckpt", "--corpus", "restaurant.json", "--vocab", "base.ckpt.vocab.json"],
    );
    assert_eq!(out.status.code(), Some(1));

    // Chat until "quit" and keep a transcript.
    let mut child = Command::new(env!("CARGO_BIN_EXE_solobot"))
        .current_dir(d)
        .env("RUST_LOG", "warn")
        .args([
            "chat", "--checkpoint", "tuned.ckpt", "--vocab", "base.ckpt.vocab.json", "--db",
            "restaurant.db.json", "--corpus", "restaurant.json", "--transcript", "chat.json", "--seed", "3",
        ])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"i want a cheap restaurant .\nquit\nnever read\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.matches("system> ").count(), 1);
    assert!(stdout.contains("belief: ") && stdout.contains("db: "));
    let log: Value = serde_json::from_str(&std::fs::read_to_string(d.join("chat.json")).unwrap()).unwrap();
    assert_eq!(log["turns"].as_array().unwrap().len(), 1);
    assert_eq!(log["turns"][0]["user"], "i want a cheap restaurant .");
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "restaurant", "4", "1");
    let mut args = vec![
        "pretrain", "--corpus", "restaurant.json", "--db", "restaurant.db.json",
        "--vocab", "v.json", "--out", "no/such/dir/model.ckpt", "--epochs", "0",
    ];
    args.extend_from_slice(TINY);
    let out = solobot(d, &args);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
