use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pspg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pspg")).args(args).output().expect("spawn pspg")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_exits_2() {
    for args in [
        vec!["eval", "--bogus"],
        vec!["gradcheck", "--nope", "1"],
        vec!["frobnicate"],
    ] {
        let out = pspg(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn runtime_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = pspg(&["eval", "--ckpt", s(&missing), "--data", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    // unknown key in a config file is a config error, not a usage error
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"n_classes": 8, "colour": "red"}"#).unwrap();
    let out = pspg(&["gen-data", "--out", s(&dir.path().join("d")), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_exits_zero() {
    let out = pspg(&["gradcheck", "--instances", "2"]);
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for name in ["image_encoder", "gru_cell", "spcl", "generate_to_loss"] {
        assert!(stdout.contains(name), "{stdout}");
    }
}

/// gen-data → pretrain → prompt-learn → eval on a small config.
#[test]
fn script_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    fs::write(p("data.json"), r#"{"n_train": 200, "n_val": 60, "n_test": 120}"#).unwrap();
    fs::write(p("pre.json"), r#"{"warmup_epochs": 1}"#).unwrap();
    fs::write(
        p("prompt.json"),
        r#"{"warmup_epochs": 1, "model": {"decoder": {"n": 4, "d_h": 16}}}"#,
    )
    .unwrap();

    ok(&pspg(&["gen-data", "--out", s(&p("data")), "--config", s(&p("data.json")), "--seed", "7"]));
    for f in ["images.f32", "meta.json"] {
        assert!(p("data").join(f).exists(), "{f}");
    }

    ok(&pspg(&[
        "pretrain", "--data", s(&p("data")), "--out", s(&p("bb.ckpt")), "--config", s(&p("pre.json")),
        "--epochs", "2", "--log", s(&p("pre.log")),
    ]));
    let log = fs::read_to_string(p("pre.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,phase,lr,loss_asl,loss_spcl,loss_total,val_macro_auc");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,pretrain,"));

    ok(&pspg(&[
        "prompt-learn", "--data", s(&p("data")), "--backbone", s(&p("bb.ckpt")), "--out", s(&p("pr.ckpt")),
        "--config", s(&p("prompt.json")), "--epochs", "2", "--log", s(&p("pr.log")),
    ]));
    assert!(p("pr.ckpt.json").exists());
    let log = fs::read_to_string(p("pr.log")).unwrap();
    assert!(log.lines().nth(1).unwrap().starts_with("0,prompt,"));

    // JSON with CIs
    let out = pspg(&[
        "eval", "--ckpt", s(&p("pr.ckpt")), "--data", s(&p("data")), "--bootstrap", "50", "--seed", "3",
    ]);
    ok(&out);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    for m in ["macro_auc", "micro_auc", "map", "seen_macro_auc", "unseen_macro_auc"] {
        let e = &report[m];
        let (pt, lo, hi) = (e["point"].as_f64().unwrap(), e["lo"].as_f64().unwrap(), e["hi"].as_f64().unwrap());
        assert!((0.0..=1.0).contains(&pt) && lo <= hi, "{m}: {e}");
    }
    assert_eq!(report["resamples"], 50);
    assert_eq!(report["alpha"], 0.05);
    assert_eq!(report["seed"], 3);

    // repeated eval is byte-identical
    let again = pspg(&[
        "eval", "--ckpt", s(&p("pr.ckpt")), "--data", s(&p("data")), "--bootstrap", "50", "--seed", "3",
    ]);
    assert_eq!(out.stdout, again.stdout);

    // --bootstrap 0: point estimates only
    let out = pspg(&["eval", "--ckpt", s(&p("pr.ckpt")), "--data", s(&p("data")), "--bootstrap", "0"]);
    ok(&out);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let macro_ = report["macro_auc"].as_object().unwrap();
    assert!(macro_.contains_key("point"));
    assert!(!macro_.contains_key("lo") && !macro_.contains_key("hi"));

    // config file values apply unless a flag overrides them
    fs::write(p("eval.json"), r#"{"resamples": 0, "batch_size": 32}"#).unwrap();
    let out = pspg(&["eval", "--ckpt", s(&p("pr.ckpt")), "--data", s(&p("data")), "--config", s(&p("eval.json"))]);
    ok(&out);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["resamples"], 0);
    assert!(report["map"].get("lo").is_none());
    let out = pspg(&[
        "eval", "--ckpt", s(&p("pr.ckpt")), "--data", s(&p("data")), "--config", s(&p("eval.json")), "--bootstrap", "20",
    ]);
    ok(&out);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["resamples"], 20);
    assert!(report["map"]["lo"].is_number());

    // CSV, max aggregation, baseline
    let out = pspg(&[
        "eval", "--ckpt", s(&p("pr.ckpt")), "--data", s(&p("data")), "--bootstrap", "0", "--format", "csv",
        "--agg", "max", "--split", "val",
    ]);
    ok(&out);
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv.lines().next(), Some("metric,point"));
    assert!(csv.lines().count() >= 6, "{csv}");
    let out = pspg(&["eval", "--ckpt", s(&p("bb.ckpt")), "--data", s(&p("data")), "--bootstrap", "0"]);
    ok(&out);

    // resume from the prompt checkpoint
    ok(&pspg(&[
        "prompt-learn", "--data", s(&p("data")), "--backbone", s(&p("bb.ckpt")), "--out", s(&p("pr2.ckpt")),
        "--config", s(&p("prompt.json")), "--epochs", "2", "--resume", s(&p("pr.ckpt")), "--log", s(&p("pr2.log")),
    ]));
}
