//! Runs the `side` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn side(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_side")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small two-moons data and a quickly trained source model in `dir`.
fn prepare(dir: &Path) {
    let out = side(&["gen-data", "--n-per-class", "20", "--seed", "3", "--out-dir", path(dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = side(&[
        "pretrain",
        "--source",
        path(&dir.join("source.csv")),
        "--out",
        path(&dir.join("source_model.json")),
        "--log",
        path(&dir.join("pretrain.csv")),
        "--source-epochs",
        "50",
        "--source-lr-backbone",
        "0.1",
        "--source-lr-classifier",
        "0.1",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn adapt(dir: &Path, run: &str, extra: &[&str]) -> Output {
    let model = dir.join("source_model.json");
    let target = dir.join("target.csv");
    let out_dir = dir.join(run);
    let mut args = vec![
        "adapt",
        "--model",
        path(&model),
        "--target",
        path(&target),
        "--out-dir",
        path(&out_dir),
        "--epochs",
        "6",
        "--n-m",
        "3",
        "--r",
        "3",
        "--batch-size",
        "8",
    ];
    args.extend_from_slice(extra);
    side(&args)
}

#[test]
fn pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    for name in ["source.csv", "source.json", "target.csv", "target.json", "source_heldout.csv"] {
        assert!(d.join(name).exists(), "{name}");
    }
    assert_eq!(fs::read_to_string(d.join("pretrain.csv")).unwrap().lines().count(), 51);

    let out = adapt(d, "run", &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = d.join("run");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    for key in ["final_target_acc", "source_only_acc"] {
        let acc = summary[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc), "{key}");
    }
    let refreshes = summary["per_refresh_intermediate_acc"].as_array().unwrap();
    assert_eq!(refreshes[0]["epoch"], 1);

    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,L_int,L_gap,L_sam,L_cls,L_total"));
    assert_eq!(metrics.lines().count(), 7);
    let dump = fs::read_to_string(run.join("intermediate.csv")).unwrap();
    assert_eq!(dump.lines().next(), Some("epoch,class,sample_id,distance"));
    // 3 per class, 2 classes, one block per refresh
    assert_eq!(dump.lines().count() - 1, 6 * refreshes.len());

    let out = side(&["eval", "--model", path(&run.join("model.json")), "--data", path(&d.join("target.csv"))]);
    assert_eq!(code(&out), 0);
    let eval: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(eval["accuracy"], summary["final_target_acc"]);
    assert_eq!(eval["n"], 40);

    let emb = d.join("emb.csv");
    let out = side(&[
        "export-embeddings",
        "--model",
        path(&run.join("model.json")),
        "--data",
        path(&d.join("target.csv")),
        "--out",
        path(&emb),
        "--n-m",
        "3",
    ]);
    assert_eq!(code(&out), 0);
    let emb = fs::read_to_string(emb).unwrap();
    assert_eq!(emb.lines().count(), 41);
    let flagged = emb.lines().skip(1).filter(|l| l.split(',').nth(1) == Some("1")).count();
    assert_eq!(flagged, 6);
}

#[test]
fn runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    assert_eq!(code(&adapt(d, "a", &[])), 0);
    assert_eq!(code(&adapt(d, "b", &[])), 0);
    for name in ["metrics.csv", "model.json", "intermediate.csv"] {
        assert_eq!(fs::read(d.join("a").join(name)).unwrap(), fs::read(d.join("b").join(name)).unwrap(), "{name}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    let cfg = d.join("cfg.json");
    fs::write(&cfg, r#"{"epochs": 2, "cyclic_filtering": false}"#).unwrap();
    // the helper passes --epochs 6, which wins over the file
    let out = adapt(d, "run", &["--config", path(&cfg)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(d.join("run").join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 7);
    let refreshes = metrics.lines().skip(1).filter(|l| l.ends_with(",1")).count();
    assert_eq!(refreshes, 1);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);

    assert_eq!(code(&adapt(d, "x", &["--alpha", "2"])), 2);
    let typo = d.join("typo.json");
    fs::write(&typo, r#"{"alhpa": 0.3}"#).unwrap();
    assert_eq!(code(&adapt(d, "x", &["--config", path(&typo)])), 2);
    assert_eq!(code(&side(&["adapt", "--no-such-flag"])), 2);
    assert_eq!(code(&side(&["grad-check", "--loss", "nope"])), 2);

    let diverge = adapt(d, "x", &["--lr-backbone", "1e200", "--lr-classifier", "1e200", "--lr-projector", "1e200"]);
    assert_eq!(code(&diverge), 3);
    assert!(String::from_utf8_lossy(&diverge.stderr).contains("epoch"));

    let missing = d.join("absent.json");
    let out = side(&["eval", "--model", path(&missing), "--data", path(&d.join("target.csv"))]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.json"));

    let bad = d.join("bad.csv");
    fs::write(&bad, "id,label,f0,f1\n0,0,1.0,oops\n").unwrap();
    fs::copy(d.join("target.json"), d.join("bad.json")).unwrap();
    let out = side(&["eval", "--model", path(&d.join("source_model.json")), "--data", path(&bad)]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn grad_check_passes_for_one_term() {
    let out = side(&["grad-check", "--loss", "gap", "--instances", "2"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("gap: max relative error"));
}

#[test]
fn gen_data_blobs_keep_class_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = side(&[
        "gen-data",
        "--family",
        "gauss-blobs",
        "--k",
        "4",
        "--translation",
        "1,2,3",
        "--n-per-class",
        "5",
        "--out-dir",
        path(d),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("target.json")).unwrap()).unwrap();
    assert_eq!(manifest["K"], 4);
    assert_eq!(manifest["role"], "target");
    let header = fs::read_to_string(d.join("source.csv")).unwrap();
    assert_eq!(header.lines().next(), Some("id,label,f0,f1,f2"));
    assert_eq!(header.lines().count(), 21);
}
