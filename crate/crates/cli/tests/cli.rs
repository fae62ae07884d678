use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn iconoforge(store: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iconoforge"))
        .arg("--store")
        .arg(store)
        .args(args)
        .output()
        .expect("spawn iconoforge")
}

fn ok(store: &Path, args: &[&str]) -> Value {
    let out = iconoforge(store, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    serde_json::from_slice(&out.stdout).expect("json summary")
}

fn runs(dir: &Path, command: &str) -> Vec<Value> {
    let mut out = Vec::new();
    let Ok(rd) = fs::read_dir(dir.join("runs")) else {
        return out;
    };
    for e in rd.flatten() {
        let name = e.file_name().to_string_lossy().to_string();
        if name.ends_with(&format!("-{command}.json")) {
            out.push(serde_json::from_slice(&fs::read(e.path()).unwrap()).unwrap());
        }
    }
    out
}

/// Fixture, ingest, dedup, fragments, keyword labels, figure filter.
fn curated(dir: &Path, n: &str) -> std::path::PathBuf {
    let store = dir.join("store");
    let fx = dir.join("fx");
    ok(&store, &["fixture", "--out", fx.to_str().unwrap(), "--n-per-class", n, "--seed", "3"]);
    let manifest = fx.join("manifest.jsonl");
    let ing = ok(&store, &["ingest", "--manifest", manifest.to_str().unwrap(), "--source", "fixture"]);
    assert!(ing["stored"].as_u64().unwrap() > 0);
    let dd = ok(&store, &["dedup", "--threshold", "10"]);
    assert_eq!(dd["exact_removed"], 5);
    ok(&store, &["filter", "--fragments"]);
    ok(&store, &["label"]);
    ok(&store, &["filter", "--pose"]);
    store
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = iconoforge(tmp.path(), &["split", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = iconoforge(tmp.path(), &["nonsense"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_without_model_names_the_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("store");
    let out = iconoforge(&store, &["eval", "--split", "test"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.ifm") && err.contains("not found"), "{err}");

    let out = iconoforge(&store, &["dedup"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("records.jsonl"));
}

#[test]
fn split_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let store = curated(tmp.path(), "10");
    ok(&store, &["split", "--seed", "42"]);
    let first = fs::read(store.join("splits.jsonl")).unwrap();
    let summary = ok(&store, &["split", "--seed", "42"]);
    assert_eq!(fs::read(store.join("splits.jsonl")).unwrap(), first);
    assert!(summary["train"].as_u64().unwrap() > summary["test"].as_u64().unwrap());
    ok(&store, &["split", "--seed", "43"]);
    assert_ne!(fs::read(store.join("splits.jsonl")).unwrap(), first);

    let manifests = runs(&store, "split");
    assert_eq!(manifests.len(), 3);
    let m = &manifests[0];
    assert!(m["seed"].is_u64());
    assert!(m["args"].as_array().unwrap().iter().any(|a| a == "split"));
    assert!(m["inputs"].as_array().unwrap().iter().all(|i| i["md5"].as_str().is_some_and(|h| h.len() == 32)));
    let out = iconoforge(&store, &["split", "--ratios", "0.5,0.5"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_overrides_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let store = curated(tmp.path(), "10");
    let cfg = tmp.path().join("pipeline.toml");
    fs::write(&cfg, "[seeds]\nsplit = 42\n").unwrap();
    ok(&store, &["--config", cfg.to_str().unwrap(), "split"]);
    let a = fs::read(store.join("splits.jsonl")).unwrap();
    ok(&store, &["split", "--seed", "42"]);
    assert_eq!(fs::read(store.join("splits.jsonl")).unwrap(), a);
    fs::write(&cfg, "[seeds]\nsplitt = 1\n").unwrap();
    let out = iconoforge(&store, &["--config", cfg.to_str().unwrap(), "split"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pipeline.toml"));
}

#[test]
fn full_pipeline_on_the_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let store = curated(tmp.path(), "12");
    ok(&store, &["split"]);
    let stats = ok(&store, &["stats", "--cooccurrence"]);
    assert!(stats["split_sizes"]["train"].as_u64().unwrap() > 0);
    assert!(stats["cooccurrence"].is_object());

    let out = iconoforge(&store, &["train", "--epochs", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("backbone.ifw"));

    ok(&store, &["pretrain", "--epochs", "2", "--n-per-class", "12"]);
    let trained = ok(&store, &["train", "--epochs", "3", "--freeze", "stem+block2"]);
    assert_eq!(trained["epochs"], 3);
    assert!(store.join("model.ifm").is_file());

    let report = ok(&store, &["eval", "--split", "test"]);
    let path = report["report"].as_str().unwrap();
    let full: Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    assert_eq!(full["report"]["confusion"]["counts"].as_array().unwrap().len(), 11);
    assert!(full["top1_accuracy"].as_f64().unwrap() >= 0.0);

    let record = fs::read_to_string(store.join("splits.jsonl")).unwrap();
    let first: Value = serde_json::from_str(record.lines().next().unwrap()).unwrap();
    let id = first["record_id"].as_str().unwrap();
    let cam = ok(&store, &["cam", "--record", id, "--alpha", "0.4"]);
    let png = image::open(cam["overlay"].as_str().unwrap()).unwrap();
    assert_eq!(png.width(), png.height());

    let image = fs::read_dir(store.join("images")).unwrap().next().unwrap().unwrap().path();
    let pred = ok(&store, &["predict", "--image", image.to_str().unwrap()]);
    assert_eq!(pred["scores"].as_object().unwrap().len(), 10);

    let proposed = ok(&store, &["propose", "--threshold", "0.9"]);
    assert!(store.join("proposals.jsonl").is_file());
    assert!(proposed["scanned"].as_u64().unwrap() > 0);

    let abl = ok(&store, &["ablation", "--levels", "stem+block2,all_backbone", "--epochs", "1"]);
    assert_eq!(abl["runs"].as_array().unwrap().len(), 2);
    let csv = fs::read_to_string(store.join("reports/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    for command in ["ingest", "dedup", "filter", "label", "split", "pretrain", "train", "predict", "propose"] {
        assert!(!runs(&store, command).is_empty(), "{command} wrote no run manifest");
    }
    let reports = store.join("reports");
    for command in ["stats", "eval", "ablation"] {
        assert!(!runs(&reports, command).is_empty(), "{command} wrote no run manifest");
    }
    assert!(!runs(&reports.join("cams"), "cam").is_empty());
    assert!(!runs(&tmp.path().join("fx"), "fixture").is_empty());
    assert_eq!(runs(&store, "train")[0]["seed"], 0);
}
