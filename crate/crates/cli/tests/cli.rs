use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
    "datagen": {"num_users": 40, "num_items": 60, "events_per_user_range": [8, 12]},
    "lum": {"epochs": 2},
    "dlrm": {"model": {"epochs": 1}, "train_events": 3},
    "sweep": {"model_dims": [4, 8], "holdout_events": 2},
    "bench": {"skewed_users": 8, "max_tokens": 32, "prefix_tokens": 32, "group_queries": 4}
}"#;

fn lum(dir: &Path, out: &str, args: &[&str]) -> Output {
    let config = dir.join("config.json");
    if !config.exists() {
        std::fs::write(&config, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_lum"))
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join(out))
        .args(["--seed", "3"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

const PIPELINE: [&[&str]; 6] = [
    &["gen-data"],
    &["train-lum"],
    &["query", "--user", "2", "--top-k", "4"],
    &["cache-warm"],
    &["train-dlrm"],
    &["evaluate"],
];

/// Report fields that do not depend on wall-clock time.
fn losses(path: &Path) -> Vec<(u64, u64, String)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (v["epoch"].as_u64().unwrap(), v["tokens"].as_u64().unwrap(), v["loss"].to_string())
        })
        .collect()
}

#[test]
fn pipeline_runs_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        for args in PIPELINE {
            ok(lum(dir.path(), run, args));
        }
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for name in [
        "corpus/events.csv",
        "corpus/items.csv",
        "corpus/meta.json",
        "lum.ckpt",
        "query_results.jsonl",
        "interests.jsonl",
        "item_embeddings.json",
        "interest_cache.jsonl",
        "ranker.ckpt",
        "retrieval.ckpt",
        "dlrm_metrics.json",
        "eval.json",
    ] {
        let read = |d: &Path| std::fs::read(d.join(name)).unwrap();
        assert_eq!(read(&a), read(&b), "{name} differs between runs");
    }
    assert_eq!(losses(&a.join("train_report.jsonl")), losses(&b.join("train_report.jsonl")));

    let queries = std::fs::read_to_string(a.join("query_results.jsonl")).unwrap();
    assert_eq!(queries.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(queries.lines().next().unwrap()).unwrap();
    assert_eq!(first["user_id"], 2);
    assert_eq!(first["top_k"].as_array().unwrap().len(), 4);

    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("eval.json")).unwrap()).unwrap();
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("dlrm_metrics.json")).unwrap()).unwrap();
    assert_eq!(eval["ranking"], metrics["ranking"]);
    assert_eq!(eval["retrieval"], metrics["retrieval"]);
    let auc = eval["ranking"]["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
}

#[test]
fn missing_upstream_artifacts_name_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = lum(dir.path(), "x", &["train-lum"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen-data"));
    ok(lum(dir.path(), "x", &["gen-data"]));
    for (cmd, step) in [
        ("query", "train-lum"),
        ("cache-warm", "train-lum"),
        ("train-dlrm", "cache-warm"),
        ("evaluate", "train-dlrm"),
    ] {
        let o = lum(dir.path(), "x", &[cmd]);
        assert_eq!(o.status.code(), Some(2), "{cmd}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(step), "{cmd}: {err}");
    }
    assert!(!dir.path().join("x/lum.ckpt").exists());
    assert!(!dir.path().join("x/interests.jsonl").exists());
    ok(lum(dir.path(), "x", &["train-dlrm", "--usage", "none"]));
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lum(dir.path(), "x", &["gen-data", "--bogus"]).status.code(), Some(1));
    assert_eq!(lum(dir.path(), "x", &["no-such-command"]).status.code(), Some(1));
    assert_eq!(lum(dir.path(), "x", &["train-dlrm", "--usage", "sideways"]).status.code(), Some(1));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"lum": {"epochz": 1}}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lum"))
        .arg("--config")
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("y"))
        .arg("gen-data")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
    let o = lum(dir.path(), "x", &["scale-sweep", "--dims", "3"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn scale_sweep_emits_one_point_per_size() {
    let dir = tempfile::tempdir().unwrap();
    ok(lum(dir.path(), "s", &["gen-data"]));
    ok(lum(dir.path(), "s", &["scale-sweep", "--dims", "4,8,16"]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("s/scaling.json")).unwrap()).unwrap();
    assert_eq!(report["sizes"]["points"].as_array().unwrap().len(), 3);
    assert!(report["sizes"]["fit"]["r_squared"].as_f64().unwrap() <= 1.0);
    let plot = std::fs::read_to_string(dir.path().join("s/scaling_plot.csv")).unwrap();
    assert_eq!(plot.lines().count(), 4);
}

#[test]
fn bench_writes_both_reports() {
    let dir = tempfile::tempdir().unwrap();
    ok(lum(dir.path(), "b", &["bench"]));
    for name in ["b/bench_packing.json", "b/bench_group_query.json"] {
        let r: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(name)).unwrap()).unwrap();
        assert!(r["throughput"].as_f64().unwrap() > 0.0, "{name}");
        assert!(r["repetitions"].as_u64().unwrap() >= 5);
    }
}
