//! The `clt-tracer` binary on the bundled smoke configuration: exit codes,
//! output files and stage reuse across invocations.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clt_tracer::attribution::AttributionGraph;
use clt_tracer::pipeline::SMOKE_CONFIG;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_clt-tracer"));
    c.env_remove("RUST_LOG");
    c
}

/// A temp dir holding `run.toml` (the smoke config pointed at `art/`).
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let art = dir.path().join("art");
    let text = SMOKE_CONFIG.replace("artifact_dir = \"artifacts/smoke\"", &format!("artifact_dir = {:?}", art.to_str().unwrap()));
    assert_ne!(text, SMOKE_CONFIG);
    let config = dir.path().join("run.toml");
    std::fs::write(&config, text).unwrap();
    (dir, config)
}

fn run(config: &Path, args: &[&str]) -> Output {
    bin().arg("--config").arg(config).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    o
}

fn stages_run(o: &Output) -> String {
    stderr(o).lines().find_map(|l| l.strip_prefix("stages run: ")).expect("stages line").to_string()
}

#[test]
fn usage_errors_exit_one_with_usage_text() {
    let o = bin().arg("--bogus").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));

    let o = bin().args(["score", "--variant", "median"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("general"));

    let o = bin().arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("attribute"));
}

#[test]
fn config_errors_exit_one_and_missing_files_exit_two() {
    let (dir, _) = workspace();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nn_layer = 2\n").unwrap();
    let o = run(&bad, &["metrics"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("n_layer"), "{}", stderr(&o));

    std::fs::write(&bad, "[attribution]\nnode_keep = 1.5\n").unwrap();
    assert_eq!(run(&bad, &["metrics"]).status.code(), Some(1));

    let o = run(&dir.path().join("missing.toml"), &["metrics"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.toml"));
}

#[test]
fn diverging_training_exits_three() {
    let (_dir, config) = workspace();
    let text = std::fs::read_to_string(&config).unwrap().replace("lr = 3e-3", "lr = 1e30");
    std::fs::write(&config, text).unwrap();
    let o = run(&config, &["train-lm"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn attribute_from_prompt_file_writes_a_valid_graph() {
    let (dir, config) = workspace();
    let prompt = dir.path().join("prompt.txt");
    std::fs::write(&prompt, "tap ka vo\n").unwrap();
    let out = dir.path().join("graph.json");
    let o = ok(run(&config, &["attribute", "--prompt-file", prompt.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert!(stages_run(&o).contains("clt"));

    let graph = AttributionGraph::load(&out).unwrap();
    assert_eq!(graph.prompt, "tap ka vo");
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["version"], serde_json::json!(clt_tracer::attribution::GRAPH_VERSION));
    for field in ["tokens", "nodes", "edges", "target_position"] {
        assert!(!v[field].is_null(), "missing {field}");
    }

    let again = dir.path().join("again.json");
    let o = ok(run(&config, &["attribute", "--prompt", "tap ka vo", "--out", again.to_str().unwrap()]));
    assert_eq!(stages_run(&o), "none");
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());

    let o = run(&config, &["attribute", "--prompt", "tap", "--prompt-file", prompt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&config, &["attribute", "--prompt", "tap", "--node-keep", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

fn csv_column(path: &Path, col: usize) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').nth(col).unwrap().to_string()).collect()
}

#[test]
fn score_variants_share_the_layer_axis() {
    let (dir, config) = workspace();
    let general = dir.path().join("general.csv");
    let top100 = dir.path().join("top100.csv");
    ok(run(&config, &["score", "--variant", "general", "--out", general.to_str().unwrap()]));
    ok(run(&config, &["score", "--variant", "top100", "--out", top100.to_str().unwrap()]));
    let header = |p: &Path| std::fs::read_to_string(p).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header(&general), header(&top100));
    assert!(header(&general).starts_with("layer,variant,"));
    let layers = csv_column(&general, 0);
    assert_eq!(layers, vec!["0", "1"]);
    assert_eq!(layers, csv_column(&top100, 0));
    assert!(csv_column(&general, 1).iter().all(|v| v == "general"));
    assert!(csv_column(&top100, 1).iter().all(|v| v == "top100"));
    for s in csv_column(&general, 2).iter().chain(&csv_column(&top100, 2)) {
        let x: f64 = s.parse().unwrap();
        assert!(x.is_finite() && x >= 0.0);
    }
}

#[test]
fn reruns_reuse_every_stage() {
    let (dir, config) = workspace();
    let o = ok(run(&config, &["metrics"]));
    let first = stages_run(&o);
    for stage in ["corpus", "tokenizer", "lm", "capture", "clt", "metrics"] {
        assert!(first.contains(stage), "{first}");
    }
    let before = std::fs::read(dir.path().join("art/manifest.json")).unwrap();
    let o = ok(run(&config, &["metrics"]));
    assert_eq!(stages_run(&o), "none");
    assert_eq!(std::fs::read(dir.path().join("art/manifest.json")).unwrap(), before);

    // A changed seed invalidates everything downstream of the corpus.
    let o = ok(bin().arg("--config").arg(&config).args(["--seed", "6", "train-tokenizer"]).output().unwrap());
    assert_eq!(stages_run(&o), "corpus, tokenizer");

    // Back on the original seed the regenerated inputs hash as before, so the
    // recorded model is still current.
    let o = ok(run(&config, &["train-lm"]));
    assert_eq!(stages_run(&o), "corpus, tokenizer");

    // A tampered checkpoint is retrained rather than trusted.
    let ckpt = dir.path().join("art/lm/model.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 1;
    std::fs::write(&ckpt, bytes).unwrap();
    let o = ok(run(&config, &["train-lm"]));
    assert_eq!(stages_run(&o), "lm");
}

#[test]
fn intervene_sweep_and_export() {
    let (dir, config) = workspace();
    let p = |name: &str| dir.path().join(name);
    std::fs::write(p("spec.json"), r#"{"edits": [{"feature": {"layer": 0, "index": 1}, "mode": "scale", "value": 0.0}], "target_token": 9}"#).unwrap();
    ok(run(&config, &["intervene", "--prompt", "tap ka", "--spec", p("spec.json").to_str().unwrap(), "--out", p("int.json").to_str().unwrap()]));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(p("int.json")).unwrap()).unwrap();
    assert_eq!(v["target_token"], serde_json::json!(9));
    assert!(v["rank_before"].as_u64().unwrap() >= 1);

    ok(run(&config, &["intervene", "--prompt", "tap ka", "--out", p("noop.json").to_str().unwrap()]));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(p("noop.json")).unwrap()).unwrap();
    assert_eq!(v["baseline_top"], v["edited_top"]);

    std::fs::write(p("up.json"), r#"{"name": "up", "members": [{"layer": 1, "index": 0}]}"#).unwrap();
    ok(run(&config, &["sweep", "--prompt", "tap ka", "--up", p("up.json").to_str().unwrap(), "--target-token", "9", "--out", p("sweep.csv").to_str().unwrap()]));
    let rows = std::fs::read_to_string(p("sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + clt_tracer::intervene::default_up_range().len());

    std::fs::write(p("bad.json"), r#"{"edits": [{"feature": {"layer": 5, "index": 0}, "mode": "zero"}]}"#).unwrap();
    let o = run(&config, &["intervene", "--prompt", "tap ka", "--spec", p("bad.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    ok(run(&config, &["export-graph", "--index", "1", "--out", p("g1.json").to_str().unwrap()]));
    let exported = std::fs::read(p("g1.json")).unwrap();
    assert_eq!(exported, std::fs::read(dir.path().join("art/graphs/prompt_01.json")).unwrap());
    ok(run(&config, &["export-graph", "--graph", p("g1.json").to_str().unwrap(), "--out", p("copy.json").to_str().unwrap()]));
    assert_eq!(std::fs::read(p("copy.json")).unwrap(), exported);
    let o = run(&config, &["export-graph", "--index", "40", "--out", p("none.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_corpus_writes_per_language_text() {
    let (dir, config) = workspace();
    let out = dir.path().join("text");
    let o = ok(run(&config, &["gen-corpus", "--out", out.to_str().unwrap()]));
    assert_eq!(stages_run(&o), "corpus");
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(summary.is_object());
    let files: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 5);
    for f in files {
        assert!(!std::fs::read_to_string(&f).unwrap().trim().is_empty(), "{f:?}");
    }
}

#[test]
fn language_features_threshold_flag() {
    let (dir, config) = workspace();
    let loose = dir.path().join("loose.json");
    let strict = dir.path().join("strict.json");
    ok(run(&config, &["language-features", "--threshold", "0.01", "--out", loose.to_str().unwrap()]));
    ok(run(&config, &["language-features", "--threshold", "0.5", "--out", strict.to_str().unwrap()]));
    let count = |p: &Path| serde_json::from_str::<Vec<Value>>(&std::fs::read_to_string(p).unwrap()).unwrap().len();
    assert!(count(&strict) <= count(&loose));
    assert!(count(&loose) > 0);
    assert_eq!(run(&config, &["language-features", "--threshold", "3"]).status.code(), Some(1));
}
