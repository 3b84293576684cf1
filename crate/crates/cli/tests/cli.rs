use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "model": {"layers": 1, "heads": 2, "hidden": 8, "ffn": 16, "codebook_size": 4, "max_len": 192},
  "train": {"epochs": 1, "batch_size": 8, "stage1_steps": 2, "stage2_steps": 2, "lr": 0.005}
}"#;

fn retag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retag"))
        .args(args)
        .env("RETAG_THREADS", "1")
        .output()
        .expect("spawn retag")
}

fn ok(args: &[&str]) -> Output {
    let out = retag(args);
    assert!(
        out.status.success(),
        "retag {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("tiny.json"), TINY).unwrap();
        Workspace { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Synthesizes a corpus and trains a tiny ReTAG checkpoint on it.
    fn trained(&self) -> PathBuf {
        let (data, cfg, ckpt) = (self.path("data.jsonl"), self.path("tiny.json"), self.path("model.ckpt"));
        ok(&["data", "synth", "--n", "24", "--seed", "3", "--out", s(&data)]);
        ok(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]);
        ckpt
    }
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_is_deterministic_and_split_partitions() {
    let ws = Workspace::new();
    let (a, b) = (ws.path("a.jsonl"), ws.path("b.jsonl"));
    ok(&["data", "synth", "--n", "40", "--seed", "9", "--out", s(&a)]);
    ok(&["data", "synth", "--n", "40", "--seed", "9", "--out", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(jsonl(&a).len(), 40);

    let prefix = ws.path("part-");
    ok(&["data", "split", "--fractions", "0.5,0.25,0.25", "--in", s(&a), "--out-prefix", s(&prefix)]);
    let sizes: Vec<usize> = ["train", "valid", "test"]
        .iter()
        .map(|p| jsonl(&ws.path(&format!("part-{p}.jsonl"))).len())
        .collect();
    assert_eq!(sizes.iter().sum::<usize>(), 40);
    assert_eq!(sizes[0], 20);
}

#[test]
fn filter_emits_one_verdict_per_instance() {
    let ws = Workspace::new();
    let (data, out) = (ws.path("d.jsonl"), ws.path("f.jsonl"));
    ok(&["data", "synth", "--n", "10", "--out", s(&data)]);
    ok(&["data", "filter", "--style", "totto", "--in", s(&data), "--out", s(&out)]);
    let lines = jsonl(&out);
    assert_eq!(lines.len(), 10);
    for l in &lines {
        assert!(l["id"].is_string());
        assert!(l["ratio"].as_u64().unwrap() <= 100);
        assert!(l["label"].is_string());
    }
}

#[test]
fn generate_uses_the_requested_tags_and_is_deterministic() {
    let ws = Workspace::new();
    let ckpt = ws.trained();
    let data = ws.path("data.jsonl");
    let (g1, g2) = (ws.path("g1.jsonl"), ws.path("g2.jsonl"));
    for out in [&g1, &g2] {
        ok(&[
            "generate", "--ckpt", s(&ckpt), "--input", s(&data), "--tags", "numerical,temporal", "--beam", "3",
            "--max-len", "8", "--out", s(out),
        ]);
    }
    assert_eq!(fs::read(&g1).unwrap(), fs::read(&g2).unwrap());
    let lines = jsonl(&g1);
    assert_eq!(lines.len(), 24);
    for l in &lines {
        let q = l["question"].as_str().unwrap();
        assert!(q.contains("numerical, temporal reasoning"), "{q}");
        assert!(l["log_prob"].as_f64().unwrap() <= 0.0);
    }
}

#[test]
fn unknown_tag_is_a_usage_error() {
    let ws = Workspace::new();
    let ckpt = ws.trained();
    let out = retag(&[
        "generate", "--ckpt", s(&ckpt), "--input", s(&ws.path("data.jsonl")), "--tags", "sarcasm", "--out",
        s(&ws.path("g.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sarcasm"));
}

#[test]
fn eval_report_has_metadata_records_and_aggregates() {
    let ws = Workspace::new();
    let ckpt = ws.trained();
    let (r1, r2) = (ws.path("r1.json"), ws.path("r2.json"));
    for r in [&r1, &r2] {
        ok(&[
            "eval", "--ckpt", s(&ckpt), "--data", s(&ws.path("data.jsonl")), "--beam", "2", "--max-len", "8",
            "--random-tags", "--seed", "5", "--report", s(r),
        ]);
    }
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r2).unwrap());
    let v: Value = serde_json::from_slice(&fs::read(&r1).unwrap()).unwrap();
    assert_eq!(v["metadata"]["random_tags_seed"], 5);
    assert_eq!(v["records"].as_array().unwrap().len(), 24);
    let agg = &v["aggregates"];
    for key in ["overall", "analytical", "descriptive", "per-category", "per-cardinality"] {
        assert!(agg.get(key).is_some(), "missing {key}");
    }
    assert_eq!(agg["overall"]["count"], 24);
    let acc = v["metadata"]["ci_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let ws = Workspace::new();
    let a = ws.trained();
    let first = fs::read(&a).unwrap();
    let b = ws.path("again.ckpt");
    ok(&["pretrain", "--config", s(&ws.path("tiny.json")), "--data", s(&ws.path("data.jsonl")), "--out", s(&b)]);
    assert_eq!(first, fs::read(&b).unwrap());

    let ft = ws.path("ft.ckpt");
    let report = ws.path("steps.jsonl");
    ok(&[
        "train", "--config", s(&ws.path("tiny.json")), "--data", s(&ws.path("data.jsonl")), "--init", s(&a), "--out",
        s(&ft), "--report", s(&report),
    ]);
    assert!(!jsonl(&report).is_empty());
}

#[test]
fn exit_codes_distinguish_usage_data_and_corruption() {
    let ws = Workspace::new();
    assert_eq!(retag(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(retag(&["--help"]).status.code(), Some(0));

    let missing = ws.path("nope.jsonl");
    let out = retag(&["data", "filter", "--style", "infotabs", "--in", s(&missing), "--out", s(&ws.path("o"))]);
    assert_eq!(out.status.code(), Some(2));

    let bad_cfg = ws.path("bad.json");
    fs::write(&bad_cfg, r#"{"train": {"learning_rate": 1}}"#).unwrap();
    let out = retag(&["data", "synth", "--config", s(&bad_cfg), "--n", "2", "--out", s(&ws.path("o"))]);
    assert_eq!(out.status.code(), Some(1));

    let ckpt = ws.trained();
    let mut bytes = fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x10;
    let broken = ws.path("broken.ckpt");
    fs::write(&broken, bytes).unwrap();
    let out = retag(&[
        "eval", "--ckpt", s(&broken), "--data", s(&ws.path("data.jsonl")), "--report", s(&ws.path("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_writes_a_report() {
    let ws = Workspace::new();
    let report = ws.path("gc.json");
    let out = ok(&["gradcheck", "--report", s(&report)]);
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    let v: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-5);
}
