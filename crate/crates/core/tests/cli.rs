use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const TEMPLATES: [(&str, &str, &str); 3] = [
    ("the river flows north past the old mill", "Clean", "Clean"),
    ("Home | About | Contact", "navigation menu", "Navigation & Interface Elements"),
    ("Share on Facebook Tweet this", "share buttons", "Promotional & Spam Content"),
];

fn linequal(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_linequal"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "linequal {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Documents, a transcript answering every batch, and a category scheme.
/// Returns the number of non-Clean lines.
fn write_fixture(dir: &Path) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut docs = String::new();
    let mut transcript = String::new();
    let mut defects = 0;
    for d in 0..60 {
        let mut lines = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..8 {
            let (text, label, _) = TEMPLATES[rng.random_range(0..3)];
            lines.push(format!("{text} {}", rng.random_range(0..1000)));
            labels.push(label);
            defects += usize::from(label != "Clean");
        }
        docs.push_str(&json!({ "id": format!("doc{d}"), "text": lines.join("\n"), "url": "http://example.com" }).to_string());
        docs.push('\n');
        let response = serde_json::to_string(&labels).unwrap();
        transcript.push_str(&json!({ "batch": format!("doc{d}:0:0"), "response": response }).to_string());
        transcript.push('\n');
    }
    std::fs::write(dir.join("docs.jsonl"), docs).unwrap();
    std::fs::write(dir.join("transcript.jsonl"), transcript).unwrap();
    std::fs::write(dir.join("labeler.toml"), "mock_transcript = \"transcript.jsonl\"\nbatch_lines = 15\n").unwrap();
    let scheme: serde_json::Map<String, Value> = TEMPLATES[1..]
        .iter()
        .map(|(_, label, cat)| (cat.to_string(), json!([label])))
        .collect();
    std::fs::write(dir.join("scheme.json"), Value::Object(scheme).to_string()).unwrap();
    defects
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let defects = write_fixture(dir);

    let stats: Value = serde_json::from_slice(&linequal(dir, &["ingest", "--input", "docs.jsonl", "--stats"]).stdout).unwrap();
    assert_eq!(stats["documents"], json!(60));
    assert_eq!(stats["records"], json!(480));

    linequal(dir, &["label", "--input", "docs.jsonl", "--out", "labels.jsonl", "--config", "labeler.toml"]);
    let registry = read_json(&dir.join("labels.jsonl.registry.json"));
    assert!(registry.to_string().contains("navigation menu"));

    linequal(dir, &["refine", "--labels", "labels.jsonl", "--scheme", "scheme.json", "--out", "cat.jsonl"]);
    linequal(dir, &["train", "--data", "cat.jsonl", "--out", "model", "--learning-rate", "2.0", "--epochs", "3"]);
    for f in ["model.json", "weights.bin", "history.json", "train.jsonl", "dev.jsonl", "test.jsonl"] {
        assert!(dir.join("model").join(f).exists(), "missing {f}");
    }
    linequal(dir, &["eval", "--model", "model", "--report", "eval.json"]);
    let eval = read_json(&dir.join("eval.json"));
    assert!(eval["micro_f1"].as_f64().unwrap() >= 0.95, "{eval}");

    linequal(dir, &["calibrate", "--model", "model", "--out", "platt.json"]);
    let platt = read_json(&dir.join("platt.json"));
    assert!(platt["a"].as_f64().unwrap() > 0.0);

    let score = |out: &str, extra: &[&str]| {
        let mut args = vec!["score", "--input", "docs.jsonl", "--model", "model", "--platt", "platt.json", "--out", out];
        args.extend_from_slice(extra);
        linequal(dir, &args);
    };
    score("scored", &["--shard-size", "25", "--workers", "2"]);
    score("scored-one", &["--shard-size", "1000", "--no-length-grouping"]);
    let manifest = read_json(&dir.join("scored/manifest.json"));
    assert_eq!(manifest["shards"].as_array().unwrap().len(), 3);
    let concat: Vec<u8> = (0..3)
        .flat_map(|i| std::fs::read(dir.join(format!("scored/shard-{i:05}.jsonl"))).unwrap())
        .collect();
    assert_eq!(concat, std::fs::read(dir.join("scored-one/shard-00000.jsonl")).unwrap());

    linequal(dir, &["filter", "--scored", "scored", "--threshold", "0.5", "--out", "filtered", "--report", "filter.json"]);
    let report = read_json(&dir.join("filter.json"));
    assert_eq!(report["reduction"]["lines"]["removed"], json!(defects));
    assert_eq!(report["reduction"]["lines"]["original"], json!(480));
    let kept: String = (0..3)
        .map(|i| std::fs::read_to_string(dir.join(format!("filtered/shard-{i:05}.jsonl"))).unwrap())
        .collect();
    for doc in kept.lines() {
        let doc: Value = serde_json::from_str(doc).unwrap();
        assert_eq!(doc["url"], json!("http://example.com"));
        for line in doc["text"].as_str().unwrap().lines() {
            assert!(line.starts_with(TEMPLATES[0].0), "kept defect line {line:?}");
        }
    }
}

struct Server {
    child: Child,
    base: String,
}

impl Server {
    fn start(dir: &Path) -> Self {
        let mut child = Command::new(env!("CARGO_BIN_EXE_linequal"))
            .args(["serve", "--data", "cat.jsonl", "--port", "0", "--state", "state", "--sample-size", "4"])
            .current_dir(dir)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut first = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut first).unwrap();
        let base = first
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected banner {first:?}"))
            .to_string();
        Self { child, base }
    }

    fn get(&self, path: &str) -> Value {
        ureq::get(format!("{}{path}", self.base)).call().unwrap().body_mut().read_json().unwrap()
    }

    fn get_text(&self, path: &str) -> String {
        ureq::get(format!("{}{path}", self.base)).call().unwrap().body_mut().read_to_string().unwrap()
    }

    fn post(&self, path: &str, body: Value) -> Value {
        ureq::post(format!("{}{path}", self.base))
            .send_json(body)
            .unwrap()
            .body_mut()
            .read_json()
            .unwrap()
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[test]
fn review_server_survives_kill_and_feeds_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_fixture(dir);
    linequal(dir, &["label", "--input", "docs.jsonl", "--out", "labels.jsonl", "--config", "labeler.toml"]);
    linequal(dir, &["refine", "--labels", "labels.jsonl", "--scheme", "scheme.json", "--out", "cat.jsonl"]);

    let mut server = Server::start(dir);
    let created = server.post(
        "/sessions",
        json!({ "kind": "label_verification", "session_id": "v", "labels": ["navigation menu", "share buttons"] }),
    );
    assert_eq!(created["total"], json!(8));
    let iaa = server.post("/sessions", json!({ "kind": "iaa", "session_id": "k", "documents": ["doc0", "doc1"] }));
    assert_eq!(iaa["total"], json!(16));
    for item_id in 0..4 {
        server.post("/sessions/v/verdicts", json!({ "annotator": "ann", "item_id": item_id, "low_quality": false }));
    }

    // SIGKILL: nothing gets a chance to flush on the way out
    server.child.kill().unwrap();
    server.child.wait().unwrap();
    server = Server::start(dir);
    let summary = server.get("/sessions/v/summary");
    assert_eq!(summary["completed"]["ann"], json!(4));
    assert_eq!(server.get("/sessions/v/next?annotator=ann")["answered"], json!(4));

    for item_id in 4..8 {
        server.post("/sessions/v/verdicts", json!({ "annotator": "ann", "item_id": item_id, "low_quality": true }));
    }
    std::fs::write(dir.join("verdicts.jsonl"), server.get_text("/sessions/v/export")).unwrap();
    for annotator in ["ann", "bob"] {
        for item_id in 0..16 {
            server.post("/sessions/k/verdicts", json!({ "annotator": annotator, "item_id": item_id, "agrees": true }));
        }
    }
    std::fs::write(dir.join("iaa.json"), server.get_text("/sessions/k/export")).unwrap();
    drop(server);

    let out = linequal(dir, &["refine", "--labels", "labels.jsonl", "--verdicts", "verdicts.jsonl", "--out", "refined.jsonl"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("verdicts: 1 labels remain"));
    let refined = std::fs::read_to_string(dir.join("refined.jsonl")).unwrap();
    assert!(!refined.contains("\"navigation menu\""));
    assert!(refined.contains("\"share buttons\""));

    linequal(dir, &["iaa", "--session", "iaa.json", "--report", "iaa-report.json"]);
    let report = read_json(&dir.join("iaa-report.json"));
    assert_eq!(report["average_full"], json!(1.0));
    assert_eq!(report["annotators"].as_array().unwrap().len(), 2);
}
