mod common;

use std::io::Write;

use common::*;
use ragcurate_core::digest::sha256_hex;
use ragcurate_core::RunManifest;

fn select_args<'a>(corpus: &'a str, out: &'a str, budget: &'a str) -> Vec<&'a str> {
    vec![
        "select", "--corpus", corpus, "--strategy", "idds", "--similarity", "ras", "--budget", budget, "--rounds", "5",
        "--seed", "7", "--out", out,
    ]
}

#[test]
fn select_writes_ceil_of_percentage_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), &synthetic(42));
    let out = dir.path().join("sel.jsonl");
    let res = run(&select_args(s(&corpus), s(&out), "25%"));
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let bytes = std::fs::read(&out).unwrap();
    let lines: Vec<serde_json::Value> = bytes
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_slice(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 11);
    for key in ["round", "id", "score", "strategy"] {
        assert!(lines[0].get(key).is_some(), "missing {key}");
    }
    assert_eq!(lines[10]["strategy"], "idds");
    let manifest = RunManifest::read(dir.path().join("sel.jsonl.manifest.json")).unwrap();
    assert_eq!(manifest.output_hash.as_deref(), Some(sha256_hex(&bytes).as_str()));
    let sel = manifest.selection.unwrap();
    assert_eq!((sel.budget, sel.rounds, sel.rng_seed, sel.lambda), (11, 5, 7, 0.67));
    assert_eq!(stdout_json(&res)["manifest_hash"], manifest_hash(&dir.path().join("sel.jsonl.manifest.json")));
}

fn manifest_hash(path: &std::path::Path) -> String {
    RunManifest::read(path).unwrap().hash()
}

#[test]
fn select_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), &synthetic(60));
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    assert_eq!(code(&run(&select_args(s(&corpus), s(&a), "50%"))), 0);
    assert_eq!(code(&run(&select_args(s(&corpus), s(&b), "50%"))), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let ma = std::fs::read(dir.path().join("a.jsonl.manifest.json")).unwrap();
    let mb = std::fs::read(dir.path().join("b.jsonl.manifest.json")).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), &synthetic(10));
    let out = dir.path().join("sel.jsonl");
    for budget in ["0", "0%", "11", "abc"] {
        let res = run(&select_args(s(&corpus), s(&out), budget));
        assert_eq!(code(&res), 1, "budget {budget}");
    }
    let res = run(&["select", "--corpus", s(&corpus), "--budget", "3", "--strategy", "bogus", "--out", s(&out)]);
    assert_eq!(code(&res), 1);
    let res = run(&["select", "--corpus", s(&corpus), "--budget", "3", "--rounds", "4", "--lambda", "1.5", "--out", s(&out)]);
    assert_eq!(code(&res), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    assert!(!out.exists());
}

#[test]
fn data_and_io_errors_have_their_own_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = dir.path().join("sel.jsonl");
    assert_eq!(code(&run(&select_args(s(&missing), s(&out), "1"))), 3);

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"id\":\"a\",\"query\":\"q\",\"reference\":\"r\"}\n").unwrap();
    let res = run(&["ingest-check", "--corpus", s(&bad)]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 1"));
}

#[test]
fn env_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), &synthetic(20));
    let out = dir.path().join("sel.jsonl");
    let res = bin()
        .args(["select", "--out", s(&out)])
        .env("AL4RAG_CORPUS", &corpus)
        .env("AL4RAG_BUDGET", "5")
        .env("AL4RAG_STRATEGY", "coreset")
        .env("AL4RAG_ROUNDS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.contains("\"coreset\""));
}

#[test]
fn cached_matrix_gives_the_same_selection() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), &synthetic(40));
    let cache = dir.path().join("cache");
    let plain = dir.path().join("plain.jsonl");
    assert_eq!(code(&run(&select_args(s(&corpus), s(&plain), "10"))), 0);
    for name in ["first.jsonl", "second.jsonl"] {
        let out = dir.path().join(name);
        let mut args = select_args(s(&corpus), s(&out), "10");
        args.extend(["--cache-dir", s(&cache)]);
        assert_eq!(code(&run(&args)), 0);
        assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&plain).unwrap());
    }
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 1);
}

#[test]
fn ingest_check_summarizes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), &synthetic(12));
    let res = run(&["ingest-check", "--corpus", s(&corpus)]);
    assert_eq!(code(&res), 0);
    let v = stdout_json(&res);
    assert_eq!(v["records"], 12);
    assert_eq!(v["task_kinds"]["qa"], 12);
    assert_eq!(v["corpus_hash"], synthetic(12).content_hash());
}

fn labels_json(pairs: &[(&str, u8)]) -> String {
    let items: Vec<String> = pairs
        .iter()
        .map(|(id, h)| format!("{{\"record_id\":\"{id}\",\"h\":{h}}}"))
        .collect();
    format!("[{}]", items.join(","))
}

#[test]
fn build_prefs_counts_and_warns() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synthetic(30);
    let corpus_path = write_corpus(dir.path(), &corpus);
    let ids: Vec<&str> = corpus.ids().collect();
    let labeled: Vec<(&str, u8)> = ids[..20].iter().enumerate().map(|(i, id)| (*id, (i % 3 == 0) as u8)).collect();
    let labels = dir.path().join("labels.json");
    std::fs::write(&labels, labels_json(&labeled)).unwrap();
    let selection = dir.path().join("sel.jsonl");
    let mut f = std::fs::File::create(&selection).unwrap();
    for id in &ids[..22] {
        writeln!(f, "{{\"round\":0,\"id\":\"{id}\",\"score\":null,\"strategy\":\"random\"}}").unwrap();
    }
    let out = dir.path().join("dpo.jsonl");
    let res = run(&[
        "build-prefs", "--corpus", s(&corpus_path), "--labels", s(&labels), "--selection", s(&selection), "--out", s(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let v = stdout_json(&res);
    assert_eq!(v["pairs"], 20);
    let hallucinated = labeled.iter().filter(|(_, h)| *h == 1).count();
    assert_eq!(v["rejection_chosen"], hallucinated);
    assert_eq!(v["original_response_chosen"], 20 - hallucinated);
    assert_eq!(v["unlabeled_selected"].as_array().unwrap().len(), 2);
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains(ids[20]) && stderr.contains(ids[21]));

    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 20);
    let first: serde_json::Map<String, serde_json::Value> = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let mut keys: Vec<&str> = first.keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["chosen", "id", "prompt", "rejected"]);
    let manifest = RunManifest::read(dir.path().join("dpo.jsonl.manifest.json")).unwrap();
    assert!(manifest.rejection_text.is_some() && manifest.labels_hash.is_some());
}

#[test]
fn build_prefs_without_labels_fails() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), &synthetic(5));
    let labels = dir.path().join("labels.json");
    std::fs::write(&labels, "[]").unwrap();
    let out = dir.path().join("dpo.jsonl");
    let res = run(&["build-prefs", "--corpus", s(&corpus), "--labels", s(&labels), "--out", s(&out)]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("no labels"));
    assert!(!out.exists());
}

#[test]
fn build_prefs_rejects_unknown_ids() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), &synthetic(5));
    let labels = dir.path().join("labels.json");
    std::fs::write(&labels, labels_json(&[("ghost", 1)])).unwrap();
    let out = dir.path().join("dpo.jsonl");
    let res = run(&["build-prefs", "--corpus", s(&corpus), "--labels", s(&labels), "--out", s(&out)]);
    assert_eq!(code(&res), 2);
}

fn report_input(dir: &std::path::Path, rows: &[(&str, &str)]) -> std::path::PathBuf {
    let path = dir.join("gen.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    for (resp, reference) in rows {
        writeln!(f, "{}", serde_json::json!({"response": resp, "reference": reference})).unwrap();
    }
    path
}

#[test]
fn report_identity_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let input = report_input(dir.path(), &[("the cat sat", "the cat sat"), ("a b c d", "a b c d")]);
    let out = dir.path().join("report.json");
    let res = run(&["report", "--input", s(&input), "--out", s(&out)]);
    assert_eq!(code(&res), 0);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    for key in ["rouge1_f1", "rouge2_f1", "rouge_l_f1"] {
        assert_eq!(report["aggregate"][key], 1.0);
    }
    assert_eq!(report["aggregate"]["rejection_rate"], 0.0);
    let manifest: RunManifest = serde_json::from_value(report["manifest"].clone()).unwrap();
    assert_eq!(report["manifest_hash"], manifest.hash());

    let refusal = ragcurate_core::preference::DEFAULT_REJECTION_TEXT;
    let input = report_input(dir.path(), &[(refusal, "Paris"), (refusal, "Blue")]);
    let res = run(&["report", "--input", s(&input)]);
    assert_eq!(code(&res), 0);
    assert_eq!(stdout_json(&res)["aggregate"]["rejection_rate"], 1.0);
}

#[test]
fn report_rejects_empty_and_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let res = run(&["report", "--input", s(&empty)]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("malformed input"));
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"response\":\"x\"}\n").unwrap();
    assert_eq!(code(&run(&["report", "--input", s(&bad)])), 2);
}

fn embedding_file(dir: &std::path::Path, ids: &[&str], dim_of: impl Fn(usize) -> usize) -> std::path::PathBuf {
    let path = dir.join("emb.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "{{\"views\":{{\"query\":4,\"reference\":4,\"prompt\":4}}}}").unwrap();
    for (i, id) in ids.iter().enumerate() {
        for (v, view) in ["query", "reference", "prompt"].iter().enumerate() {
            let vector: Vec<f64> = (0..dim_of(i)).map(|d| ((i * 7 + v * 3 + d) % 5) as f64 + 0.5).collect();
            writeln!(f, "{}", serde_json::json!({"id": id, "view": view, "vector": vector})).unwrap();
        }
    }
    path
}

#[test]
fn embed_import_validates_and_feeds_select() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synthetic(12);
    let corpus_path = write_corpus(dir.path(), &corpus);
    let ids: Vec<&str> = corpus.ids().collect();
    let emb = embedding_file(dir.path(), &ids, |_| 4);
    let res = run(&["embed-import", "--corpus", s(&corpus_path), "--embeddings", s(&emb), "--require-complete"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let v = stdout_json(&res);
    assert_eq!(v["entries"], 36);
    assert_eq!(v["complete"], true);

    let out = dir.path().join("sel.jsonl");
    let res = run(&[
        "select", "--corpus", s(&corpus_path), "--budget", "4", "--rounds", "2", "--embeddings", s(&emb), "--out", s(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let manifest = RunManifest::read(dir.path().join("sel.jsonl.manifest.json")).unwrap();
    assert_eq!(manifest.vectors.unwrap().embeddings_hash.unwrap(), sha256_hex(std::fs::read(&emb).unwrap()));

    let partial = embedding_file(dir.path(), &ids[..6], |_| 4);
    let res = run(&["embed-import", "--corpus", s(&corpus_path), "--embeddings", s(&partial)]);
    assert_eq!(stdout_json(&res)["complete"], false);
    let res = run(&["embed-import", "--corpus", s(&corpus_path), "--embeddings", s(&partial), "--require-complete"]);
    assert_eq!(code(&res), 2);
}

#[test]
fn embed_import_errors() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synthetic(6);
    let corpus_path = write_corpus(dir.path(), &corpus);
    let ids: Vec<&str> = corpus.ids().collect();
    let emb = embedding_file(dir.path(), &ids, |i| if i == 3 { 3 } else { 4 });
    let res = run(&["embed-import", "--corpus", s(&corpus_path), "--embeddings", s(&emb)]);
    assert_eq!(code(&res), 2);
    let mut with_ghost = ids.clone();
    with_ghost.push("ghost");
    let emb = embedding_file(dir.path(), &with_ghost, |_| 4);
    let res = run(&["embed-import", "--corpus", s(&corpus_path), "--embeddings", s(&emb)]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("ghost"));
}

fn selection_for(dir: &std::path::Path, corpus: &std::path::Path, budget: &str) -> std::path::PathBuf {
    let out = dir.join("sel.jsonl");
    let res = run(&select_args(s(corpus), s(&out), budget));
    assert_eq!(code(&res), 0);
    out
}

#[test]
fn serve_reports_progress_and_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), &synthetic(40));
    let selection = selection_for(dir.path(), &corpus, "10");
    let store = dir.path().join("store");
    let http = agent();

    let server = Server::start(&corpus, &selection, &store);
    let progress: serde_json::Value = http.get(server.url("/api/progress")).call().unwrap().body_mut().read_json().unwrap();
    assert_eq!(progress, serde_json::json!({"pending": 10, "leased": 0, "labeled": 0}));
    let mut resp = http.get(server.url("/api/tasks/next?annotator=ann&lease=600")).call().unwrap();
    assert_eq!(resp.status(), 200);
    let task: serde_json::Value = resp.body_mut().read_json().unwrap();
    let resp = http
        .post(server.url("/api/labels"))
        .send_json(serde_json::json!({"record_id": task["record_id"], "h": 1, "annotator": "ann"}))
        .unwrap();
    assert_eq!(resp.status(), 200);
    let before: serde_json::Value = http.get(server.url("/api/progress")).call().unwrap().body_mut().read_json().unwrap();
    server.kill();

    let server = Server::start(&corpus, &selection, &store);
    let after: serde_json::Value = http.get(server.url("/api/progress")).call().unwrap().body_mut().read_json().unwrap();
    assert_eq!(before, after);
    assert_eq!(after["labeled"], 1);
}

#[test]
fn serve_fails_on_unusable_store_or_port() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), &synthetic(12));
    let selection = selection_for(dir.path(), &corpus, "5");

    // A regular file where the store directory should be.
    let blocked = dir.path().join("blocked");
    std::fs::write(&blocked, "").unwrap();
    let res = run(&["serve", "--corpus", s(&corpus), "--selection", s(&selection), "--store", s(&blocked), "--port", "0"]);
    assert_eq!(code(&res), 3);
    assert!(!res.stderr.is_empty());

    let holder = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = holder.local_addr().unwrap().port().to_string();
    let store = dir.path().join("store");
    let res = run(&["serve", "--corpus", s(&corpus), "--selection", s(&selection), "--store", s(&store), "--port", &port]);
    assert_eq!(code(&res), 3);
    assert!(String::from_utf8_lossy(&res.stderr).contains(&port));
}
