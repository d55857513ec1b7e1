#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use ragcurate_core::synthetic::{clustered_corpus, SyntheticSpec};
use ragcurate_core::Corpus;

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ragcurate"));
    // Keep the caller's environment from leaking flag overrides in.
    for (key, _) in std::env::vars() {
        if key.starts_with("AL4RAG_") {
            cmd.env_remove(key);
        }
    }
    cmd
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

pub fn synthetic(records: usize) -> Corpus {
    clustered_corpus(&SyntheticSpec {
        records,
        query_clusters: (records / 4).max(1),
        ..SyntheticSpec::default()
    })
    .corpus
}

pub fn write_corpus(dir: &Path, corpus: &Corpus) -> PathBuf {
    let path = dir.join("corpus.jsonl");
    corpus.write_jsonl(std::fs::File::create(&path).unwrap()).unwrap();
    path
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A running `serve` process, killed on drop.
pub struct Server {
    pub child: Child,
    pub base: String,
}

impl Server {
    pub fn start(corpus: &Path, selection: &Path, store: &Path) -> Server {
        let mut child = bin()
            .args([
                "serve",
                "--corpus",
                s(corpus),
                "--selection",
                s(selection),
                "--store",
                s(store),
                "--port",
                "0",
            ])
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .expect("serve starts");
        let mut line = String::new();
        BufReader::new(child.stdout.as_mut().unwrap())
            .read_line(&mut line)
            .unwrap();
        let addr = line
            .split_whitespace()
            .find(|w| w.starts_with("http://"))
            .unwrap_or_else(|| panic!("no address in {line:?}"))
            .to_string();
        Server { child, base: addr }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    /// SIGKILL, no chance to clean up.
    pub fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into()
}
