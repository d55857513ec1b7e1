//! The batch subcommands. Each prints a JSON summary on stdout; artifacts
//! written as JSONL get a `<out>.manifest.json` next to them.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use ragcurate_core::annotate::{AnnotationStore, ExportedLabel, StoreConfig};
use ragcurate_core::digest::sha256_hex;
use ragcurate_core::manifest::VectorsManifest;
use ragcurate_core::metrics::{evaluate, RejectionDetector, DEFAULT_REJECTION_PATTERNS};
use ragcurate_core::preference::{write_dpo_jsonl, Provenance};
use ragcurate_core::selection::{read_selection_jsonl, run_selection_with, write_selection_jsonl};
use ragcurate_core::similarity::{load_matrix, save_matrix, MatrixCacheKey, SimilarityKind, VectorSource};
use ragcurate_core::{
    build_matrix, build_preference_set, load_corpus, load_embeddings, vectorize_corpus, Corpus, Error, Label,
    PromptTemplate, RejectionPolicy, RunManifest, SelectionConfig, VectorizerConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{manifest_path, CliError, CliResult, CorpusArgs, EmbedArgs, IngestArgs, PrefsArgs, ReportArgs, SelectArgs};

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e).into())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

fn load_inputs(args: &CorpusArgs) -> CliResult<(Corpus, PromptTemplate)> {
    let corpus = load_corpus(&args.corpus)?;
    let template = match &args.template_file {
        Some(path) => {
            let text = String::from_utf8(read_bytes(path)?)
                .map_err(|_| CliError::Usage(format!("template {} is not UTF-8", path.display())))?;
            PromptTemplate::new(text)?
        }
        None => PromptTemplate::default(),
    };
    Ok((corpus, template))
}

pub fn ingest_check(args: &IngestArgs) -> CliResult<()> {
    let (corpus, template) = load_inputs(&args.corpus)?;
    let mut labels = BTreeMap::new();
    let mut kinds = BTreeMap::new();
    for r in corpus.records() {
        let label = r.hallucination.map_or("unlabeled".to_string(), |h| h.to_string());
        *labels.entry(label).or_insert(0usize) += 1;
        let kind = r
            .task_kind
            .map_or("unspecified".to_string(), |k| serde_json::to_value(k).unwrap().as_str().unwrap().to_string());
        *kinds.entry(kind).or_insert(0usize) += 1;
    }
    print_json(&json!({
        "records": corpus.len(),
        "labels": labels,
        "task_kinds": kinds,
        "corpus_hash": corpus.content_hash(),
        "template_hash": template.content_hash(),
    }));
    Ok(())
}

pub fn select(args: &SelectArgs) -> CliResult<()> {
    let (corpus, template) = load_inputs(&args.corpus)?;
    let budget = args.budget.resolve(corpus.len())?;
    let source = if args.embeddings.is_some() {
        VectorSource::Embedding
    } else {
        VectorSource::Tfidf
    };
    let mut config = SelectionConfig::new(budget, args.rounds, args.strategy, args.similarity, args.seed);
    config.lambda = args.lambda;
    config.include_self = !args.exclude_self;
    config.static_pool_average = args.static_pool_average;
    config.kind = SimilarityKind {
        measure: args.similarity,
        source,
    };
    config.validate(corpus.len())?;

    let tfidf = VectorizerConfig {
        shared_vocabulary: args.shared_vocabulary,
    };
    let mut manifest = RunManifest::new("select", corpus.content_hash(), corpus.len(), &template);
    let ids: Vec<String> = corpus.ids().map(str::to_string).collect();

    let state = if config.strategy.needs_similarity() {
        let (vectors, vectors_tag, embeddings_hash) = match &args.embeddings {
            Some(path) => {
                let hash = sha256_hex(read_bytes(path)?);
                let table = load_embeddings(path, &corpus)?;
                (table.field_vectors(&corpus)?, format!("embeddings:{hash}"), Some(hash))
            }
            None => (
                vectorize_corpus(&corpus, &template, tfidf)?,
                serde_json::to_string(&tfidf).expect("config serializes"),
                None,
            ),
        };
        manifest.vectors = Some(VectorsManifest {
            source,
            tfidf,
            embeddings_hash,
        });
        let key = MatrixCacheKey {
            corpus_hash: manifest.corpus_hash.clone(),
            kind: config.kind,
            template_hash: manifest.template_hash.clone(),
            vectors: vectors_tag,
        };
        let matrix = match &args.cache_dir {
            Some(dir) => {
                let path = dir.join(key.file_name());
                match load_matrix(&path, &key) {
                    Ok(m) => m,
                    Err(_) => {
                        let m = build_matrix(&vectors, &vectors, config.kind.measure)?;
                        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                        save_matrix(&path, &m, &key)?;
                        m
                    }
                }
            }
            None => build_matrix(&vectors, &vectors, config.kind.measure)?,
        };
        run_selection_with(ids, Some(&matrix), &config)?
    } else {
        run_selection_with(ids, None, &config)?
    };

    let mut out = Vec::new();
    write_selection_jsonl(&state, config.strategy, &mut out).expect("writing to memory");
    manifest.selection = Some(config);
    manifest.output_hash = Some(sha256_hex(&out));
    write_bytes(&args.out, &out)?;
    let mpath = manifest_path(&args.out);
    manifest.write(&mpath)?;
    print_json(&json!({
        "selected": budget,
        "rounds": config.rounds,
        "out": args.out,
        "manifest": mpath,
        "manifest_hash": manifest.hash(),
    }));
    Ok(())
}

fn read_labels(path: &Path) -> CliResult<Vec<ExportedLabel>> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| {
        Error::MalformedLine {
            source_name: path.display().to_string(),
            line: e.line(),
            reason: e.to_string(),
        }
        .into()
    })
}

fn read_selection_ids(path: &Path) -> CliResult<Vec<String>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let lines = read_selection_jsonl(BufReader::new(file), &path.display().to_string())?;
    Ok(lines.into_iter().map(|l| l.id).collect())
}

pub fn build_prefs(args: &PrefsArgs) -> CliResult<()> {
    let (corpus, template) = load_inputs(&args.corpus)?;
    let mut policy = match &args.rejection_text {
        Some(text) => RejectionPolicy::new(text.clone())?,
        None => RejectionPolicy::default(),
    };
    for o in &args.task_rejection {
        policy = policy.with_task_override(o.kind, o.text.clone())?;
    }

    let mut manifest = RunManifest::new("build-prefs", corpus.content_hash(), corpus.len(), &template);
    let (labels, mut selected) = match (&args.labels, &args.store) {
        (Some(path), _) => (read_labels(path)?, Vec::new()),
        (None, Some(dir)) => {
            let store = AnnotationStore::open(dir, StoreConfig::default())?;
            manifest.label_store_revision = Some(store.revision());
            let tasks = store.tasks().into_iter().map(|t| t.record_id).collect();
            (store.export_labels(), tasks)
        }
        (None, None) => return Err(CliError::Usage("either --labels or --store is required".into())),
    };
    if let Some(path) = &args.selection {
        selected = read_selection_ids(path)?;
    }
    if labels.is_empty() {
        return Err(CliError::Data("no labels: nothing to build preference pairs from".into()));
    }

    let mut by_id: BTreeMap<&str, Label> = BTreeMap::new();
    for l in &labels {
        if corpus.get(&l.record_id).is_none() {
            return Err(Error::UnknownRecord(l.record_id.clone()).into());
        }
        if by_id.insert(l.record_id.as_str(), l.h).is_some() {
            return Err(Error::DuplicateId(l.record_id.clone()).into());
        }
    }
    let records: Vec<_> = corpus
        .records()
        .iter()
        .filter_map(|r| {
            by_id.get(r.id.as_str()).map(|&h| {
                let mut r = r.clone();
                r.hallucination = Some(h);
                r
            })
        })
        .collect();
    let pairs = build_preference_set(&records, &template, &policy)?;

    let unlabeled: Vec<&str> = selected
        .iter()
        .map(String::as_str)
        .filter(|id| !by_id.contains_key(id))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    for id in &unlabeled {
        eprintln!("warning: selected record {id} has no label and was skipped");
    }

    let mut out = Vec::new();
    write_dpo_jsonl(&pairs, &mut out).expect("writing to memory");
    let canonical_labels: Vec<ExportedLabel> = by_id
        .iter()
        .map(|(id, &h)| ExportedLabel {
            record_id: id.to_string(),
            h,
        })
        .collect();
    manifest.labels_hash = Some(sha256_hex(serde_json::to_vec(&canonical_labels).expect("labels serialize")));
    manifest.rejection_text = Some(policy.rejection_text.clone());
    manifest.output_hash = Some(sha256_hex(&out));
    write_bytes(&args.out, &out)?;
    let mpath = manifest_path(&args.out);
    manifest.write(&mpath)?;

    let count = |p: Provenance| pairs.iter().filter(|x| x.provenance == p).count();
    print_json(&json!({
        "pairs": pairs.len(),
        "original_response_chosen": count(Provenance::OriginalResponseChosen),
        "rejection_chosen": count(Provenance::RejectionChosen),
        "unlabeled_selected": unlabeled,
        "out": args.out,
        "manifest": mpath,
        "manifest_hash": manifest.hash(),
    }));
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ReportRow {
    #[serde(default)]
    id: Option<serde_json::Value>,
    response: String,
    reference: String,
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    manifest_hash: String,
    manifest: &'a RunManifest,
    #[serde(flatten)]
    evaluation: ragcurate_core::metrics::EvaluationReport,
}

pub fn report(args: &ReportArgs) -> CliResult<()> {
    let source = args.input.display().to_string();
    let bytes = read_bytes(&args.input)?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(bytes.as_slice()).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&args.input, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ReportRow = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            source_name: source.clone(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        let id = match row.id {
            Some(serde_json::Value::String(s)) => s,
            Some(v) => v.to_string(),
            None => (i + 1).to_string(),
        };
        rows.push((id, row.response, row.reference));
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!("malformed input: {source} holds no rows")));
    }

    let policy = match &args.rejection_text {
        Some(text) => RejectionPolicy::new(text.clone())?,
        None => RejectionPolicy::default(),
    };
    let mut patterns: Vec<String> = Vec::new();
    if !args.no_default_patterns {
        patterns.extend(DEFAULT_REJECTION_PATTERNS.iter().map(|p| p.to_string()));
    }
    patterns.extend(args.patterns.iter().cloned());
    let detector = RejectionDetector::new(&policy, &patterns);
    let evaluation = evaluate(
        rows.iter().map(|(id, resp, refr)| (id.as_str(), resp.as_str(), refr.as_str())),
        &detector,
    )?;

    let mut manifest = RunManifest::new("report", sha256_hex(&bytes), rows.len(), &PromptTemplate::default());
    manifest.rejection_text = Some(policy.rejection_text.clone());
    manifest.rejection_patterns = detector.patterns().to_vec();
    let report = Report {
        manifest_hash: manifest.hash(),
        manifest: &manifest,
        evaluation,
    };
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    match &args.out {
        Some(path) => {
            write_bytes(path, text.as_bytes())?;
            print_json(&json!({
                "count": report.evaluation.aggregate.count,
                "out": path,
                "manifest_hash": report.manifest_hash,
            }));
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn embed_import(args: &EmbedArgs) -> CliResult<()> {
    let corpus = load_corpus(&args.corpus)?;
    let hash = sha256_hex(read_bytes(&args.embeddings)?);
    let table = load_embeddings(&args.embeddings, &corpus)?;
    let complete = match table.field_vectors(&corpus) {
        Ok(_) => true,
        Err(e) if args.require_complete => return Err(e.into()),
        Err(_) => false,
    };
    print_json(&json!({
        "records": table.record_count(),
        "entries": table.len(),
        "views": table.views(),
        "complete": complete,
        "embeddings_hash": hash,
    }));
    Ok(())
}
