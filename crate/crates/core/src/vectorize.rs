//! Per-field TF-IDF vectors and imported dense embeddings.
//!
//! Each record is seen through three views: its query, its reference, and
//! its rendered prompt. A fourth view, the query and reference joined by a
//! single space, is vectorized under the prompt vocabulary and backs the
//! `qr_combined` similarity.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PromptTemplate};
use crate::error::{Error, Result};

/// Lowercases and splits on every run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Term index with document frequencies. Indices follow lexicographic term
/// order, so fitting the same texts always yields the same map.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    terms: Vec<String>,
    index: HashMap<String, u32>,
    doc_freq: Vec<u32>,
    document_count: usize,
}

impl Vocabulary {
    pub fn fit<'a, I>(texts: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut df: BTreeMap<String, u32> = BTreeMap::new();
        let mut document_count = 0usize;
        for text in texts {
            document_count += 1;
            let mut terms = tokenize(text);
            terms.sort_unstable();
            terms.dedup();
            for term in terms {
                *df.entry(term).or_default() += 1;
            }
        }
        if document_count == 0 {
            return Err(Error::EmptyInput);
        }
        let mut terms = Vec::with_capacity(df.len());
        let mut doc_freq = Vec::with_capacity(df.len());
        for (term, count) in df {
            terms.push(term);
            doc_freq.push(count);
        }
        let index = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary {
            terms,
            index,
            doc_freq,
            document_count,
        })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn document_count(&self) -> usize {
        self.document_count
    }

    pub fn index_of(&self, term: &str) -> Option<u32> {
        self.index.get(term).copied()
    }

    pub fn term(&self, index: u32) -> Option<&str> {
        self.terms.get(index as usize).map(String::as_str)
    }

    pub fn doc_freq(&self, term: &str) -> Option<u32> {
        self.index_of(term).map(|i| self.doc_freq[i as usize])
    }

    /// Smoothed inverse document frequency, `ln((1 + N) / (1 + df)) + 1`.
    pub fn idf(&self, index: u32) -> f64 {
        let n = self.document_count as f64;
        let df = self.doc_freq[index as usize] as f64;
        ((1.0 + n) / (1.0 + df)).ln() + 1.0
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }
}

/// Sparse vector with strictly increasing indices and non-zero finite weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVector {
    indices: Vec<u32>,
    weights: Vec<f64>,
    dimension: usize,
    normalized: bool,
}

impl SparseVector {
    pub fn new(mut entries: Vec<(u32, f64)>, dimension: usize) -> Result<Self> {
        entries.sort_by_key(|&(i, _)| i);
        let mut indices = Vec::with_capacity(entries.len());
        let mut weights = Vec::with_capacity(entries.len());
        for (i, w) in entries {
            if indices.last() == Some(&i) {
                return Err(Error::DimensionMismatch(format!("duplicate index {i}")));
            }
            if i as usize >= dimension {
                return Err(Error::DimensionMismatch(format!(
                    "index {i} out of range for dimension {dimension}"
                )));
            }
            if !w.is_finite() {
                return Err(Error::NonFiniteInput(format!("weight at index {i}")));
            }
            if w != 0.0 {
                indices.push(i);
                weights.push(w);
            }
        }
        Ok(SparseVector {
            indices,
            weights,
            dimension,
            normalized: false,
        })
    }

    pub fn empty(dimension: usize) -> Self {
        SparseVector {
            dimension,
            ..Default::default()
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.indices.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.indices.len() && j < other.indices.len() {
            match self.indices[i].cmp(&other.indices[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.weights[i] * other.weights[j];
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    /// Scales to unit L2 norm. The empty vector stays empty.
    pub fn into_normalized(mut self) -> Self {
        let norm = self.norm();
        if norm > 0.0 {
            for w in &mut self.weights {
                *w /= norm;
            }
            self.normalized = true;
        }
        self
    }
}

/// A vector in one field view, either TF-IDF or an imported embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum Vector {
    Sparse(SparseVector),
    Dense(Vec<f64>),
}

impl Vector {
    pub fn dimension(&self) -> usize {
        match self {
            Vector::Sparse(v) => v.dimension(),
            Vector::Dense(v) => v.len(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Vector::Sparse(v) => v.is_empty(),
            Vector::Dense(v) => v.iter().all(|&x| x == 0.0),
        }
    }
}

/// TF-IDF vector of `text` under `vocab`: raw term count times smoothed idf,
/// L2-normalized. Terms missing from the vocabulary are ignored.
pub fn tfidf_vector(text: &str, vocab: &Vocabulary) -> SparseVector {
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    for term in tokenize(text) {
        if let Some(i) = vocab.index_of(&term) {
            *counts.entry(i).or_default() += 1.0;
        }
    }
    let entries = counts
        .into_iter()
        .map(|(i, tf)| (i, tf * vocab.idf(i)))
        .collect();
    SparseVector::new(entries, vocab.len())
        .expect("indices come from the vocabulary")
        .into_normalized()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VectorizerConfig {
    /// Fit one vocabulary over queries, references and prompts together
    /// instead of one per view.
    #[serde(default)]
    pub shared_vocabulary: bool,
}

/// The vectors of one record in every view.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldVectors {
    pub record_id: String,
    pub query_vec: Vector,
    pub reference_vec: Vector,
    pub prompt_vec: Vector,
    /// Query and reference concatenated, without template text.
    pub combined_vec: Option<Vector>,
}

/// Vocabularies fitted by [`vectorize_corpus`], kept for inspection.
#[derive(Debug, Clone)]
pub struct FittedViews {
    pub query: Vocabulary,
    pub reference: Vocabulary,
    pub prompt: Vocabulary,
}

pub fn vectorize_corpus(
    corpus: &Corpus,
    template: &PromptTemplate,
    config: VectorizerConfig,
) -> Result<Vec<FieldVectors>> {
    vectorize_corpus_with_vocab(corpus, template, config).map(|(v, _)| v)
}

pub fn vectorize_corpus_with_vocab(
    corpus: &Corpus,
    template: &PromptTemplate,
    config: VectorizerConfig,
) -> Result<(Vec<FieldVectors>, FittedViews)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let records = corpus.records();
    let prompts: Vec<String> = records.iter().map(|r| template.render(r)).collect();
    let queries = records.iter().map(|r| r.query.as_str());
    let references = records.iter().map(|r| r.reference.as_str());

    let views = if config.shared_vocabulary {
        let shared = Vocabulary::fit(
            queries
                .chain(references)
                .chain(prompts.iter().map(String::as_str)),
        )?;
        FittedViews {
            query: shared.clone(),
            reference: shared.clone(),
            prompt: shared,
        }
    } else {
        FittedViews {
            query: Vocabulary::fit(queries)?,
            reference: Vocabulary::fit(references)?,
            prompt: Vocabulary::fit(prompts.iter().map(String::as_str))?,
        }
    };

    let vectors = records
        .par_iter()
        .zip(prompts.par_iter())
        .map(|(record, prompt)| {
            let combined = format!("{} {}", record.query, record.reference);
            FieldVectors {
                record_id: record.id.clone(),
                query_vec: Vector::Sparse(tfidf_vector(&record.query, &views.query)),
                reference_vec: Vector::Sparse(tfidf_vector(&record.reference, &views.reference)),
                prompt_vec: Vector::Sparse(tfidf_vector(prompt, &views.prompt)),
                combined_vec: Some(Vector::Sparse(tfidf_vector(&combined, &views.prompt))),
            }
        })
        .collect();
    Ok((vectors, views))
}

pub const VIEW_QUERY: &str = "query";
pub const VIEW_REFERENCE: &str = "reference";
pub const VIEW_PROMPT: &str = "prompt";
pub const VIEW_COMBINED: &str = "qr_combined";

#[derive(Debug, Deserialize)]
struct EmbeddingHeader {
    views: BTreeMap<String, usize>,
}

#[derive(Debug, Deserialize)]
struct EmbeddingRow {
    id: String,
    view: String,
    vector: Vec<f64>,
}

/// Dense vectors keyed by record id and view name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    dims: BTreeMap<String, usize>,
    rows: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
}

impl EmbeddingTable {
    pub fn views(&self) -> &BTreeMap<String, usize> {
        &self.dims
    }

    /// Total number of (record, view) entries.
    pub fn len(&self) -> usize {
        self.rows.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn record_count(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, record_id: &str, view: &str) -> Option<&[f64]> {
        self.rows.get(record_id)?.get(view).map(Vec::as_slice)
    }

    /// Builds field vectors for every corpus record. The query, reference and
    /// prompt views are required; `qr_combined` is used when present.
    pub fn field_vectors(&self, corpus: &Corpus) -> Result<Vec<FieldVectors>> {
        corpus
            .records()
            .iter()
            .map(|record| {
                let id = record.id.as_str();
                let need = |view: &str| {
                    self.get(id, view)
                        .map(|v| Vector::Dense(v.to_vec()))
                        .ok_or_else(|| Error::MissingView {
                            record_id: id.to_string(),
                            view: view.to_string(),
                        })
                };
                Ok(FieldVectors {
                    record_id: id.to_string(),
                    query_vec: need(VIEW_QUERY)?,
                    reference_vec: need(VIEW_REFERENCE)?,
                    prompt_vec: need(VIEW_PROMPT)?,
                    combined_vec: self
                        .get(id, VIEW_COMBINED)
                        .map(|v| Vector::Dense(v.to_vec())),
                })
            })
            .collect()
    }
}

pub fn load_embeddings(path: impl AsRef<Path>, corpus: &Corpus) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(BufReader::new(file), &path.display().to_string(), corpus)
}

/// Parses an embedding file: a header line `{"views":{name:dim,...}}`
/// followed by rows `{"id":..,"view":..,"vector":[..]}`.
pub fn parse_embeddings<R: BufRead>(
    reader: R,
    source_name: &str,
    corpus: &Corpus,
) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::default();
    let mut have_header = false;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(source_name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedLine {
            source_name: source_name.to_string(),
            line: line_no,
            reason,
        };
        if !have_header {
            let header: EmbeddingHeader =
                serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
            if header.views.is_empty() || header.views.values().any(|&d| d == 0) {
                return Err(malformed("header must declare views with positive dimensions".into()));
            }
            table.dims = header.views;
            have_header = true;
            continue;
        }
        let row: EmbeddingRow = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let Some(&dim) = table.dims.get(&row.view) else {
            return Err(malformed(format!("view {:?} not declared in header", row.view)));
        };
        if corpus.position(&row.id).is_none() {
            return Err(Error::UnknownRecord(row.id));
        }
        if row.vector.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "record {:?} view {:?} has dimension {}, expected {dim}",
                row.id,
                row.view,
                row.vector.len()
            )));
        }
        if row.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput(format!("record {:?}", row.id)));
        }
        let views = table.rows.entry(row.id.clone()).or_default();
        if views.insert(row.view.clone(), row.vector).is_some() {
            return Err(malformed(format!(
                "duplicate vector for record {:?} view {:?}",
                row.id, row.view
            )));
        }
    }
    if !have_header {
        return Err(Error::EmptyInput);
    }
    Ok(table)
}
