//! Conversation records, corpus loading and prompt rendering.
//!
//! A corpus is a UTF-8 JSONL file with one record per line:
//!
//! ```text
//! {"id":"r1","query":"...","reference":"...","response":"...","hallucination":0,"task_kind":"qa"}
//! ```
//!
//! `hallucination` and `task_kind` are optional. Keys this crate does not
//! know about are kept and written back out unchanged.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::rng;

/// Annotator verdict on a response: `0` faithful, `1` hallucinated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub enum Label {
    Faithful,
    Hallucinated,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Faithful => 0,
            Label::Hallucinated => 1,
        }
    }
}

impl TryFrom<i64> for Label {
    type Error = Error;

    fn try_from(value: i64) -> Result<Self> {
        match value {
            0 => Ok(Label::Faithful),
            1 => Ok(Label::Hallucinated),
            other => Err(Error::InvalidLabel(other)),
        }
    }
}

impl From<Label> for u8 {
    fn from(label: Label) -> u8 {
        label.as_u8()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Qa,
    Summary,
    Data2text,
    Other,
}

/// One RAG interaction: the user query, the retrieved reference text, and
/// the model's response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub id: String,
    pub query: String,
    pub reference: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hallucination: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_kind: Option<TaskKind>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ConversationRecord {
    pub fn new(
        id: impl Into<String>,
        query: impl Into<String>,
        reference: impl Into<String>,
        response: impl Into<String>,
    ) -> Self {
        ConversationRecord {
            id: id.into(),
            query: query.into(),
            reference: reference.into(),
            response: response.into(),
            hallucination: None,
            task_kind: None,
            extra: Map::new(),
        }
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.hallucination = Some(label);
        self
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("id is empty".into());
        }
        for (field, text) in [
            ("query", &self.query),
            ("reference", &self.reference),
            ("response", &self.response),
        ] {
            if text.trim().is_empty() {
                return Err(format!("{field} is empty"));
            }
        }
        Ok(())
    }
}

/// An ordered, immutable collection of records with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    records: Vec<ConversationRecord>,
    source_path: String,
    index: HashMap<String, usize>,
}

impl Corpus {
    /// Builds a corpus, rejecting invalid records and duplicate ids.
    pub fn from_records(
        records: Vec<ConversationRecord>,
        source_path: impl Into<String>,
    ) -> Result<Self> {
        let source_path = source_path.into();
        let mut index = HashMap::with_capacity(records.len());
        for (pos, record) in records.iter().enumerate() {
            record.check().map_err(|reason| Error::MalformedLine {
                source_name: source_path.clone(),
                line: pos + 1,
                reason,
            })?;
            if index.insert(record.id.clone(), pos).is_some() {
                return Err(Error::DuplicateId(record.id.clone()));
            }
        }
        Ok(Corpus {
            records,
            source_path,
            index,
        })
    }

    pub fn records(&self) -> &[ConversationRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&ConversationRecord> {
        self.position(id).map(|i| &self.records[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }

    /// Writes the corpus as JSONL, one record per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for record in &self.records {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSONL serialization.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        sha256_hex(buf)
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(file), &path.display().to_string())
}

/// Parses JSONL from `reader`. Blank lines are skipped; line numbers in
/// errors are 1-based physical line numbers.
pub fn parse_corpus<R: BufRead>(reader: R, source_name: &str) -> Result<Corpus> {
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
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
        let record: ConversationRecord =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        record.check().map_err(malformed)?;
        if seen.insert(record.id.clone(), line_no).is_some() {
            return Err(Error::DuplicateId(record.id));
        }
        records.push(record);
    }
    Corpus::from_records(records, source_name)
}

const QUERY_SLOT: &str = "{query}";
const REFERENCE_SLOT: &str = "{reference}";

pub const DEFAULT_TEMPLATE: &str =
    "Answer the question based on the following reference.\nReference: {reference}\nQuestion: {query}\nAnswer:";

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Query,
    Reference,
}

/// Prompt text with exactly one `{query}` and one `{reference}` slot.
///
/// Rendering is single-pass, so a query that happens to contain the text
/// `{reference}` is inserted verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    source: String,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn new(template: impl Into<String>) -> Result<Self> {
        let source = template.into();
        for slot in [QUERY_SLOT, REFERENCE_SLOT] {
            let count = source.matches(slot).count();
            if count != 1 {
                return Err(Error::InvalidTemplate(format!(
                    "expected exactly one {slot} placeholder, found {count}"
                )));
            }
        }
        let mut segments = Vec::new();
        let mut rest = source.as_str();
        while !rest.is_empty() {
            let next = [(QUERY_SLOT, Segment::Query), (REFERENCE_SLOT, Segment::Reference)]
                .into_iter()
                .filter_map(|(slot, seg)| rest.find(slot).map(|at| (at, slot, seg)))
                .min_by_key(|(at, _, _)| *at);
            match next {
                Some((at, slot, seg)) => {
                    if at > 0 {
                        segments.push(Segment::Text(rest[..at].to_string()));
                    }
                    segments.push(seg);
                    rest = &rest[at + slot.len()..];
                }
                None => {
                    segments.push(Segment::Text(rest.to_string()));
                    rest = "";
                }
            }
        }
        Ok(PromptTemplate { source, segments })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(&self.source)
    }

    pub fn render_parts(&self, query: &str, reference: &str) -> String {
        let mut out = String::with_capacity(self.source.len() + query.len() + reference.len());
        for segment in &self.segments {
            match segment {
                Segment::Text(text) => out.push_str(text),
                Segment::Query => out.push_str(query),
                Segment::Reference => out.push_str(reference),
            }
        }
        out
    }

    pub fn render(&self, record: &ConversationRecord) -> String {
        self.render_parts(&record.query, &record.reference)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::new(DEFAULT_TEMPLATE).expect("default template is valid")
    }
}

/// Seeded partition of `corpus` into two disjoint parts. The first part has
/// `round(fraction * N)` records; both parts keep file order.
pub fn split_corpus(corpus: &Corpus, fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = corpus.len();
    let take = ((fraction * n as f64).round() as usize).min(n);
    let order = rng::permutation(n, seed);
    let mut in_first = vec![false; n];
    for &i in &order[..take] {
        in_first[i] = true;
    }
    let (mut first, mut second) = (Vec::with_capacity(take), Vec::with_capacity(n - take));
    for (record, chosen) in corpus.records.iter().zip(in_first) {
        if chosen {
            first.push(record.clone());
        } else {
            second.push(record.clone());
        }
    }
    let src = corpus.source_path();
    Ok((
        Corpus::from_records(first, format!("{src}#split[0]"))?,
        Corpus::from_records(second, format!("{src}#split[1]"))?,
    ))
}
