//! Pairwise sample similarity under each measurement regime, and the
//! matrices the selection loop reads from.
//!
//! Retrieval-augmented similarity (`ras`) compares query with query and
//! reference with reference, averages the two, and caps the result by the
//! whole-prompt similarity:
//!
//! ```text
//! ras(x, y) = min(cos(x_p, y_p), (cos(x_q, y_q) + cos(x_r, y_r)) / 2)
//! ```

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::vectorize::{FieldVectors, Vector, VIEW_COMBINED};

/// Tolerance for values that drift just outside [0, 1] through rounding.
pub const CLAMP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMeasure {
    QueryOnly,
    PromptOnly,
    QrCombined,
    Ras,
}

impl SimilarityMeasure {
    pub const ALL: [SimilarityMeasure; 4] = [
        SimilarityMeasure::QueryOnly,
        SimilarityMeasure::PromptOnly,
        SimilarityMeasure::QrCombined,
        SimilarityMeasure::Ras,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SimilarityMeasure::QueryOnly => "query_only",
            SimilarityMeasure::PromptOnly => "prompt_only",
            SimilarityMeasure::QrCombined => "qr_combined",
            SimilarityMeasure::Ras => "ras",
        }
    }
}

impl fmt::Display for SimilarityMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SimilarityMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        SimilarityMeasure::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .or(match norm.as_str() {
                "query" => Some(SimilarityMeasure::QueryOnly),
                "prompt" => Some(SimilarityMeasure::PromptOnly),
                "qr" | "combined" => Some(SimilarityMeasure::QrCombined),
                _ => None,
            })
            .ok_or_else(|| Error::InvalidConfig(format!("unknown similarity measure {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorSource {
    #[default]
    Tfidf,
    Embedding,
}

impl fmt::Display for VectorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VectorSource::Tfidf => "tfidf",
            VectorSource::Embedding => "embedding",
        })
    }
}

impl FromStr for VectorSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tfidf" | "tf-idf" => Ok(VectorSource::Tfidf),
            "embedding" | "embeddings" => Ok(VectorSource::Embedding),
            _ => Err(Error::InvalidConfig(format!("unknown vector source {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SimilarityKind {
    pub measure: SimilarityMeasure,
    pub source: VectorSource,
}

impl SimilarityKind {
    pub fn tfidf(measure: SimilarityMeasure) -> Self {
        SimilarityKind {
            measure,
            source: VectorSource::Tfidf,
        }
    }
}

// Dense embeddings can have negative cosines; those clamp to 0 as well.
fn clamp_unit(x: f64) -> f64 {
    debug_assert!(x <= 1.0 + CLAMP_TOLERANCE, "similarity {x} above 1");
    x.clamp(0.0, 1.0)
}

/// Cosine similarity clamped to [0, 1]. A zero vector on either side gives 0.
pub fn cosine(u: &Vector, v: &Vector) -> Result<f64> {
    if u.dimension() != v.dimension() {
        return Err(Error::DimensionMismatch(format!(
            "cosine of vectors with dimensions {} and {}",
            u.dimension(),
            v.dimension()
        )));
    }
    let (dot, nu, nv) = match (u, v) {
        (Vector::Sparse(a), Vector::Sparse(b)) => (a.dot(b), a.norm(), b.norm()),
        (Vector::Dense(a), Vector::Dense(b)) => {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for (x, y) in a.iter().zip(b) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            (dot, na.sqrt(), nb.sqrt())
        }
        _ => {
            return Err(Error::DimensionMismatch(
                "cosine between sparse and dense vectors".into(),
            ))
        }
    };
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok(clamp_unit(dot / (nu * nv)))
}

fn combined(x: &FieldVectors) -> Result<&Vector> {
    x.combined_vec.as_ref().ok_or_else(|| Error::MissingView {
        record_id: x.record_id.clone(),
        view: VIEW_COMBINED.to_string(),
    })
}

pub fn pair_similarity(x: &FieldVectors, y: &FieldVectors, measure: SimilarityMeasure) -> Result<f64> {
    match measure {
        SimilarityMeasure::QueryOnly => cosine(&x.query_vec, &y.query_vec),
        SimilarityMeasure::PromptOnly => cosine(&x.prompt_vec, &y.prompt_vec),
        SimilarityMeasure::QrCombined => cosine(combined(x)?, combined(y)?),
        SimilarityMeasure::Ras => {
            let prompt = cosine(&x.prompt_vec, &y.prompt_vec)?;
            let query = cosine(&x.query_vec, &y.query_vec)?;
            let reference = cosine(&x.reference_vec, &y.reference_vec)?;
            Ok(prompt.min(0.5 * (query + reference)))
        }
    }
}

/// Mean of `1 - sim(x, s)` over the selected samples.
pub fn diversity_distance(
    x: &FieldVectors,
    selected: &[FieldVectors],
    measure: SimilarityMeasure,
) -> Result<f64> {
    if selected.is_empty() {
        return Err(Error::EmptySelected);
    }
    let mut total = 0.0;
    for s in selected {
        total += 1.0 - pair_similarity(x, s, measure)?;
    }
    Ok(total / selected.len() as f64)
}

/// Read access to a precomputed similarity between items `i` and `j`.
pub trait SimilarityOracle: Sync {
    fn len(&self) -> usize;

    fn sim(&self, i: usize, j: usize) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense row-major similarity matrix with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    row_ids: Vec<String>,
    col_ids: Vec<String>,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_values(row_ids: Vec<String>, col_ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != row_ids.len() * col_ids.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {}x{} matrix",
                values.len(),
                row_ids.len(),
                col_ids.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::NonFiniteInput(format!("similarity value {bad} outside [0, 1]")));
        }
        Ok(SimilarityMatrix {
            row_ids,
            col_ids,
            values,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.row_ids.len(), self.col_ids.len())
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[String] {
        &self.col_ids
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.col_ids.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.col_ids.len();
        &self.values[i * cols..(i + 1) * cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl SimilarityOracle for SimilarityMatrix {
    fn len(&self) -> usize {
        self.row_ids.len()
    }

    fn sim(&self, i: usize, j: usize) -> f64 {
        self.get(i, j)
    }
}

/// Full `rows x cols` matrix. Rows are computed in parallel; each entry is an
/// independent [`pair_similarity`] call, so the result does not depend on
/// the number of workers.
pub fn build_matrix(
    rows: &[FieldVectors],
    cols: &[FieldVectors],
    measure: SimilarityMeasure,
) -> Result<SimilarityMatrix> {
    let per_row: Vec<Vec<f64>> = rows
        .par_iter()
        .map(|x| {
            cols.iter()
                .map(|y| pair_similarity(x, y, measure))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(SimilarityMatrix {
        row_ids: rows.iter().map(|r| r.record_id.clone()).collect(),
        col_ids: cols.iter().map(|c| c.record_id.clone()).collect(),
        values: per_row.into_iter().flatten().collect(),
    })
}

/// Identifies what a cached matrix was computed from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixCacheKey {
    pub corpus_hash: String,
    pub kind: SimilarityKind,
    pub template_hash: String,
    /// Vectorizer settings, or the embedding file hash for imported vectors.
    pub vectors: String,
}

impl MatrixCacheKey {
    /// Stable file name for this key.
    pub fn file_name(&self) -> String {
        let json = serde_json::to_string(self).expect("key serializes");
        format!("{}.simm", &sha256_hex(json)[..24])
    }
}

const CACHE_FORMAT: &str = "ragcurate-simmatrix/1";

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    key: MatrixCacheKey,
    rows: usize,
    cols: usize,
    row_ids: Vec<String>,
    col_ids: Vec<String>,
}

/// Writes a JSON header line followed by the values as little-endian `f64`.
pub fn save_matrix(path: impl AsRef<Path>, matrix: &SimilarityMatrix, key: &MatrixCacheKey) -> Result<()> {
    let path = path.as_ref();
    let header = CacheHeader {
        format: CACHE_FORMAT.to_string(),
        key: key.clone(),
        rows: matrix.row_ids.len(),
        cols: matrix.col_ids.len(),
        row_ids: matrix.row_ids.clone(),
        col_ids: matrix.col_ids.clone(),
    };
    let tmp = path.with_extension("simm.tmp");
    let write = || -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for v in &matrix.values {
            out.write_all(&v.to_le_bytes())?;
        }
        out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

/// Loads a cached matrix, failing if it was built from anything other than
/// `expected`.
pub fn load_matrix(path: impl AsRef<Path>, expected: &MatrixCacheKey) -> Result<SimilarityMatrix> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: CacheHeader = serde_json::from_str(&line)
        .map_err(|e| Error::CacheMismatch(format!("unreadable header: {e}")))?;
    if header.format != CACHE_FORMAT {
        return Err(Error::CacheMismatch(format!("format {:?}", header.format)));
    }
    if &header.key != expected {
        return Err(Error::CacheMismatch(format!(
            "cache built for {:?}, expected {:?}",
            header.key, expected
        )));
    }
    if header.row_ids.len() != header.rows || header.col_ids.len() != header.cols {
        return Err(Error::CacheMismatch("id lists disagree with declared shape".into()));
    }
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != header.rows * header.cols * 8 {
        return Err(Error::CacheMismatch(format!(
            "expected {} value bytes, found {}",
            header.rows * header.cols * 8,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    SimilarityMatrix::from_values(header.row_ids, header.col_ids, values)
        .map_err(|e| Error::CacheMismatch(e.to_string()))
}
