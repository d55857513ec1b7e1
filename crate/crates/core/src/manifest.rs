//! Run manifests: every input and setting that affects an output artifact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::selection::SelectionConfig;
use crate::vectorize::VectorizerConfig;

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), "/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorsManifest {
    pub source: crate::similarity::VectorSource,
    pub tfidf: VectorizerConfig,
    /// SHA-256 of the embedding file when vectors were imported.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub corpus_hash: String,
    pub corpus_records: usize,
    pub template: String,
    pub template_hash: String,
    pub rng_algorithm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vectors: Option<VectorsManifest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection_text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejection_patterns: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_store_revision: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_hash: Option<String>,
    /// SHA-256 of the artifact this manifest describes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_hash: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, corpus_hash: String, corpus_records: usize, template: &crate::corpus::PromptTemplate) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            corpus_hash,
            corpus_records,
            template: template.as_str().to_string(),
            template_hash: template.content_hash(),
            rng_algorithm: crate::rng::RNG_ALGORITHM.to_string(),
            vectors: None,
            selection: None,
            rejection_text: None,
            rejection_patterns: Vec::new(),
            label_store_revision: None,
            labels_hash: None,
            output_hash: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// SHA-256 of the manifest's canonical JSON.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_json())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedLine {
            source_name: path.display().to_string(),
            line: e.line(),
            reason: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PromptTemplate;
    use crate::selection::Strategy;
    use crate::similarity::SimilarityMeasure;

    #[test]
    fn hash_tracks_content() {
        let t = PromptTemplate::default();
        let mut m = RunManifest::new("select", "abc".into(), 3, &t);
        m.selection = Some(SelectionConfig::new(2, 1, Strategy::Idds, SimilarityMeasure::Ras, 7));
        let h1 = m.hash();
        assert_eq!(h1, m.clone().hash());
        m.selection.as_mut().unwrap().rng_seed = 8;
        assert_ne!(h1, m.hash());
    }

    #[test]
    fn round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut m = RunManifest::new("build-prefs", "abc".into(), 3, &PromptTemplate::default());
        m.rejection_text = Some("no".into());
        m.label_store_revision = Some(12);
        m.write(&path).unwrap();
        assert_eq!(RunManifest::read(&path).unwrap(), m);
    }
}
