//! Annotation-budget data selection for RAG conversation logs.
//!
//! The pipeline: load conversation records ([`corpus`]), vectorize each
//! field view ([`vectorize`]), measure sample similarity ([`similarity`]),
//! choose the records worth annotating ([`selection`]), collect
//! hallucination labels ([`annotate`]), and turn them into preference pairs
//! ([`preference`]). [`metrics`] scores generated answers afterwards.

pub mod annotate;
pub mod corpus;
pub mod digest;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod preference;
pub mod rng;
pub mod selection;
pub mod similarity;
pub mod synthetic;
pub mod vectorize;

pub use corpus::{load_corpus, split_corpus, ConversationRecord, Corpus, Label, PromptTemplate, TaskKind};
pub use error::{Error, ErrorClass, Result};
pub use manifest::RunManifest;
pub use metrics::{rejection_rate, rouge_l, rouge_n, RejectionDetector, RejectionVerdict, RougeScore};
pub use preference::{
    build_preference_set, dpo_loss, export_dpo_dataset, DpoLossInputs, PreferencePair, Provenance,
    RejectionPolicy,
};
pub use selection::{
    idds_score, run_selection, run_selection_with, select_round, SelectionConfig, SelectionState, Strategy,
};
pub use similarity::{
    build_matrix, cosine, diversity_distance, pair_similarity, SimilarityKind, SimilarityMatrix,
    SimilarityMeasure, SimilarityOracle, VectorSource,
};
pub use vectorize::{
    load_embeddings, tfidf_vector, tokenize, vectorize_corpus, EmbeddingTable, FieldVectors, SparseVector,
    Vector, VectorizerConfig, Vocabulary,
};
