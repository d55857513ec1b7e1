//! Shared fixtures for the benchmarks.

use ragcurate_core::synthetic::{clustered_corpus, SyntheticSpec};
use ragcurate_core::{vectorize_corpus, Corpus, FieldVectors, PromptTemplate, VectorizerConfig};

/// A vectorized synthetic corpus of `records` records.
pub fn fixture(records: usize) -> (Corpus, Vec<FieldVectors>) {
    let spec = SyntheticSpec {
        records,
        query_clusters: (records / 4).max(1),
        ..SyntheticSpec::default()
    };
    let corpus = clustered_corpus(&spec).corpus;
    let vectors = vectorize_corpus(&corpus, &PromptTemplate::default(), VectorizerConfig::default())
        .expect("synthetic corpus vectorizes");
    (corpus, vectors)
}

/// Deterministic pseudo-text of `len` tokens over a small vocabulary.
pub fn token_text(len: usize, salt: u64) -> String {
    let mut x = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..len)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            format!("w{}", x % 50)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_stable() {
        let (corpus, vectors) = fixture(20);
        assert_eq!(corpus.len(), 20);
        assert_eq!(vectors.len(), 20);
        assert_eq!(token_text(5, 3), token_text(5, 3));
        assert_eq!(token_text(5, 3).split(' ').count(), 5);
    }
}
