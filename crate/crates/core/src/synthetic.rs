//! Seeded synthetic corpora with known cluster structure, for tests and
//! benchmarks.
//!
//! Records fall into query clusters (queries share signature words) and
//! reference groups (references are drawn from one group's sentence pool).
//! Several query clusters share each reference group, so two records can
//! carry heavily overlapping references while asking different questions.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::corpus::{ConversationRecord, Corpus, Label, TaskKind};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub records: usize,
    pub query_clusters: usize,
    pub reference_groups: usize,
    /// Sentences in each group's pool.
    pub group_sentences: usize,
    /// Sentences sampled from the pool into one reference.
    pub reference_sentences: usize,
    /// Spread every query cluster over all reference groups instead of
    /// tying each cluster to one group.
    pub crossed: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            records: 400,
            query_clusters: 100,
            reference_groups: 4,
            group_sentences: 24,
            reference_sentences: 12,
            crossed: true,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// Query cluster of each record, in corpus order.
    pub query_cluster: Vec<usize>,
    /// Reference group of each record, in corpus order.
    pub reference_group: Vec<usize>,
}

const COMMON: [&str; 12] = [
    "the", "of", "and", "in", "to", "is", "was", "for", "on", "with", "as", "by",
];

const QUESTION: [&str; 6] = ["what", "which", "how", "when", "who", "why"];

fn sentence<R: Rng>(rng: &mut R, group: usize) -> String {
    let mut words = Vec::with_capacity(14);
    for _ in 0..14 {
        if rng.random_bool(0.35) {
            words.push(COMMON.choose(rng).unwrap().to_string());
        } else {
            words.push(format!("g{group}w{}", rng.random_range(0..60)));
        }
    }
    let mut s = words.join(" ");
    s.push('.');
    s
}

/// Builds a corpus. Record `i` belongs to query cluster `i % query_clusters`.
/// Its reference group is `c % reference_groups` for cluster `c`, or
/// `(i / query_clusters) % reference_groups` when `crossed` is set.
pub fn clustered_corpus(spec: &SyntheticSpec) -> SyntheticCorpus {
    assert!(spec.records > 0 && spec.query_clusters > 0 && spec.reference_groups > 0);
    assert!(spec.reference_sentences <= spec.group_sentences);
    let mut rng = rng::seeded(spec.seed);
    let pools: Vec<Vec<String>> = (0..spec.reference_groups)
        .map(|g| (0..spec.group_sentences).map(|_| sentence(&mut rng, g)).collect())
        .collect();

    let mut records = Vec::with_capacity(spec.records);
    let mut query_cluster = Vec::with_capacity(spec.records);
    let mut reference_group = Vec::with_capacity(spec.records);
    for i in 0..spec.records {
        let c = i % spec.query_clusters;
        let g = if spec.crossed {
            (i / spec.query_clusters) % spec.reference_groups
        } else {
            c % spec.reference_groups
        };
        let query = format!(
            "{} {} q{c}a q{c}b {} q{c}c {}?",
            QUESTION.choose(&mut rng).unwrap(),
            COMMON.choose(&mut rng).unwrap(),
            COMMON.choose(&mut rng).unwrap(),
            format_args!("filler{}", rng.random_range(0..40)),
        );
        let mut picked: Vec<&String> = pools[g]
            .choose_multiple(&mut rng, spec.reference_sentences)
            .collect();
        picked.shuffle(&mut rng);
        let reference = picked
            .iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        let hallucinated = rng.random_bool(0.3);
        let response = if hallucinated {
            format!("It is q{c}b according to nothing in particular, roughly filler{}.", rng.random_range(0..40))
        } else {
            format!("According to the reference, q{c}a relates to g{g}w{}.", rng.random_range(0..60))
        };
        let mut record = ConversationRecord::new(format!("syn-{i:05}"), query, reference, response).with_label(
            if hallucinated {
                Label::Hallucinated
            } else {
                Label::Faithful
            },
        );
        record.task_kind = Some(TaskKind::Qa);
        records.push(record);
        query_cluster.push(c);
        reference_group.push(g);
    }
    SyntheticCorpus {
        corpus: Corpus::from_records(records, format!("synthetic:{}", spec.seed)).expect("generated ids are unique"),
        query_cluster,
        reference_group,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_determinism() {
        let spec = SyntheticSpec {
            records: 40,
            query_clusters: 8,
            reference_groups: 2,
            ..Default::default()
        };
        let a = clustered_corpus(&spec);
        let b = clustered_corpus(&spec);
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.corpus.len(), 40);
        assert_eq!(a.query_cluster[9], 1);
        assert_eq!(a.reference_group[9], 1);
        assert!(a.corpus.records()[3].query.contains("q3a"));
    }
}
