//! ROUGE-1/2/L and refusal detection for evaluating generated answers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preference::RejectionPolicy;
use crate::vectorize::tokenize;

pub const DEFAULT_REJECTION_PATTERNS: [&str; 3] = [
    "cannot answer",
    "unable to answer",
    "cannot provide a reliable answer",
];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_overlap(overlap: usize, candidate_len: usize, reference_len: usize) -> Self {
        if overlap == 0 || candidate_len == 0 || reference_len == 0 {
            return RougeScore::default();
        }
        let precision = overlap as f64 / candidate_len as f64;
        let recall = overlap as f64 / reference_len as f64;
        RougeScore {
            precision,
            recall,
            f1: 2.0 * precision * recall / (precision + recall),
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_default() += 1;
        }
    }
    counts
}

/// ROUGE-N over pre-tokenized text with clipped n-gram counts.
pub fn rouge_n_tokens(candidate: &[String], reference: &[String], n: usize) -> RougeScore {
    assert!(n >= 1, "n-gram order must be at least 1");
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap = cand
        .iter()
        .map(|(gram, &c)| c.min(refs.get(gram).copied().unwrap_or(0)))
        .sum();
    let total = |len: usize| len.saturating_sub(n - 1);
    RougeScore::from_overlap(overlap, total(candidate.len()), total(reference.len()))
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<RougeScore> {
    if n == 0 {
        return Err(Error::InvalidConfig("ROUGE-N needs n >= 1".into()));
    }
    Ok(rouge_n_tokens(&tokenize(candidate), &tokenize(reference), n))
}

/// Longest common subsequence length, O(|a|·|b|) time and O(|b|) memory.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l_tokens(candidate: &[String], reference: &[String]) -> RougeScore {
    RougeScore::from_overlap(lcs_len(candidate, reference), candidate.len(), reference.len())
}

pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionVerdict {
    pub rejected: bool,
    pub matched_pattern: Option<String>,
}

/// Case-insensitive substring matcher for refusals.
#[derive(Debug, Clone)]
pub struct RejectionDetector {
    patterns: Vec<String>,
    lowered: Vec<String>,
}

impl RejectionDetector {
    /// Matches every wording in `policy` plus `extra_patterns`.
    pub fn new<S: AsRef<str>>(policy: &RejectionPolicy, extra_patterns: &[S]) -> Self {
        let mut patterns: Vec<String> = Vec::new();
        for p in policy.texts().chain(extra_patterns.iter().map(AsRef::as_ref)) {
            let p = p.trim();
            if !p.is_empty() && !patterns.iter().any(|q| q == p) {
                patterns.push(p.to_string());
            }
        }
        let lowered = patterns.iter().map(|p| p.to_lowercase()).collect();
        RejectionDetector { patterns, lowered }
    }

    pub fn with_defaults(policy: &RejectionPolicy) -> Self {
        RejectionDetector::new(policy, &DEFAULT_REJECTION_PATTERNS)
    }

    pub fn patterns(&self) -> &[String] {
        &self.patterns
    }

    pub fn classify(&self, response: &str) -> RejectionVerdict {
        let text = response.to_lowercase();
        let matched = self
            .lowered
            .iter()
            .position(|p| text.contains(p.as_str()))
            .map(|i| self.patterns[i].clone());
        RejectionVerdict {
            rejected: matched.is_some(),
            matched_pattern: matched,
        }
    }

    pub fn rate<S: AsRef<str>>(&self, responses: &[S]) -> Result<f64> {
        if responses.is_empty() {
            return Err(Error::EmptyInput);
        }
        let hits = responses
            .iter()
            .filter(|r| self.classify(r.as_ref()).rejected)
            .count();
        Ok(hits as f64 / responses.len() as f64)
    }
}

/// Fraction of `responses` that contain the policy's refusal text or any
/// of `extra_patterns`, ignoring case.
pub fn rejection_rate<S: AsRef<str>, P: AsRef<str>>(
    responses: &[S],
    policy: &RejectionPolicy,
    extra_patterns: &[P],
) -> Result<f64> {
    RejectionDetector::new(policy, extra_patterns).rate(responses)
}

/// Per-response scores for one evaluated item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScores {
    pub id: String,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
    pub rejected: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matched_pattern: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub rouge1_f1: f64,
    pub rouge2_f1: f64,
    pub rouge_l_f1: f64,
    pub rejection_rate: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub aggregate: Aggregate,
    pub patterns: Vec<String>,
    pub items: Vec<ItemScores>,
}

/// Scores each `(id, response, reference_answer)` triple and averages the
/// F1 values.
pub fn evaluate<'a, I>(items: I, detector: &RejectionDetector) -> Result<EvaluationReport>
where
    I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
{
    let mut scored = Vec::new();
    for (id, response, reference) in items {
        let cand = tokenize(response);
        let refs = tokenize(reference);
        let verdict = detector.classify(response);
        scored.push(ItemScores {
            id: id.to_string(),
            rouge1: rouge_n_tokens(&cand, &refs, 1),
            rouge2: rouge_n_tokens(&cand, &refs, 2),
            rouge_l: rouge_l_tokens(&cand, &refs),
            rejected: verdict.rejected,
            matched_pattern: verdict.matched_pattern,
        });
    }
    if scored.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = scored.len() as f64;
    let mean = |f: fn(&ItemScores) -> f64| scored.iter().map(f).sum::<f64>() / n;
    let aggregate = Aggregate {
        rouge1_f1: mean(|s| s.rouge1.f1),
        rouge2_f1: mean(|s| s.rouge2.f1),
        rouge_l_f1: mean(|s| s.rouge_l.f1),
        rejection_rate: mean(|s| if s.rejected { 1.0 } else { 0.0 }),
        count: scored.len(),
    };
    Ok(EvaluationReport {
        aggregate,
        patterns: detector.patterns().to_vec(),
        items: scored,
    })
}
