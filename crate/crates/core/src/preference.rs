//! Preference pairs from single-response conversations, and the DPO loss.
//!
//! A faithful response (`h = 0`) is preferred over an explicit refusal; for
//! a hallucinated one (`h = 1`) the refusal is preferred instead.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ConversationRecord, Label, PromptTemplate, TaskKind};
use crate::error::{Error, Result};

pub const DEFAULT_REJECTION_TEXT: &str =
    "I'm sorry, but I cannot provide a reliable answer to this question based on the given reference.";

pub const DEFAULT_BETA: f64 = 0.1;

/// The refusal text used as the dispreferred or preferred answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionPolicy {
    pub rejection_text: String,
    /// Optional per-task wording; falls back to `rejection_text`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_task: BTreeMap<TaskKind, String>,
}

impl RejectionPolicy {
    pub fn new(rejection_text: impl Into<String>) -> Result<Self> {
        let rejection_text = rejection_text.into();
        if rejection_text.trim().is_empty() {
            return Err(Error::InvalidConfig("rejection text is empty".into()));
        }
        Ok(RejectionPolicy {
            rejection_text,
            per_task: BTreeMap::new(),
        })
    }

    pub fn with_task_override(mut self, kind: TaskKind, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidConfig(format!("rejection text for {kind:?} is empty")));
        }
        self.per_task.insert(kind, text);
        Ok(self)
    }

    pub fn text_for(&self, kind: Option<TaskKind>) -> &str {
        kind.and_then(|k| self.per_task.get(&k))
            .map(String::as_str)
            .unwrap_or(&self.rejection_text)
    }

    /// Every distinct refusal wording in the policy.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.rejection_text.as_str()).chain(self.per_task.values().map(String::as_str))
    }
}

impl Default for RejectionPolicy {
    fn default() -> Self {
        RejectionPolicy::new(DEFAULT_REJECTION_TEXT).expect("default text is non-empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    OriginalResponseChosen,
    RejectionChosen,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub provenance: Provenance,
}

/// One pair per labeled record.
pub fn build_preference_set(
    records: &[ConversationRecord],
    template: &PromptTemplate,
    policy: &RejectionPolicy,
) -> Result<Vec<PreferencePair>> {
    records
        .iter()
        .map(|record| {
            let label = record
                .hallucination
                .ok_or_else(|| Error::UnlabeledRecord(record.id.clone()))?;
            let refusal = policy.text_for(record.task_kind);
            if record.response.trim() == refusal.trim() {
                return Err(Error::DegeneratePair(record.id.clone()));
            }
            let (chosen, rejected, provenance) = match label {
                Label::Faithful => (record.response.clone(), refusal.to_string(), Provenance::OriginalResponseChosen),
                Label::Hallucinated => (refusal.to_string(), record.response.clone(), Provenance::RejectionChosen),
            };
            Ok(PreferencePair {
                id: record.id.clone(),
                prompt: template.render(record),
                chosen,
                rejected,
                provenance,
            })
        })
        .collect()
}

/// A row of the exported DPO dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoRow {
    pub id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

impl From<&PreferencePair> for DpoRow {
    fn from(p: &PreferencePair) -> Self {
        DpoRow {
            id: p.id.clone(),
            prompt: p.prompt.clone(),
            chosen: p.chosen.clone(),
            rejected: p.rejected.clone(),
        }
    }
}

pub fn write_dpo_jsonl<W: Write>(pairs: &[PreferencePair], mut out: W) -> std::io::Result<()> {
    for pair in pairs {
        serde_json::to_writer(&mut out, &DpoRow::from(pair))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn export_dpo_dataset(pairs: &[PreferencePair], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let write = || -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_dpo_jsonl(pairs, &mut out)?;
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn read_dpo_jsonl<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<DpoRow>> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source_name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            source_name: source_name.to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(rows)
}

/// Sequence log-probabilities of the chosen and rejected answers under the
/// trained policy and the frozen reference policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoLossInputs {
    pub logp_theta_w: f64,
    pub logp_o_w: f64,
    pub logp_theta_l: f64,
    pub logp_o_l: f64,
    pub beta: f64,
}

impl DpoLossInputs {
    fn validate(&self) -> Result<()> {
        let named = [
            ("logp_theta_w", self.logp_theta_w),
            ("logp_o_w", self.logp_o_w),
            ("logp_theta_l", self.logp_theta_l),
            ("logp_o_l", self.logp_o_l),
        ];
        for (name, v) in named {
            if !v.is_finite() {
                return Err(Error::NonFiniteInput(format!("{name} = {v}")));
            }
            if v > 0.0 {
                return Err(Error::InvalidConfig(format!("{name} = {v} is not a log-probability")));
            }
        }
        if !self.beta.is_finite() {
            return Err(Error::NonFiniteInput(format!("beta = {}", self.beta)));
        }
        if self.beta <= 0.0 {
            return Err(Error::InvalidConfig(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    /// Chosen log-ratio minus rejected log-ratio.
    pub fn margin(&self) -> f64 {
        (self.logp_theta_w - self.logp_o_w) - (self.logp_theta_l - self.logp_o_l)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−ln σ(β·margin)`.
pub fn dpo_loss_from_margin(beta: f64, margin: f64) -> f64 {
    softplus(-beta * margin)
}

/// Derivative of [`dpo_loss_from_margin`] in `margin`: `−β·σ(−β·margin)`.
pub fn dpo_loss_grad_margin(beta: f64, margin: f64) -> f64 {
    -beta * sigmoid(-beta * margin)
}

pub fn dpo_loss(inputs: &DpoLossInputs) -> Result<f64> {
    inputs.validate()?;
    let margin = inputs.margin();
    if !margin.is_finite() {
        return Err(Error::NonFiniteInput(format!("margin = {margin}")));
    }
    Ok(dpo_loss_from_margin(inputs.beta, margin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, response: &str, label: Option<Label>) -> ConversationRecord {
        let mut r = ConversationRecord::new(id, "q?", "ref", response);
        r.hallucination = label;
        r
    }

    #[test]
    fn faithful_keeps_response() {
        let policy = RejectionPolicy::default();
        let pairs = build_preference_set(
            &[rec("a", "Paris.", Some(Label::Faithful))],
            &PromptTemplate::default(),
            &policy,
        )
        .unwrap();
        assert_eq!(pairs[0].chosen, "Paris.");
        assert_eq!(pairs[0].rejected, policy.rejection_text);
        assert_eq!(pairs[0].provenance, Provenance::OriginalResponseChosen);
    }

    #[test]
    fn hallucinated_prefers_refusal() {
        let policy = RejectionPolicy::default();
        let pairs = build_preference_set(
            &[rec("a", "The moon is cheese.", Some(Label::Hallucinated))],
            &PromptTemplate::default(),
            &policy,
        )
        .unwrap();
        assert_eq!(pairs[0].chosen, policy.rejection_text);
        assert_eq!(pairs[0].rejected, "The moon is cheese.");
        assert_eq!(pairs[0].provenance, Provenance::RejectionChosen);
    }

    #[test]
    fn unlabeled_and_degenerate() {
        let policy = RejectionPolicy::default();
        let t = PromptTemplate::default();
        assert!(matches!(
            build_preference_set(&[rec("u", "x", None)], &t, &policy),
            Err(Error::UnlabeledRecord(id)) if id == "u"
        ));
        assert!(matches!(
            build_preference_set(&[rec("d", DEFAULT_REJECTION_TEXT, Some(Label::Faithful))], &t, &policy),
            Err(Error::DegeneratePair(id)) if id == "d"
        ));
    }

    #[test]
    fn task_override_applies() {
        let policy = RejectionPolicy::default()
            .with_task_override(TaskKind::Summary, "Cannot summarize reliably.")
            .unwrap();
        let mut r = rec("s", "A summary.", Some(Label::Hallucinated));
        r.task_kind = Some(TaskKind::Summary);
        let pairs = build_preference_set(&[r], &PromptTemplate::default(), &policy).unwrap();
        assert_eq!(pairs[0].chosen, "Cannot summarize reliably.");
    }

    #[test]
    fn export_is_one_line_per_pair() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dpo.jsonl");
        let pairs: Vec<PreferencePair> = (0..10)
            .map(|i| PreferencePair {
                id: format!("p{i}"),
                prompt: format!("line one\nline two {i}"),
                chosen: "yes\n\"quoted\"".into(),
                rejected: "no".into(),
                provenance: Provenance::OriginalResponseChosen,
            })
            .collect();
        export_dpo_dataset(&pairs, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 10);
        let rows = read_dpo_jsonl(text.as_bytes(), "dpo").unwrap();
        let expected: Vec<DpoRow> = pairs.iter().map(DpoRow::from).collect();
        assert_eq!(rows, expected);
        assert!(matches!(export_dpo_dataset(&[], &path), Err(Error::EmptyInput)));
    }

    fn inputs(beta: f64, ratio_w: f64, ratio_l: f64) -> DpoLossInputs {
        DpoLossInputs {
            logp_theta_w: -10.0 + ratio_w,
            logp_o_w: -10.0,
            logp_theta_l: -10.0 + ratio_l,
            logp_o_l: -10.0,
            beta,
        }
    }

    #[test]
    fn zero_margin_is_ln2() {
        let loss = dpo_loss(&inputs(0.1, 0.0, 0.0)).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn reference_value() {
        // −ln σ(0.2), evaluated at 50 digits: 0.59813886938159184...
        let loss = dpo_loss(&inputs(0.1, 1.0, -1.0)).unwrap();
        assert!((loss - 0.598_138_869_381_591_8).abs() < 1e-6);
    }

    #[test]
    fn limits() {
        assert!(dpo_loss_from_margin(1.0, 800.0) < 1e-300);
        let big = dpo_loss_from_margin(1.0, -800.0);
        assert!(big.is_finite() && (big - 800.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut i = inputs(0.1, 0.0, 0.0);
        i.logp_o_l = f64::NAN;
        assert!(matches!(dpo_loss(&i), Err(Error::NonFiniteInput(_))));
        let mut i = inputs(0.1, 0.0, 0.0);
        i.beta = 0.0;
        assert!(dpo_loss(&i).is_err());
        let mut i = inputs(0.1, 0.0, 0.0);
        i.logp_theta_w = 0.5;
        assert!(dpo_loss(&i).is_err());
    }

    proptest! {
        #[test]
        fn label_rule_table(response in "[a-zA-Z .]{1,40}", hallucinated in any::<bool>()) {
            prop_assume!(response.trim() != DEFAULT_REJECTION_TEXT && !response.trim().is_empty());
            let label = if hallucinated { Label::Hallucinated } else { Label::Faithful };
            let policy = RejectionPolicy::default();
            let pairs = build_preference_set(&[rec("x", &response, Some(label))], &PromptTemplate::default(), &policy).unwrap();
            let p = &pairs[0];
            prop_assert_ne!(&p.chosen, &p.rejected);
            if hallucinated {
                prop_assert_eq!(&p.chosen, &policy.rejection_text);
                prop_assert_eq!(&p.rejected, &response);
            } else {
                prop_assert_eq!(&p.chosen, &response);
                prop_assert_eq!(&p.rejected, &policy.rejection_text);
            }
        }

        #[test]
        fn loss_of_swapped_pair(beta in 0.01f64..2.0, m in -50.0f64..50.0) {
            let sum = dpo_loss_from_margin(beta, m) + dpo_loss_from_margin(beta, -m);
            prop_assert!(sum >= 2.0 * std::f64::consts::LN_2 - 1e-12);
        }
    }
}
