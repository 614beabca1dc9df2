//! Desirable/undesirable labels for adversarial tests and the unpaired
//! preference dataset built from them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::jsonl;
use crate::model::AdversarialTest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    /// Some candidates pass and some fail: the test discriminates.
    Desirable,
    /// Every candidate passes.
    Undesirable,
    /// Every candidate fails; treated as an invalid input.
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestLabel {
    pub test_id: String,
    pub fails: usize,
    pub passes: usize,
    pub label: Label,
}

/// Labels each column of a rows × tests boolean table.
pub fn label_columns(adv: &[Vec<bool>], test_ids: &[String]) -> Vec<TestLabel> {
    let k1 = adv.len();
    test_ids
        .iter()
        .enumerate()
        .map(|(j, id)| {
            let passes = adv.iter().filter(|row| row[j]).count();
            let fails = k1 - passes;
            let label = match (fails, passes) {
                (0, _) => Label::Undesirable,
                (_, 0) => Label::Discarded,
                _ => Label::Desirable,
            };
            TestLabel {
                test_id: id.clone(),
                fails,
                passes,
                label,
            }
        })
        .collect()
}

/// [`label_columns`] with positional ids, for bare tables.
pub fn label_tests(adv: &[Vec<bool>]) -> Vec<TestLabel> {
    let n = adv.first().map_or(0, Vec::len);
    let ids: Vec<String> = (0..n).map(|j| format!("adv{j:02}")).collect();
    label_columns(adv, &ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KtoRecord {
    pub prompt: String,
    pub completion: String,
    pub label: bool,
    pub token_length: u64,
    pub problem_id: String,
    pub round: u32,
    pub test_id: String,
    /// Filled in by an external scorer for objective diagnostics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logp_policy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logp_ref: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KtoSummary {
    pub desirable: usize,
    pub undesirable: usize,
    pub discarded: usize,
    /// desirable / undesirable, when there is at least one undesirable record.
    pub ratio: Option<f64>,
}

impl KtoSummary {
    pub fn from_labels(labels: &[TestLabel]) -> Self {
        let count = |l| labels.iter().filter(|t| t.label == l).count();
        let (desirable, undesirable) = (count(Label::Desirable), count(Label::Undesirable));
        KtoSummary {
            desirable,
            undesirable,
            discarded: count(Label::Discarded),
            ratio: (undesirable > 0).then(|| desirable as f64 / undesirable as f64),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PreferenceError {
    #[error("label refers to unknown test `{0}`")]
    UnknownTest(String),
    #[error(transparent)]
    Io(#[from] jsonl::JsonlError),
}

/// Builds records for every non-discarded label, in label order.
pub fn kto_records(
    labels: &[TestLabel],
    tests: &[AdversarialTest],
    prompt: &str,
) -> Result<Vec<KtoRecord>, PreferenceError> {
    labels
        .iter()
        .filter(|l| l.label != Label::Discarded)
        .map(|l| {
            let t = tests
                .iter()
                .find(|t| t.id() == l.test_id)
                .ok_or_else(|| PreferenceError::UnknownTest(l.test_id.clone()))?;
            Ok(KtoRecord {
                prompt: prompt.to_string(),
                completion: t.raw_response.clone(),
                label: l.label == Label::Desirable,
                token_length: t.token_length,
                problem_id: t.problem_id.clone(),
                round: t.round,
                test_id: l.test_id.clone(),
                logp_policy: None,
                logp_ref: None,
            })
        })
        .collect()
}

/// Orders `adv9` before `adv10`.
fn id_key(id: &str) -> (&str, u64, &str) {
    let split = id.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    (&id[..split], id[split..].parse().unwrap_or(0), id)
}

/// Writes records grouped by problem. Class imbalance is reported, never
/// corrected.
pub fn emit_kto_dataset(records: &[KtoRecord], path: &Path) -> Result<KtoSummary, PreferenceError> {
    let mut sorted: Vec<&KtoRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.problem_id
            .cmp(&b.problem_id)
            .then(id_key(&a.test_id).cmp(&id_key(&b.test_id)))
    });
    jsonl::write(path, &sorted)?;
    let desirable = records.iter().filter(|r| r.label).count();
    let undesirable = records.len() - desirable;
    let summary = KtoSummary {
        desirable,
        undesirable,
        discarded: 0,
        ratio: (undesirable > 0).then(|| desirable as f64 / undesirable as f64),
    };
    if records.is_empty() {
        tracing::warn!(path = %path.display(), "preference dataset is empty");
    }
    Ok(summary)
}
