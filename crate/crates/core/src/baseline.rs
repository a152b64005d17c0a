//! The answer-probability baseline.
//!
//! A sample is judged correct when its answer log-probability (per token
//! for long-answer datasets) reaches a threshold fitted on a calibration
//! split.

use crate::error::{Error, Result};
use crate::store::{ActivationRecord, DatasetEntry, Group, Manifest, Regime, SplitView};

pub fn score_sample(record: &ActivationRecord, normalized: bool) -> Result<f64> {
    if record.answer_token_count == 0 {
        return Err(Error::MissingLogprob(record.sample_id));
    }
    Ok(if normalized {
        record.answer_logprob_sum / f64::from(record.answer_token_count)
    } else {
        record.answer_logprob_sum
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbBaselineModel {
    /// May be ±∞ when no finite cut beats labelling everything alike.
    pub threshold: f64,
    pub normalized: bool,
    pub calibration_source: String,
    pub calibration_accuracy: f64,
}

impl ProbBaselineModel {
    pub fn classify(&self, score: f64) -> u8 {
        u8::from(score >= self.threshold)
    }
}

/// Threshold among `{−∞, midpoints of adjacent distinct scores, +∞}`
/// maximizing accuracy of `score ≥ τ`; ties go to the smaller `τ`.
/// Returns `(τ, accuracy)`.
pub fn fit_threshold(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::DimMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::SingleClassInput(None));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFiniteFeature { row: i, col: 0 });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // τ = −∞ predicts every sample correct.
    let mut correct = positives as i64;
    let mut best = (f64::NEG_INFINITY, correct);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut j = i;
        while j < order.len() && scores[order[j]] == s {
            // this sample now falls below τ
            correct += if labels[order[j]] == 0 { 1 } else { -1 };
            j += 1;
        }
        let tau = match order.get(j) {
            Some(&next) => s + (scores[next] - s) / 2.0,
            None => f64::INFINITY,
        };
        if correct > best.1 {
            best = (tau, correct);
        }
        i = j;
    }
    Ok((best.0, best.1 as f64 / scores.len() as f64))
}

/// Fits τ on every record of a calibration split.
pub fn fit_baseline(view: &SplitView, dataset: &DatasetEntry) -> Result<ProbBaselineModel> {
    let normalized = dataset.long_answer;
    let scores = view
        .records
        .iter()
        .map(|r| score_sample(r, normalized))
        .collect::<Result<Vec<_>>>()?;
    let (threshold, calibration_accuracy) =
        fit_threshold(&scores, &view.labels()).map_err(|e| Error::in_dataset(&dataset.name, e))?;
    Ok(ProbBaselineModel {
        threshold,
        normalized,
        calibration_source: dataset.name.clone(),
        calibration_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineEval {
    pub accuracy: f64,
    pub scored: usize,
    pub skipped: usize,
}

/// Plain accuracy of the threshold rule; records without log-probabilities
/// are skipped and counted.
pub fn eval_baseline(model: &ProbBaselineModel, view: &SplitView) -> Result<BaselineEval> {
    let mut correct = 0usize;
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for r in &view.records {
        match score_sample(r, model.normalized) {
            Ok(s) => {
                scored += 1;
                if model.classify(s) == r.label {
                    correct += 1;
                }
            }
            Err(_) => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} records without answer log-probabilities were skipped");
    }
    if scored == 0 {
        return Err(Error::EmptyView);
    }
    Ok(BaselineEval {
        accuracy: correct as f64 / scored as f64,
        scored,
        skipped,
    })
}

// Calibration datasets used for the reference benchmark: cross-task sources
// per test task, and same-task siblings per test dataset.
const CROSS_TASK_SOURCES: &[(&str, &str)] = &[
    ("shortanswerclosebookqa", "hotpotqa"),
    ("closebookqa", "hotpotqa"),
    ("summarization", "webnlg"),
    ("sentencecompletion", "arceasy"),
];
const CROSS_DOMAIN_SOURCES: &[(&str, &str)] = &[
    ("nq", "triviaqa"),
    ("naturalquestions", "triviaqa"),
    ("sciq", "triviaqa"),
    ("triviaqa", "sciq"),
    ("xsum", "cnndm"),
    ("cnndm", "xsum"),
    ("cnndailymail", "xsum"),
    ("storycloze", "copa"),
    ("hellaswag", "copa"),
    ("copa", "storycloze"),
];

fn squash(name: &str) -> String {
    name.chars()
        .filter(char::is_ascii_alphanumeric)
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

fn find_squashed<'a>(manifest: &'a Manifest, want: &str) -> Option<&'a DatasetEntry> {
    manifest.datasets.iter().find(|d| squash(&d.name) == want)
}

/// Dataset whose training split calibrates τ for `test_dataset` under `regime`.
pub fn default_calibration_source<'a>(
    manifest: &'a Manifest,
    regime: Regime,
    test_dataset: &str,
) -> Result<&'a DatasetEntry> {
    let target = manifest.dataset(test_dataset)?;
    let found = match regime {
        Regime::InDomain => Some(target),
        Regime::CrossTask => {
            let task = squash(&target.task);
            CROSS_TASK_SOURCES
                .iter()
                .find(|(t, _)| *t == task)
                .and_then(|(_, src)| find_squashed(manifest, src))
                .filter(|d| d.task != target.task)
                .or_else(|| {
                    manifest
                        .datasets
                        .iter()
                        .find(|d| d.group == Group::TrainTask)
                })
        }
        Regime::CrossDomain => {
            let name = squash(&target.name);
            CROSS_DOMAIN_SOURCES
                .iter()
                .find(|(n, _)| *n == name)
                .and_then(|(_, src)| find_squashed(manifest, src))
                .filter(|d| d.task == target.task && d.id != target.id)
                .or_else(|| {
                    manifest
                        .datasets
                        .iter()
                        .find(|d| d.task == target.task && d.id != target.id)
                })
        }
    };
    found.ok_or_else(|| {
        Error::InvalidConfig(format!(
            "no {regime} calibration dataset available for {test_dataset}"
        ))
    })
}
