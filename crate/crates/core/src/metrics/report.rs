//! Per-example scoring of a generated corpus with bootstrap intervals.

use serde::{Deserialize, Serialize};

use super::ce::{binarize, example_based_prf, extract_observations, score_reports, CeScores};
use super::nlg::{bleu, cider, meteor, rouge_l, score_corpus, tokens, NlgScores};
use crate::stats::{bootstrap_ci, ConfidenceInterval, BOOTSTRAP_LEVEL, BOOTSTRAP_RESAMPLES};

/// Names of the per-example scores, in report order.
pub const SCORE_NAMES: [&str; 10] = [
    "bleu1",
    "bleu2",
    "bleu3",
    "bleu4",
    "meteor",
    "rouge_l",
    "cider",
    "ce_precision",
    "ce_recall",
    "ce_f1",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub id: String,
    /// Values aligned with [`SCORE_NAMES`].
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub ci: ConfidenceInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_example: Vec<ExampleScores>,
    /// Mean and percentile bootstrap interval of each per-example score.
    pub summary: Vec<MetricSummary>,
    /// Corpus-level NLG scores (BLEU pooled over the corpus).
    pub corpus: NlgScores,
    pub ce: CeScores,
}

impl Evaluation {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = SCORE_NAMES.iter().position(|n| *n == name)?;
        Some(self.per_example.iter().map(|e| e.scores[k]).collect())
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.name == name).map(|s| s.ci.mean)
    }
}

pub fn evaluate(ids: &[String], hyps: &[String], refs: &[String], seed: u64) -> Result<Evaluation, String> {
    if ids.len() != hyps.len() || hyps.len() != refs.len() {
        return Err(format!("{} ids, {} hypotheses, {} references", ids.len(), hyps.len(), refs.len()));
    }
    if hyps.is_empty() {
        return Err("nothing to evaluate".into());
    }
    let h: Vec<Vec<&str>> = hyps.iter().map(|s| tokens(s)).collect();
    let r: Vec<Vec<&str>> = refs.iter().map(|s| tokens(s)).collect();
    let ciders = cider(&h, &r)?;
    let mut per_example = Vec::with_capacity(hyps.len());
    for i in 0..hyps.len() {
        let gen = binarize(&extract_observations(&hyps[i]));
        let gt = binarize(&extract_observations(&refs[i]));
        let ce = example_based_prf(&[gen], &[gt])?;
        let mut scores: Vec<f64> = (1..=4).map(|n| bleu(&h[i], &r[i], n)).collect();
        scores.extend([meteor(&h[i], &r[i]), rouge_l(&h[i], &r[i]), ciders[i], ce.precision, ce.recall, ce.f1]);
        per_example.push(ExampleScores {
            id: ids[i].clone(),
            scores,
        });
    }
    let mut summary = Vec::with_capacity(SCORE_NAMES.len());
    for (k, name) in SCORE_NAMES.iter().enumerate() {
        let col: Vec<f64> = per_example.iter().map(|e| e.scores[k]).collect();
        let ci = bootstrap_ci(&col, BOOTSTRAP_RESAMPLES, BOOTSTRAP_LEVEL, seed).map_err(|e| e.to_string())?;
        summary.push(MetricSummary {
            name: name.to_string(),
            ci,
        });
    }
    Ok(Evaluation {
        per_example,
        summary,
        corpus: score_corpus(hyps, refs)?,
        ce: score_reports(hyps, refs)?,
    })
}
