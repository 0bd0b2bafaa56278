//! Clinical efficacy: a rule labeler inverting the report grammar, the
//! binarization rule, and example- and label-based precision/recall/F1.

use std::collections::HashMap;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::corpus::grammar::{NO_ACUTE_FINDINGS, PHRASES};
use crate::corpus::observations::{Annotation, BinaryObservations, ObsClass, NUM_OBSERVATIONS, OBSERVATIONS};
use crate::corpus::text::sentences;

const CLASSES: [ObsClass; 3] = [ObsClass::Positive, ObsClass::Negative, ObsClass::Uncertain];

/// Exact sentence → (observation, class). `None` marks the empty-study sentence.
static SENTENCE_TABLE: LazyLock<HashMap<&'static str, Option<(usize, ObsClass)>>> = LazyLock::new(|| {
    let mut m = HashMap::new();
    for (obs, classes) in PHRASES.iter().enumerate() {
        for (slot, phrasings) in classes.iter().enumerate() {
            for p in phrasings {
                m.insert(*p, Some((obs, CLASSES[slot])));
            }
        }
    }
    m.insert(NO_ACUTE_FINDINGS.trim_end_matches(" ."), None);
    m
});

/// Fallback keywords per observation, for sentences outside the grammar.
const KEYWORDS: [&[&str]; NUM_OBSERVATIONS] = [
    &["mediastinum", "mediastinal", "cardiomediastinal"],
    &["cardiomegaly", "heart"],
    &["opacity", "opacities"],
    &["nodule", "mass", "lesion"],
    &["edema"],
    &["consolidation"],
    &["pneumonia"],
    &["atelectasis"],
    &["pneumothorax"],
    &["effusion", "effusions"],
    &["thickening", "scarring"],
    &["fracture", "fractures"],
    &["catheter", "device", "devices", "line", "lines", "tube", "tubes"],
    &[],
];

const NEGATION_CUES: [&str; 2] = ["no", "without"];
const UNCERTAINTY_CUES: [&str; 7] = ["possible", "possibly", "may", "questionable", "questioned", "cannot", "suspected"];

fn rank(c: ObsClass) -> u8 {
    match c {
        ObsClass::NoMention => 0,
        ObsClass::Negative => 1,
        ObsClass::Uncertain => 2,
        ObsClass::Positive => 3,
    }
}

fn merge(slot: &mut ObsClass, c: ObsClass) {
    if rank(c) > rank(*slot) {
        *slot = c;
    }
}

/// Classes of the 14 observations in a preprocessed report.
///
/// Sentences that are grammar phrasings map through an exact table. Other
/// sentences fall back to keywords: a sentence mentioning an observation's
/// keyword is negative if it contains "no"/"without", else uncertain if it
/// contains an uncertainty cue, else positive. When an observation is
/// mentioned more than once, positive beats uncertain beats negative.
pub fn extract_observations(report: &str) -> Annotation {
    let mut a = Annotation::default();
    for s in sentences(report) {
        if let Some(hit) = SENTENCE_TABLE.get(s.as_str()) {
            if let Some((obs, class)) = hit {
                merge(&mut a.0[*obs], *class);
            }
            continue;
        }
        let words: Vec<&str> = s.split_whitespace().collect();
        let class = if words.iter().any(|w| NEGATION_CUES.contains(w)) {
            ObsClass::Negative
        } else if words.iter().any(|w| UNCERTAINTY_CUES.contains(w)) {
            ObsClass::Uncertain
        } else {
            ObsClass::Positive
        };
        for (obs, keys) in KEYWORDS.iter().enumerate() {
            if words.iter().any(|w| keys.contains(w)) {
                merge(&mut a.0[obs], class);
            }
        }
    }
    a
}

pub fn binarize(a: &Annotation) -> BinaryObservations {
    a.binarize()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Mean over examples of per-example set precision, recall and F1. A ratio
/// with an empty denominator is 1 when both sets are empty and 0 otherwise.
pub fn example_based_prf(gen: &[BinaryObservations], gt: &[BinaryObservations]) -> Result<Prf, String> {
    if gen.len() != gt.len() {
        return Err(format!("{} generated label sets for {} ground-truth sets", gen.len(), gt.len()));
    }
    if gen.is_empty() {
        return Err("no examples".into());
    }
    let mut sum = Prf::default();
    for (g, t) in gen.iter().zip(gt) {
        let ng = g.iter().filter(|x| **x).count();
        let nt = t.iter().filter(|x| **x).count();
        let both = g.iter().zip(t).filter(|(a, b)| **a && **b).count();
        let ratio = |num: usize, den: usize| {
            if den > 0 {
                num as f64 / den as f64
            } else if ng == 0 && nt == 0 {
                1.0
            } else {
                0.0
            }
        };
        let p = ratio(both, ng);
        let r = ratio(both, nt);
        sum.precision += p;
        sum.recall += r;
        sum.f1 += harmonic(p, r);
    }
    let n = gen.len() as f64;
    Ok(Prf {
        precision: sum.precision / n,
        recall: sum.recall / n,
        f1: sum.f1 / n,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    /// `None` when the denominator is zero.
    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// 2TP / (2TP + FP + FN).
    pub fn f1(&self) -> Option<f64> {
        let d = 2 * self.tp + self.fp + self.fn_;
        (d > 0).then(|| 2.0 * self.tp as f64 / d as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub observation: String,
    pub counts: Counts,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Averaged {
    pub value: f64,
    /// Labels whose value was defined and entered the average.
    pub labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelBased {
    pub per_label: Vec<LabelScore>,
    pub macro_precision: Option<Averaged>,
    pub macro_recall: Option<Averaged>,
    pub macro_f1: Option<Averaged>,
    pub micro: Counts,
    pub micro_precision: Option<f64>,
    pub micro_recall: Option<f64>,
    pub micro_f1: Option<f64>,
}

fn macro_avg(xs: impl Iterator<Item = Option<f64>>) -> Option<Averaged> {
    let defined: Vec<f64> = xs.flatten().collect();
    (!defined.is_empty()).then(|| Averaged {
        value: defined.iter().sum::<f64>() / defined.len() as f64,
        labels: defined.len(),
    })
}

/// Per-observation counts across examples, macro averages over labels with
/// defined values, and micro scores from pooled counts.
pub fn label_based_prf(gen: &[BinaryObservations], gt: &[BinaryObservations]) -> Result<LabelBased, String> {
    if gen.len() != gt.len() {
        return Err(format!("{} generated label sets for {} ground-truth sets", gen.len(), gt.len()));
    }
    let mut counts = [Counts::default(); NUM_OBSERVATIONS];
    for (g, t) in gen.iter().zip(gt) {
        for (k, c) in counts.iter_mut().enumerate() {
            match (g[k], t[k]) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let per_label: Vec<LabelScore> = counts
        .iter()
        .zip(OBSERVATIONS)
        .map(|(c, name)| LabelScore {
            observation: name.to_string(),
            counts: *c,
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
        })
        .collect();
    let micro = counts.iter().fold(Counts::default(), |a, c| Counts {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
    });
    Ok(LabelBased {
        macro_precision: macro_avg(per_label.iter().map(|l| l.precision)),
        macro_recall: macro_avg(per_label.iter().map(|l| l.recall)),
        macro_f1: macro_avg(per_label.iter().map(|l| l.f1)),
        micro_precision: micro.precision(),
        micro_recall: micro.recall(),
        micro_f1: micro.f1(),
        micro,
        per_label,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeScores {
    pub example_based: Prf,
    pub label_based: LabelBased,
}

/// Labels both report lists and scores the generated ones against the
/// ground truth.
pub fn score_reports(generated: &[String], ground_truth: &[String]) -> Result<CeScores, String> {
    let gen: Vec<_> = generated.iter().map(|r| extract_observations(r).binarize()).collect();
    let gt: Vec<_> = ground_truth.iter().map(|r| extract_observations(r).binarize()).collect();
    Ok(CeScores {
        example_based: example_based_prf(&gen, &gt)?,
        label_based: label_based_prf(&gen, &gt)?,
    })
}
