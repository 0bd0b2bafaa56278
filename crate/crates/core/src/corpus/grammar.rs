//! Template grammar turning an annotation into a report. Every observation
//! class has two phrasings; sentences follow the fixed observation order.

use rand::Rng;

use super::observations::{Annotation, ObsClass, NUM_OBSERVATIONS};

/// Report for a study with nothing mentioned.
pub const NO_ACUTE_FINDINGS: &str = "no acute findings .";

/// `PHRASES[obs]` = (positive, negative, uncertain), two phrasings each.
pub const PHRASES: [[[&str; 2]; 3]; NUM_OBSERVATIONS] = [
    [
        ["mediastinum is widened", "enlarged cardiomediastinal silhouette"],
        ["mediastinum is normal", "no mediastinal widening"],
        ["possible mediastinal widening", "mediastinum may be widened"],
    ],
    [
        ["heart is enlarged", "cardiomegaly is present"],
        ["no cardiomegaly", "heart size is normal"],
        ["possible cardiomegaly", "heart may be enlarged"],
    ],
    [
        ["lung opacity is seen", "there is airspace opacity"],
        ["no lung opacity", "lungs are without opacity"],
        ["possible lung opacity", "questionable airspace opacity"],
    ],
    [
        ["a lung nodule is seen", "there is a mass"],
        ["no lung nodule", "no pulmonary mass"],
        ["possible lung nodule", "mass cannot be excluded"],
    ],
    [
        ["pulmonary edema is present", "there is edema"],
        ["no pulmonary edema", "no edema"],
        ["possible pulmonary edema", "edema may be present"],
    ],
    [
        ["consolidation is present", "focal consolidation is seen"],
        ["no consolidation", "no focal consolidation"],
        ["possible consolidation", "consolidation cannot be excluded"],
    ],
    [
        ["findings suggest pneumonia", "there is pneumonia"],
        ["no pneumonia", "no evidence of pneumonia"],
        ["possible pneumonia", "pneumonia is not excluded"],
    ],
    [
        ["atelectasis is present", "basilar atelectasis is seen"],
        ["no atelectasis", "no basilar atelectasis"],
        ["possible atelectasis", "atelectasis may be present"],
    ],
    [
        ["pneumothorax is present", "there is a pneumothorax"],
        ["no pneumothorax", "no pneumothorax is seen"],
        ["possible pneumothorax", "small pneumothorax is questioned"],
    ],
    [
        ["pleural effusion is present", "there is pleural effusion"],
        ["no pleural effusion", "no effusion is seen"],
        ["possible pleural effusion", "effusion may be present"],
    ],
    [
        ["pleural thickening is seen", "there is pleural scarring"],
        ["no pleural thickening", "no pleural scarring"],
        ["possible pleural thickening", "pleural scarring is questioned"],
    ],
    [
        ["a rib fracture is seen", "there is a fracture"],
        ["no fracture", "no acute fracture"],
        ["possible rib fracture", "fracture cannot be excluded"],
    ],
    [
        ["support devices are present", "a catheter is in place"],
        ["no support devices", "no lines or tubes"],
        ["possible support device", "a line may be present"],
    ],
    [
        ["no acute cardiopulmonary process", "the lungs are clear"],
        ["findings are abnormal", "the study is abnormal"],
        ["possibly abnormal study", "findings may be abnormal"],
    ],
];

fn class_slot(c: ObsClass) -> Option<usize> {
    match c {
        ObsClass::Positive => Some(0),
        ObsClass::Negative => Some(1),
        ObsClass::Uncertain => Some(2),
        ObsClass::NoMention => None,
    }
}

/// Canonical (preprocessed) report: one sentence per mentioned observation,
/// each ending in a separate period token.
pub fn template<R: Rng + ?Sized>(annotation: &Annotation, rng: &mut R) -> String {
    if annotation.is_all_no_mention() {
        return NO_ACUTE_FINDINGS.to_string();
    }
    let sentences: Vec<String> = annotation
        .0
        .iter()
        .enumerate()
        .filter_map(|(obs, &c)| {
            let slot = class_slot(c)?;
            let phrasing = rng.random_range(0..2);
            Some(format!("{} .", PHRASES[obs][slot][phrasing]))
        })
        .collect();
    sentences.join(" ")
}

/// Free-text rendering of a canonical report: capitalized sentences with
/// attached periods, as a radiologist might write it.
pub fn to_raw(canonical: &str) -> String {
    canonical
        .split(" .")
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let mut c = s.chars();
            let first = c.next().map(|f| f.to_ascii_uppercase()).into_iter();
            format!("{}.", first.chain(c).collect::<String>())
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Longest possible canonical report in words (periods excluded).
pub fn max_report_words() -> usize {
    PHRASES
        .iter()
        .map(|o| o.iter().flatten().map(|p| p.split_whitespace().count()).max().unwrap_or(0))
        .sum()
}
