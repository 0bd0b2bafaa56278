//! Report quality metrics: word-overlap (NLG) and clinical efficacy (CE).

pub mod ce;
pub mod nlg;
pub mod report;
