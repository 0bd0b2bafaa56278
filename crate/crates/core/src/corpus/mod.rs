//! Synthetic studies, preprocessing and tokenization.

pub mod grammar;
pub mod image;
pub mod observations;
pub mod synth;
pub mod text;
pub mod vocab;
