//! Encoder-to-decoder chest X-ray report generation, at desk scale.

pub mod captioner;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod decoding;
pub mod encoder;
pub mod metrics;
pub mod error;
pub mod nn;
pub mod stats;
pub mod tensor;
pub mod train;
