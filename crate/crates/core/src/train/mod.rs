//! Pretraining, fine-tuning with early stopping, checkpoints and the
//! warm-start experiment drivers.

pub mod checkpoint;
pub mod data;
pub mod experiment;
pub mod finetune;
pub mod optim;
pub mod pretrain;
mod trainer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ModelError;
use checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
}

pub type TrainResult<T> = Result<T, TrainError>;

/// Name of the metric early stopping and checkpoint selection watch.
pub const MONITOR: &str = "val_cider";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_encoder: f64,
    pub lr_other: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub max_epochs: usize,
    pub weight_decay: f64,
    pub val_beam: usize,
    pub test_beam: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_encoder: 1e-5,
            lr_other: 1e-4,
            batch_size: 16,
            patience: 10,
            min_delta: 1e-4,
            max_epochs: 40,
            weight_decay: 0.01,
            val_beam: 1,
            test_beam: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TrainResult<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr_encoder > 0.0 && self.lr_other > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and max epochs must be positive");
        }
        if self.val_beam == 0 || self.test_beam == 0 {
            return bad("beam widths must be positive");
        }
        if self.min_delta < 0.0 || self.weight_decay < 0.0 {
            return bad("min_delta and weight decay must be non-negative");
        }
        Ok(())
    }
}
