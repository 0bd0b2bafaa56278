use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta, PretrainTask};
use super::data::{epoch_order, mix, Dataset};
use super::optim::{AdamW, AdamWConfig};
use super::trainer::{rates_by_group, train_epoch};
use super::{TrainConfig, TrainError, TrainResult};
use crate::captioner::Captioner;
use crate::config::CaptionerConfig;
use crate::corpus::image::PreprocessConfig;
use crate::corpus::vocab::Vocabulary;
use crate::decoder::is_cross_attention_param;
use crate::decoding::SearchMode;
use crate::error::ModelResult;
use crate::metrics::nlg::{cider, tokens};
use crate::tensor::{Graph, ParamStore, Var};

/// Optional pretrained checkpoints for the two halves of the captioner.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub encoder: Option<Checkpoint>,
    pub decoder: Option<Checkpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_cider: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Waiting,
    Stop,
}

/// Stops once `patience` epochs pass without the monitored value beating
/// the best so far by more than `min_delta`.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, value: f64) -> StopDecision {
        match self.best {
            Some(b) if value <= b + self.min_delta => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Waiting
                }
            }
            _ => {
                self.best = Some(value);
                self.best_epoch = epoch;
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best.map(|b| (self.best_epoch, b))
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_val_cider: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Builds a captioner from the run seed, then overwrites whatever the
/// checkpoints provide. Cross-attention and the projection always keep
/// their fresh initialization.
pub fn build_model(cfg: &CaptionerConfig, warm: &WarmStart, seed: u64) -> TrainResult<(ParamStore, Captioner)> {
    let mut store = ParamStore::new();
    let model = Captioner::new(&mut store, cfg, seed)?;
    if let Some(ck) = &warm.encoder {
        if let Some(bad) = ck.names().find(|n| !n.starts_with("encoder.")) {
            return Err(TrainError::Config(format!("encoder checkpoint holds non-encoder parameter {bad}")));
        }
        ck.apply(&mut store, &cfg.encoder.fingerprint())?;
    }
    if let Some(ck) = &warm.decoder {
        if let Some(bad) = ck.names().find(|n| !n.starts_with("decoder.") || is_cross_attention_param(n)) {
            return Err(TrainError::Config(format!("decoder checkpoint holds {bad}")));
        }
        ck.apply(&mut store, &cfg.decoder.fingerprint())?;
    }
    Ok((store, model))
}

/// Restores a fine-tuned captioner from its checkpoint.
pub fn load_model(cfg: &CaptionerConfig, ck: &Checkpoint) -> TrainResult<(ParamStore, Captioner)> {
    let mut store = ParamStore::new();
    let model = Captioner::new(&mut store, cfg, ck.meta.seed)?;
    ck.apply(&mut store, &cfg.fingerprint())?;
    let missing: Vec<&str> = store.iter().map(|(_, n, _)| n).filter(|n| ck.entry(n).is_none()).collect();
    if !missing.is_empty() {
        return Err(TrainError::Config(format!("checkpoint lacks [{}]", missing.join(", "))));
    }
    Ok((store, model))
}

/// Decodes every example of `data` and returns the report texts.
pub fn decode_split(
    model: &Captioner,
    store: &ParamStore,
    data: &Dataset,
    pre: &PreprocessConfig,
    vocab: &Vocabulary,
    mode: SearchMode,
) -> TrainResult<Vec<String>> {
    let max_len = model.config().decoder.max_gen_len;
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let images = data.eval_images(i, pre);
            let out = model.generate(store, &data.examples[i].id, &images, mode, max_len)?;
            vocab
                .detokenize(out.tokens())
                .map_err(|e| TrainError::Data(e.to_string()))
        })
        .collect()
}

/// Mean CIDEr of `hyps` against the reports of `data`, with IDF taken over
/// those reports.
pub fn mean_cider(hyps: &[String], data: &Dataset) -> TrainResult<f64> {
    let refs = data.reports();
    let h: Vec<Vec<&str>> = hyps.iter().map(|s| tokens(s)).collect();
    let r: Vec<Vec<&str>> = refs.iter().map(|s| tokens(s)).collect();
    let scores = cider(&h, &r).map_err(TrainError::Data)?;
    Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
}

/// Teacher-forced fine-tuning with validation-CIDEr early stopping. Returns
/// the checkpoint of the best validation epoch.
pub fn finetune(
    cfg: &CaptionerConfig,
    warm: &WarmStart,
    train: &Dataset,
    val: &Dataset,
    pre: &PreprocessConfig,
    vocab: &Vocabulary,
    tc: &TrainConfig,
) -> TrainResult<FinetuneOutcome> {
    tc.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Data("fine-tuning needs non-empty train and validation splits".into()));
    }
    let (mut store, model) = build_model(cfg, warm, tc.seed)?;
    let rates = rates_by_group(&store, tc.lr_encoder, tc.lr_other);
    let mut adam = AdamW::new(AdamWConfig {
        weight_decay: tc.weight_decay,
        ..AdamWConfig::default()
    });
    let mut stopper = EarlyStopping::new(tc.patience, tc.min_delta);
    let mut history = Vec::new();
    let mut best = None;
    let mut stopped_early = false;
    let start = Instant::now();
    let val_mode = SearchMode::Beam(tc.val_beam);
    for epoch in 1..=tc.max_epochs {
        let order = epoch_order(train.len(), tc.seed, epoch);
        let epoch_seed = mix(tc.seed, epoch as u64);
        let loss = |g: &Graph, i: usize| -> ModelResult<Option<Var>> {
            let images = train.train_images(i, pre, mix(epoch_seed, i as u64));
            Ok(Some(model.loss(g, &images, &train.examples[i].tokens)?))
        };
        let train_loss = train_epoch(&mut store, &mut adam, &order, tc.batch_size, &rates, epoch_seed, &loss)?
            .unwrap_or(0.0);
        let hyps = decode_split(&model, &store, val, pre, vocab, val_mode)?;
        let val_cider = mean_cider(&hyps, val)?;
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_cider,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        log::info!("fine-tuning seed {} {rec:?}", tc.seed);
        history.push(rec);
        let decision = stopper.update(epoch, val_cider);
        if decision == StopDecision::Improved {
            let meta = CheckpointMeta {
                task: PretrainTask::None,
                epoch: epoch as u32,
                val_cider: Some(val_cider),
                seed: tc.seed,
            };
            best = Some(Checkpoint::capture(&store, &cfg.fingerprint(), meta, |_| true));
        }
        if decision == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }
    let best = best.ok_or_else(|| TrainError::Config("no epochs were run".into()))?;
    let (best_epoch, best_val_cider) = stopper.best().expect("at least one epoch");
    Ok(FinetuneOutcome {
        best,
        best_epoch,
        best_val_cider,
        history,
        stopped_early,
    })
}
