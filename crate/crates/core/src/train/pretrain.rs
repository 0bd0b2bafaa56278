use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta, PretrainTask};
use super::data::{epoch_order, mix, Dataset};
use super::optim::{AdamW, AdamWConfig};
use super::trainer::{rates_by_group, train_epoch};
use super::{TrainError, TrainResult};
use crate::captioner::Captioner;
use crate::config::{DecoderConfig, EncoderConfig};
use crate::corpus::image::PreprocessConfig;
use crate::corpus::observations::NUM_OBSERVATIONS;
use crate::corpus::vocab::{BOS, EOS, MASK, PAD};
use crate::decoder::{AttentionMode, Decoder};
use crate::encoder::Encoder;
use crate::error::{ModelError, ModelResult};
use crate::nn::Linear;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Name prefix of the temporary classification head.
pub const CLASSIFIER: &str = "classifier";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub mask_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            batch_size: 16,
            weight_decay: 0.01,
            seed: 0,
            mask_rate: 0.15,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> TrainResult<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(TrainError::Config(format!("invalid pretraining settings {self:?}")));
        }
        Ok(())
    }

    fn adam(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Label accuracy at 0.5 (classification), perplexity (LM) or masked
    /// token accuracy (MLM).
    pub val_score: f64,
    /// Seconds since the start of pretraining.
    pub wall_secs: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<PretrainEpoch>,
}

struct ClassifierModel {
    encoder: Encoder,
    head: Linear,
}

impl ClassifierModel {
    fn logits(&self, g: &Graph, images: &[Tensor]) -> ModelResult<Var> {
        let views = images
            .iter()
            .map(|im| self.encoder.encode(g, im))
            .collect::<ModelResult<Vec<_>>>()?;
        let grid = Captioner::concat_views(g, &views)?;
        let pooled = g.mean_rows(grid)?;
        Ok(self.head.forward(g, pooled)?)
    }
}

fn label_targets(d: &Dataset, i: usize) -> Vec<f64> {
    d.examples[i].labels().iter().map(|b| f64::from(u8::from(*b))).collect()
}

/// Accuracy of always predicting each label's majority class on `d`.
pub fn majority_floor(d: &Dataset) -> f64 {
    let n = d.len() as f64;
    let mut total = 0.0;
    for k in 0..NUM_OBSERVATIONS {
        let pos = d.examples.iter().filter(|e| e.labels()[k]).count() as f64;
        total += pos.max(n - pos) / n;
    }
    total / NUM_OBSERVATIONS as f64
}

/// Multi-label classification pretraining: mean-pooled visual features, a
/// linear head to 14 logits, per-label binary cross-entropy. The head is
/// not saved.
pub fn pretrain_encoder_classification(
    cfg: &EncoderConfig,
    train: &Dataset,
    val: &Dataset,
    pre: &PreprocessConfig,
    pc: &PretrainConfig,
) -> TrainResult<PretrainOutcome> {
    pc.validate()?;
    let mut store = ParamStore::new();
    let encoder = Encoder::new(&mut store, cfg, pc.seed)?;
    let head = Linear::new(&mut store, CLASSIFIER, cfg.feature_dim(), NUM_OBSERVATIONS, true, pc.seed);
    let model = ClassifierModel { encoder, head };
    let rates = rates_by_group(&store, pc.lr, pc.lr);
    let mut adam = pc.adam();
    let val_images: Vec<Vec<Tensor>> = (0..val.len()).map(|i| val.eval_images(i, pre)).collect();
    let mut history = Vec::new();
    let start = Instant::now();
    for epoch in 1..=pc.epochs {
        let order = epoch_order(train.len(), pc.seed, epoch);
        let epoch_seed = mix(pc.seed, epoch as u64);
        let loss = |g: &Graph, i: usize| -> ModelResult<Option<Var>> {
            let images = train.train_images(i, pre, mix(epoch_seed, i as u64));
            let logits = model.logits(g, &images)?;
            Ok(Some(g.bce_with_logits(logits, &label_targets(train, i))?))
        };
        let train_loss = train_epoch(&mut store, &mut adam, &order, pc.batch_size, &rates, epoch_seed, &loss)?
            .unwrap_or(0.0);
        let (mut val_loss, mut correct) = (0.0, 0usize);
        for (i, images) in val_images.iter().enumerate() {
            let g = Graph::inference(&store);
            let logits = model.logits(&g, images)?;
            let targets = label_targets(val, i);
            val_loss += g.value(g.bce_with_logits(logits, &targets).map_err(ModelError::from)?).item();
            let z = g.value(logits);
            correct += z.data().iter().zip(&targets).filter(|(z, t)| (**z > 0.0) == (**t > 0.5)).count();
        }
        let n = val.len().max(1) as f64;
        let rec = PretrainEpoch {
            epoch,
            train_loss,
            val_loss: val_loss / n,
            val_score: correct as f64 / (n * NUM_OBSERVATIONS as f64),
            wall_secs: start.elapsed().as_secs_f64(),
        };
        log::info!("encoder pretraining {rec:?}");
        history.push(rec);
    }
    let meta = CheckpointMeta {
        task: PretrainTask::Classification,
        epoch: pc.epochs as u32,
        val_cider: None,
        seed: pc.seed,
    };
    let checkpoint = Checkpoint::capture(&store, &cfg.fingerprint(), meta, |n| n.starts_with("encoder."));
    Ok(PretrainOutcome { checkpoint, history })
}

fn clip(tokens: &[usize], cfg: &DecoderConfig) -> Vec<usize> {
    // BOS/EOS take one slot of the context
    tokens[..tokens.len().min(cfg.max_gen_len - 1)].to_vec()
}

fn lm_loss(dec: &Decoder, g: &Graph, tokens: &[usize]) -> ModelResult<Var> {
    let mut inputs = vec![BOS];
    inputs.extend_from_slice(tokens);
    let mut targets = tokens.to_vec();
    targets.push(EOS);
    let out = dec.forward(g, &inputs, None, AttentionMode::Causal)?;
    Ok(g.cross_entropy(out.logits, &targets, None)?)
}

/// Next-token pretraining of a decoder without cross-attention.
pub fn pretrain_decoder_lm(
    cfg: &DecoderConfig,
    train: &[Vec<usize>],
    val: &[Vec<usize>],
    pc: &PretrainConfig,
) -> TrainResult<PretrainOutcome> {
    pc.validate()?;
    let train: Vec<Vec<usize>> = train.iter().map(|t| clip(t, cfg)).collect();
    let val: Vec<Vec<usize>> = val.iter().map(|t| clip(t, cfg)).collect();
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, cfg, pc.seed, false)?;
    let rates = rates_by_group(&store, pc.lr, pc.lr);
    let mut adam = pc.adam();
    let mut history = Vec::new();
    let start = Instant::now();
    for epoch in 1..=pc.epochs {
        let order = epoch_order(train.len(), pc.seed, epoch);
        let loss = |g: &Graph, i: usize| -> ModelResult<Option<Var>> { Ok(Some(lm_loss(&dec, g, &train[i])?)) };
        let epoch_seed = mix(pc.seed, epoch as u64);
        let train_loss = train_epoch(&mut store, &mut adam, &order, pc.batch_size, &rates, epoch_seed, &loss)?
            .unwrap_or(0.0);
        // token-weighted held-out cross-entropy
        let (mut nll, mut count) = (0.0, 0usize);
        for t in &val {
            let g = Graph::inference(&store);
            nll += g.value(lm_loss(&dec, &g, t)?).item() * (t.len() + 1) as f64;
            count += t.len() + 1;
        }
        let val_loss = nll / count.max(1) as f64;
        let rec = PretrainEpoch {
            epoch,
            train_loss,
            val_loss,
            val_score: val_loss.exp(),
            wall_secs: start.elapsed().as_secs_f64(),
        };
        log::info!("decoder LM pretraining {rec:?}");
        history.push(rec);
    }
    let meta = CheckpointMeta {
        task: PretrainTask::Lm,
        epoch: pc.epochs as u32,
        val_cider: None,
        seed: pc.seed,
    };
    let checkpoint = Checkpoint::capture(&store, &cfg.fingerprint(), meta, |_| true);
    Ok(PretrainOutcome { checkpoint, history })
}

/// Masks each report token (never BOS/EOS) with probability `rate`. Returns
/// the input sequence `BOS report EOS` with masked slots set to MASK, and
/// targets holding the original token at masked slots and PAD elsewhere.
pub fn mlm_mask(tokens: &[usize], rate: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = vec![BOS];
    let mut targets = vec![PAD];
    for &t in tokens {
        if rate > 0.0 && rng.random_bool(rate) {
            inputs.push(MASK);
            targets.push(t);
        } else {
            inputs.push(t);
            targets.push(PAD);
        }
    }
    inputs.push(EOS);
    targets.push(PAD);
    (inputs, targets)
}

/// Masked-token pretraining of the same decoder body with bidirectional
/// attention. The checkpoint loads into the causal decoder unchanged.
pub fn pretrain_decoder_mlm(
    cfg: &DecoderConfig,
    train: &[Vec<usize>],
    val: &[Vec<usize>],
    pc: &PretrainConfig,
) -> TrainResult<PretrainOutcome> {
    pc.validate()?;
    // BOS and EOS both sit in the input here
    let fit = |t: &Vec<usize>| t[..t.len().min(cfg.max_gen_len - 2)].to_vec();
    let train: Vec<Vec<usize>> = train.iter().map(fit).collect();
    let val: Vec<Vec<usize>> = val.iter().map(fit).collect();
    if pc.mask_rate == 0.0 {
        log::warn!("mask rate 0: no positions to reconstruct, loss defined as 0");
    }
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, cfg, pc.seed, false)?;
    let rates = rates_by_group(&store, pc.lr, pc.lr);
    let mut adam = pc.adam();
    let masked_loss = |g: &Graph, inputs: &[usize], targets: &[usize]| -> ModelResult<Option<(Var, Var)>> {
        if targets.iter().all(|t| *t == PAD) {
            return Ok(None);
        }
        let out = dec.forward(g, inputs, None, AttentionMode::Bidirectional)?;
        Ok(Some((g.cross_entropy(out.logits, targets, Some(PAD))?, out.logits)))
    };
    let mut history = Vec::new();
    let start = Instant::now();
    for epoch in 1..=pc.epochs {
        let order = epoch_order(train.len(), pc.seed, epoch);
        let epoch_seed = mix(pc.seed, epoch as u64);
        let loss = |g: &Graph, i: usize| -> ModelResult<Option<Var>> {
            let (inputs, targets) = mlm_mask(&train[i], pc.mask_rate, mix(epoch_seed, i as u64));
            Ok(masked_loss(g, &inputs, &targets)?.map(|(l, _)| l))
        };
        let train_loss = train_epoch(&mut store, &mut adam, &order, pc.batch_size, &rates, epoch_seed, &loss)?
            .unwrap_or(0.0);
        let (mut nll, mut hits, mut masked) = (0.0, 0usize, 0usize);
        for (i, t) in val.iter().enumerate() {
            let (inputs, targets) = mlm_mask(t, pc.mask_rate, mix(pc.seed ^ 0x5eed, i as u64));
            let g = Graph::inference(&store);
            let Some((l, logits)) = masked_loss(&g, &inputs, &targets)? else { continue };
            let n = targets.iter().filter(|t| **t != PAD).count();
            nll += g.value(l).item() * n as f64;
            masked += n;
            let z = g.value(logits);
            for (row, &target) in targets.iter().enumerate() {
                if target != PAD && argmax(z.row(row)) == target {
                    hits += 1;
                }
            }
        }
        let rec = PretrainEpoch {
            epoch,
            train_loss,
            val_loss: if masked > 0 { nll / masked as f64 } else { 0.0 },
            val_score: if masked > 0 { hits as f64 / masked as f64 } else { 0.0 },
            wall_secs: start.elapsed().as_secs_f64(),
        };
        log::info!("decoder MLM pretraining {rec:?}");
        history.push(rec);
    }
    let meta = CheckpointMeta {
        task: PretrainTask::Mlm,
        epoch: pc.epochs as u32,
        val_cider: None,
        seed: pc.seed,
    };
    let checkpoint = Checkpoint::capture(&store, &cfg.fingerprint(), meta, |_| true);
    Ok(PretrainOutcome { checkpoint, history })
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}
