use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::data::{subset_indices, Dataset};
use super::finetune::{decode_split, finetune, load_model, EpochRecord, WarmStart};
use super::{TrainConfig, TrainError, TrainResult};
use crate::config::CaptionerConfig;
use crate::corpus::image::PreprocessConfig;
use crate::corpus::vocab::Vocabulary;
use crate::decoding::SearchMode;
use crate::metrics::nlg::{cider, tokens};

/// One initialization strategy in a paired comparison.
#[derive(Debug, Clone)]
pub struct Arm {
    pub label: String,
    pub warm: WarmStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_cider: f64,
    pub stopped_early: bool,
    pub history: Vec<EpochRecord>,
}

/// Everything an experiment needs besides the initializations.
pub struct ExperimentData<'a> {
    pub cfg: &'a CaptionerConfig,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub pre: &'a PreprocessConfig,
    pub vocab: &'a Vocabulary,
}

/// Fine-tunes every arm once per seed; the seed fixes the fresh
/// initialization, data order and augmentation, so arms sharing a seed form
/// a pair.
pub fn run_arms(
    data: &ExperimentData,
    arms: &[Arm],
    seeds: &[u64],
    tc: &TrainConfig,
) -> TrainResult<Vec<(RunSummary, Checkpoint)>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for arm in arms {
            let tc = TrainConfig { seed, ..tc.clone() };
            let o = finetune(data.cfg, &arm.warm, data.train, data.val, data.pre, data.vocab, &tc)?;
            log::info!("{} seed {seed}: best val CIDEr {:.4} at epoch {}", arm.label, o.best_val_cider, o.best_epoch);
            out.push((
                RunSummary {
                    label: arm.label.clone(),
                    seed,
                    best_epoch: o.best_epoch,
                    best_val_cider: o.best_val_cider,
                    stopped_early: o.stopped_early,
                    history: o.history,
                },
                o.best,
            ));
        }
    }
    Ok(out)
}

/// Test-split reports of a fine-tuned checkpoint, decoded with the test
/// beam width, and their per-example CIDEr.
pub fn test_scores(
    cfg: &CaptionerConfig,
    ck: &Checkpoint,
    test: &Dataset,
    pre: &PreprocessConfig,
    vocab: &Vocabulary,
    beam: usize,
) -> TrainResult<(Vec<String>, Vec<f64>)> {
    let (store, model) = load_model(cfg, ck)?;
    let hyps = decode_split(&model, &store, test, pre, vocab, SearchMode::Beam(beam))?;
    let refs = test.reports();
    let h: Vec<Vec<&str>> = hyps.iter().map(|s| tokens(s)).collect();
    let r: Vec<Vec<&str>> = refs.iter().map(|s| tokens(s)).collect();
    let scores = cider(&h, &r).map_err(TrainError::Data)?;
    Ok((hyps, scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetRun {
    pub size: usize,
    pub run: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_cider: f64,
    /// Test-split reports in dataset order.
    pub hypotheses: Vec<String>,
    /// Per-example test CIDEr.
    pub test_scores: Vec<f64>,
}

/// Trains `runs_per_size` seeds on one shared random subset per size.
pub fn subset_experiment(
    data: &ExperimentData,
    warm: &WarmStart,
    test: &Dataset,
    sizes: &[usize],
    runs_per_size: usize,
    base_seed: u64,
    tc: &TrainConfig,
) -> TrainResult<Vec<SubsetRun>> {
    let mut rows = Vec::with_capacity(sizes.len() * runs_per_size);
    for &size in sizes {
        let subset = data.train.subset(&subset_indices(data.train.len(), size, base_seed));
        for run in 0..runs_per_size {
            let seed = base_seed.wrapping_add(run as u64);
            let tc = TrainConfig { seed, ..tc.clone() };
            let o = finetune(data.cfg, warm, &subset, data.val, data.pre, data.vocab, &tc)?;
            let (hypotheses, scores) = test_scores(data.cfg, &o.best, test, data.pre, data.vocab, tc.test_beam)?;
            rows.push(SubsetRun {
                size,
                run,
                seed,
                best_epoch: o.best_epoch,
                best_val_cider: o.best_val_cider,
                hypotheses,
                test_scores: scores,
            });
        }
    }
    Ok(rows)
}
