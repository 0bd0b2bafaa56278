use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::image::{preprocess_image, PreprocessConfig, Raster};
use crate::corpus::observations::{Annotation, BinaryObservations};
use crate::corpus::synth::{synth_study, Split, Study, SynthConfig};
use crate::corpus::text::preprocess_report;
use crate::corpus::vocab::{Vocabulary, MIN_FREQUENCY};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub images: Vec<Raster>,
    /// Preprocessed report text.
    pub report: String,
    pub tokens: Vec<usize>,
    pub annotation: Annotation,
}

impl Example {
    pub fn labels(&self) -> BinaryObservations {
        self.annotation.binarize()
    }
}

/// A split ready for training: preprocessed reports, token ids and raw views.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn from_studies(studies: Vec<Study>, vocab: &Vocabulary) -> Self {
        let examples = studies
            .into_iter()
            .map(|s| {
                let report = preprocess_report(&s.record.report);
                Example {
                    id: s.record.id,
                    tokens: vocab.tokenize(&report),
                    images: s.images,
                    report,
                    annotation: s.record.annotation,
                }
            })
            .collect();
        Self { examples }
    }

    /// Generates a split in memory, skipping the files.
    pub fn synthesize(cfg: &SynthConfig, split: Split, vocab: &Vocabulary) -> Self {
        let studies = (0..cfg.size(split)).map(|i| synth_study(cfg, split, i)).collect();
        Self::from_studies(studies, vocab)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }

    pub fn reports(&self) -> Vec<String> {
        self.examples.iter().map(|e| e.report.clone()).collect()
    }

    /// Deterministic evaluation views (center crop, no rotation).
    pub fn eval_images(&self, i: usize, pre: &PreprocessConfig) -> Vec<Tensor> {
        self.examples[i]
            .images
            .iter()
            .map(|im| preprocess_image(&im.to_tensor(), pre, false, 0))
            .collect()
    }

    /// Augmented training views; `seed` should differ per epoch and example.
    pub fn train_images(&self, i: usize, pre: &PreprocessConfig, seed: u64) -> Vec<Tensor> {
        self.examples[i]
            .images
            .iter()
            .enumerate()
            .map(|(v, im)| preprocess_image(&im.to_tensor(), pre, true, mix(seed, v as u64)))
            .collect()
    }
}

/// Vocabulary over preprocessed training reports.
pub fn build_vocabulary(train: &[Study]) -> Vocabulary {
    let reports: Vec<String> = train.iter().map(|s| preprocess_report(&s.record.report)).collect();
    Vocabulary::build(reports.iter().map(String::as_str), MIN_FREQUENCY)
}

pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

/// Epoch order: a seeded permutation of `0..n`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64)));
    order
}

/// `size` indices sampled without replacement from `0..n`, sorted. The full
/// size returns the identity.
pub fn subset_indices(n: usize, size: usize, seed: u64) -> Vec<usize> {
    if size >= n {
        return (0..n).collect();
    }
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut pick = all[..size].to_vec();
    pick.sort_unstable();
    pick
}
