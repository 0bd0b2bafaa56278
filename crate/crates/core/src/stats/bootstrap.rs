use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean, StatsError, StatsResult};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const BOOTSTRAP_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub resamples: usize,
}

// Linear interpolation between order statistics at position p·(n − 1).
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[i] + frac * (sorted[i + 1] - sorted[i])
}

/// Percentile bootstrap of the mean. Resample `i` draws from its own ChaCha
/// stream so the interval does not depend on the thread count.
pub fn bootstrap_ci(scores: &[f64], resamples: usize, level: f64, seed: u64) -> StatsResult<ConfidenceInterval> {
    if scores.is_empty() {
        return Err(StatsError::Empty);
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(StatsError::Invalid(format!("resamples {resamples}, level {level}")));
    }
    let n = scores.len();
    let mut means: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let sum: f64 = (0..n).map(|_| scores[rng.random_range(0..n)]).sum();
            sum / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(ConfidenceInterval {
        mean: mean(scores),
        lo: percentile(&means, tail),
        hi: percentile(&means, 1.0 - tail),
        level,
        resamples,
    })
}
