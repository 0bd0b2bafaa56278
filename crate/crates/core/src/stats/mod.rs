//! Bootstrap intervals and the Levene → Welch ANOVA → Games-Howell protocol
//! for comparing per-example scores between checkpoints.

pub mod bootstrap;
pub mod distributions;
pub mod hypothesis;
pub mod quadrature;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bootstrap::{bootstrap_ci, ConfidenceInterval, BOOTSTRAP_LEVEL, BOOTSTRAP_RESAMPLES};
pub use hypothesis::{
    compare, games_howell, levene, welch_anova, welch_t_test, AnovaResult, ComparisonReport, LeveneCenter,
    LeveneResult, PairwiseResult, WelchT,
};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("empty sample")]
    Empty,
    #[error("need at least {needed} groups, got {actual}")]
    TooFewGroups { needed: usize, actual: usize },
    #[error("group '{label}' has {size} values; at least 2 are needed")]
    GroupTooSmall { label: String, size: usize },
    #[error("group '{0}' has zero variance")]
    ZeroVariance(String),
    #[error("{0}")]
    Invalid(String),
}

pub type StatsResult<T> = Result<T, StatsError>;

/// How repeated training runs are folded into one sample per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Every (run, example) score is one observation.
    Examples,
    /// Each run contributes its mean score.
    RunMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleGroups {
    pub labels: Vec<String>,
    pub groups: Vec<Vec<f64>>,
}

impl SampleGroups {
    pub fn new(labels: Vec<String>, groups: Vec<Vec<f64>>) -> StatsResult<Self> {
        if labels.len() != groups.len() {
            return Err(StatsError::Invalid(format!(
                "{} labels for {} groups",
                labels.len(),
                groups.len()
            )));
        }
        if groups.iter().flatten().any(|x| !x.is_finite()) {
            return Err(StatsError::Invalid("non-finite score".into()));
        }
        Ok(Self { labels, groups })
    }

    /// `runs[g][r]` holds the per-example scores of run `r` in group `g`.
    pub fn pooled(labels: Vec<String>, runs: &[Vec<Vec<f64>>], pooling: Pooling) -> StatsResult<Self> {
        let groups = runs
            .iter()
            .map(|group| match pooling {
                Pooling::Examples => group.iter().flatten().copied().collect(),
                Pooling::RunMeans => group.iter().filter(|r| !r.is_empty()).map(|r| mean(r)).collect(),
            })
            .collect();
        Self::new(labels, groups)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    fn check(&self, min_groups: usize) -> StatsResult<()> {
        if self.groups.len() < min_groups {
            return Err(StatsError::TooFewGroups {
                needed: min_groups,
                actual: self.groups.len(),
            });
        }
        for (label, g) in self.labels.iter().zip(&self.groups) {
            if g.len() < 2 {
                return Err(StatsError::GroupTooSmall {
                    label: label.clone(),
                    size: g.len(),
                });
            }
        }
        Ok(())
    }
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}
