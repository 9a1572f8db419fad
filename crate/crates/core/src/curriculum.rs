//! Success-rate-weighted task sampling.
//!
//! Each task carries an exponential moving average `s_j` of its episode
//! outcomes. Tasks are drawn with probability proportional to
//! `exp((0.5 - s_j) / tau)`, which favors tasks near 50% success.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::TaskSampler;

/// Prior success rate of a task with no recorded episodes.
pub const PRIOR_SUCCESS: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurriculumError {
    #[error("unknown task {task} (tracker has {num_tasks})")]
    UnknownTask { task: usize, num_tasks: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    pub alpha: f64,
    pub tau: f64,
    /// Replaces the weighted sampler with a uniform one.
    pub uniform: bool,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self { alpha: 0.1, tau: 0.25, uniform: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessTracker {
    pub rates: Vec<f64>,
    pub counts: Vec<u64>,
    pub config: CurriculumConfig,
}

impl SuccessTracker {
    pub fn new(num_tasks: usize, config: CurriculumConfig) -> Self {
        Self { rates: vec![PRIOR_SUCCESS; num_tasks], counts: vec![0; num_tasks], config }
    }

    pub fn num_tasks(&self) -> usize {
        self.rates.len()
    }

    pub fn update(&mut self, task: usize, success: bool) -> Result<(), CurriculumError> {
        let num_tasks = self.rates.len();
        let s = self.rates.get_mut(task).ok_or(CurriculumError::UnknownTask { task, num_tasks })?;
        let outcome = if success { 1.0 } else { 0.0 };
        *s = (1.0 - self.config.alpha) * *s + self.config.alpha * outcome;
        self.counts[task] += 1;
        Ok(())
    }

    /// Sampling distribution over tasks.
    pub fn probabilities(&self) -> Vec<f64> {
        if self.config.uniform {
            let n = self.rates.len() as f64;
            return vec![1.0 / n; self.rates.len()];
        }
        softmax_weights(&self.rates, self.config.tau)
    }

    pub fn sample_task(&self, rng: &mut ChaCha8Rng) -> usize {
        self.snapshot().sample(rng)
    }

    /// Frozen sampler for one rollout phase.
    pub fn snapshot(&self) -> CurriculumSnapshot {
        let p = self.probabilities();
        let mut acc = 0.0;
        let cdf = p
            .iter()
            .map(|x| {
                acc += x;
                acc
            })
            .collect();
        CurriculumSnapshot { cdf }
    }
}

/// `exp((0.5 - s_j) / tau)` normalized over tasks.
pub fn softmax_weights(rates: &[f64], tau: f64) -> Vec<f64> {
    let logits: Vec<f64> = rates.iter().map(|s| (PRIOR_SUCCESS - s) / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumSnapshot {
    cdf: Vec<f64>,
}

impl TaskSampler for CurriculumSnapshot {
    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = *self.cdf.last().expect("at least one task");
        let u = rng.gen::<f64>() * total;
        self.cdf.iter().position(|&c| u < c).unwrap_or(self.cdf.len() - 1)
    }
}
