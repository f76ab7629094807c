//! Learnable per-pass-rate loss weights.
//!
//! Every non-degenerate pass rate `mu = k/K` owns a weight `w_mu`. The total
//! loss over the buckets present in a batch is
//!
//! ```text
//! L_total = sum_mu (w_mu * L_mu - C * ln w_mu)
//! ```
//!
//! whose partial derivative `L_mu - C / w_mu` vanishes at `w_mu = C / L_mu`,
//! the point where every weighted bucket loss equals `C`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::group_stats::PassRate;
use crate::optim::{Adam, AdamConfig};
use crate::surrogate::GroupLossBreakdown;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DaroConfig {
    pub c: f64,
    pub lr: f64,
    pub clamp_min: f64,
    pub clamp_max: f64,
    pub init: f64,
}

impl Default for DaroConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            lr: 1e-2,
            clamp_min: 1e-3,
            clamp_max: 1e3,
            init: 1.0,
        }
    }
}

impl DaroConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(Error::Config(format!("daro C = {} must be > 0", self.c)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("daro lr = {} must be > 0", self.lr)));
        }
        if !(self.clamp_min > 0.0 && self.clamp_min <= self.clamp_max) {
            return Err(Error::Config(format!(
                "daro clamp bounds [{}, {}] must satisfy 0 < min <= max",
                self.clamp_min, self.clamp_max
            )));
        }
        if !(self.init >= self.clamp_min && self.init <= self.clamp_max) {
            return Err(Error::Config(format!(
                "daro init {} outside clamp bounds",
                self.init
            )));
        }
        Ok(())
    }
}

/// Weights `w_mu` for `mu = 1/K ..= (K-1)/K` plus their optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct DaroWeights {
    group_size: u32,
    weights: Vec<f64>,
    pub c: f64,
    pub clamp_min: f64,
    pub clamp_max: f64,
    moments: Adam,
}

impl DaroWeights {
    pub fn new(group_size: u32, config: DaroConfig) -> Result<Self> {
        config.validate()?;
        if group_size < 2 {
            return Err(Error::Config(format!("group size {group_size} < 2")));
        }
        let n = (group_size - 1) as usize;
        Ok(Self {
            group_size,
            weights: vec![config.init; n],
            c: config.c,
            clamp_min: config.clamp_min,
            clamp_max: config.clamp_max,
            moments: Adam::new(AdamConfig::with_lr(config.lr), n),
        })
    }

    pub fn group_size(&self) -> u32 {
        self.group_size
    }

    pub fn lr(&self) -> f64 {
        self.moments.config.lr
    }

    fn index(&self, mu: PassRate) -> Option<usize> {
        (mu.group_size == self.group_size && !mu.is_degenerate()).then(|| (mu.k - 1) as usize)
    }

    pub fn get(&self, mu: PassRate) -> Option<f64> {
        self.index(mu).map(|i| self.weights[i])
    }

    /// Sets a weight, clamped into the configured bounds.
    pub fn set(&mut self, mu: PassRate, w: f64) -> Result<()> {
        let i = self.index(mu).ok_or(Error::MissingWeight(mu))?;
        self.weights[i] = w.clamp(self.clamp_min, self.clamp_max);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (PassRate, f64)> + '_ {
        PassRate::interior(self.group_size).zip(self.weights.iter().copied())
    }

    pub fn moment_steps(&self, mu: PassRate) -> Option<u64> {
        self.index(mu).map(|i| self.moments.steps(i))
    }

    pub fn first_moment(&self, mu: PassRate) -> Option<f64> {
        self.index(mu).map(|i| self.moments.first_moment(i))
    }

    fn weight_for(&self, mu: PassRate) -> Result<f64> {
        self.get(mu).ok_or(Error::MissingWeight(mu))
    }

    /// `sum_mu (w_mu L_mu - C ln w_mu)` over buckets present in `breakdown`.
    pub fn regularized_total_loss(&self, breakdown: &GroupLossBreakdown) -> Result<f64> {
        breakdown.per_mu.iter().try_fold(0.0, |acc, (&mu, bucket)| {
            let w = self.weight_for(mu)?;
            Ok(acc + w * bucket.loss - self.c * w.ln())
        })
    }

    /// The `-C sum ln w_mu` part of [`Self::regularized_total_loss`].
    pub fn regularizer(&self, breakdown: &GroupLossBreakdown) -> Result<f64> {
        breakdown.per_mu.keys().try_fold(0.0, |acc, &mu| {
            Ok(acc - self.c * self.weight_for(mu)?.ln())
        })
    }

    /// `dL_total / dw_mu = L_mu - C / w_mu` for buckets in the batch.
    pub fn weight_gradient(&self, breakdown: &GroupLossBreakdown) -> Result<BTreeMap<PassRate, f64>> {
        breakdown
            .per_mu
            .iter()
            .map(|(&mu, bucket)| {
                let w = self.weight_for(mu)?;
                Ok((mu, bucket.loss - self.c / w))
            })
            .collect()
    }

    /// One Adam step per bucket in `grads`, then clamping. Buckets not in
    /// `grads` keep their weight and moment state.
    pub fn apply_weight_update(&mut self, grads: &BTreeMap<PassRate, f64>) -> Result<()> {
        for (&mu, &g) in grads {
            let i = self.index(mu).ok_or(Error::MissingWeight(mu))?;
            let w = self.moments.step_entry(i, self.weights[i], g);
            self.weights[i] = w.clamp(self.clamp_min, self.clamp_max);
        }
        Ok(())
    }
}

/// Fixed point `w*_mu = C / L_mu` of the weight dynamics.
pub fn stationary_weights(
    losses: &BTreeMap<PassRate, f64>,
    c: f64,
) -> Result<BTreeMap<PassRate, f64>> {
    losses
        .iter()
        .map(|(&mu, &l)| {
            if l > 0.0 {
                Ok((mu, c / l))
            } else {
                Err(Error::NoStationaryPoint(mu, l))
            }
        })
        .collect()
}
