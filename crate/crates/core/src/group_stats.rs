//! Per-group reward statistics for binary rewards.
//!
//! For a group of `K` responses with `k` correct ones the pass rate is
//! `mu = k/K`, the population standard deviation is `sqrt(mu (1 - mu))` and
//! the standardized advantages take only two values:
//!
//! ```text
//! A+ =  sqrt((K - k) / k)      (reward 1)
//! A- = -sqrt(k / (K - k))      (reward 0)
//! ```
//!
//! Groups with `k = 0` or `k = K` are kept but flagged degenerate, with both
//! advantages set to zero.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::daro::DaroWeights;
use crate::error::{Error, Result};

/// Exact pass rate `k / K` of a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PassRate {
    pub group_size: u32,
    pub k: u32,
}

impl PassRate {
    pub fn new(k: u32, group_size: u32) -> Self {
        assert!(k <= group_size, "k = {k} exceeds group size {group_size}");
        Self { group_size, k }
    }

    pub fn value(self) -> f64 {
        f64::from(self.k) / f64::from(self.group_size)
    }

    pub fn is_degenerate(self) -> bool {
        self.k == 0 || self.k == self.group_size
    }

    /// All non-degenerate pass rates for a group size: `1/K ..= (K-1)/K`.
    pub fn interior(group_size: u32) -> impl Iterator<Item = PassRate> {
        (1..group_size).map(move |k| PassRate::new(k, group_size))
    }

    /// Column suffix used by the metrics CSV, e.g. `3_of_8`.
    pub fn column_suffix(self) -> String {
        format!("{}_of_{}", self.k, self.group_size)
    }
}

impl fmt::Display for PassRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.k, self.group_size)
    }
}

/// One prompt's `K` sampled responses with their binary rewards and the
/// per-token log-probabilities recorded under the rollout snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseGroup {
    pub prompt_id: u64,
    pub responses: Vec<Vec<u32>>,
    pub rewards: Vec<u8>,
    pub rollout_logprobs: Vec<Vec<f64>>,
}

impl ResponseGroup {
    pub fn new(
        prompt_id: u64,
        responses: Vec<Vec<u32>>,
        rewards: Vec<u8>,
        rollout_logprobs: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let group = Self {
            prompt_id,
            responses,
            rewards,
            rollout_logprobs,
        };
        group.validate()?;
        Ok(group)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.responses.len();
        if k < 2 {
            return Err(Error::InvalidGroup(format!("group size {k} < 2")));
        }
        if self.rewards.len() != k || self.rollout_logprobs.len() != k {
            return Err(Error::InvalidGroup(format!(
                "list lengths differ: {} responses, {} rewards, {} logprob lists",
                k,
                self.rewards.len(),
                self.rollout_logprobs.len()
            )));
        }
        if let Some(r) = self.rewards.iter().find(|&&r| r > 1) {
            return Err(Error::InvalidGroup(format!("reward {r} is not binary")));
        }
        for (i, (tokens, lps)) in self.responses.iter().zip(&self.rollout_logprobs).enumerate() {
            if tokens.is_empty() {
                return Err(Error::InvalidGroup(format!("response {i} is empty")));
            }
            if tokens.len() != lps.len() {
                return Err(Error::InvalidGroup(format!(
                    "response {i}: {} tokens but {} log-probabilities",
                    tokens.len(),
                    lps.len()
                )));
            }
            if let Some(lp) = lps.iter().find(|lp| !lp.is_finite() || **lp > 0.0) {
                return Err(Error::InvalidGroup(format!(
                    "response {i}: log-probability {lp} is not finite and <= 0"
                )));
            }
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.responses.len()
    }

    pub fn token_count(&self) -> usize {
        self.responses.iter().map(Vec::len).sum()
    }

    pub fn pass_rate(&self) -> PassRate {
        let k = self.rewards.iter().filter(|&&r| r == 1).count();
        PassRate::new(k as u32, self.group_size() as u32)
    }
}

/// Reward statistics of one group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupStats {
    pub pass_rate: PassRate,
    pub mu: f64,
    pub sigma: f64,
    pub k: u32,
    pub adv_pos: f64,
    pub adv_neg: f64,
    pub len_pos: usize,
    pub len_neg: usize,
    pub degenerate: bool,
}

impl GroupStats {
    /// Advantage of a response with the given reward.
    pub fn advantage(&self, reward: u8) -> f64 {
        if reward == 1 {
            self.adv_pos
        } else {
            self.adv_neg
        }
    }

    pub fn token_count(&self) -> usize {
        self.len_pos + self.len_neg
    }
}

pub fn group_stats(group: &ResponseGroup) -> GroupStats {
    let pass_rate = group.pass_rate();
    let (k, n) = (pass_rate.k, pass_rate.group_size);
    let mu = pass_rate.value();
    let sigma = (mu * (1.0 - mu)).sqrt();
    let degenerate = pass_rate.is_degenerate();
    let (adv_pos, adv_neg) = if degenerate {
        (0.0, 0.0)
    } else {
        let (k, n) = (f64::from(k), f64::from(n));
        (((n - k) / k).sqrt(), -(k / (n - k)).sqrt())
    };

    let mut len_pos = 0;
    let mut len_neg = 0;
    for (tokens, &r) in group.responses.iter().zip(&group.rewards) {
        if r == 1 {
            len_pos += tokens.len();
        } else {
            len_neg += tokens.len();
        }
    }

    GroupStats {
        pass_rate,
        mu,
        sigma,
        k,
        adv_pos,
        adv_neg,
        len_pos,
        len_neg,
        degenerate,
    }
}

/// Population standard deviation of all rewards pooled across `groups`
/// (the LIPO batch-level `sigma_hat`).
pub fn batch_reward_std<'a, I>(groups: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a ResponseGroup>,
{
    let mut count = 0usize;
    let mut ones = 0usize;
    for g in groups {
        count += g.rewards.len();
        ones += g.rewards.iter().filter(|&&r| r == 1).count();
    }
    if count == 0 || ones == 0 || ones == count {
        return Err(Error::DegenerateBatch);
    }
    let p = ones as f64 / count as f64;
    Ok((p * (1.0 - p)).sqrt())
}

/// Loss-weighting variant without its per-batch slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeKind {
    Grpo,
    Dapo,
    Lipo,
    DrGrpo,
    Daro,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [
        SchemeKind::Grpo,
        SchemeKind::Dapo,
        SchemeKind::Lipo,
        SchemeKind::DrGrpo,
        SchemeKind::Daro,
    ];

    /// Whether the scheme drops `mu in {0, 1}` groups and refills the batch.
    pub fn uses_dynamic_sampling(self) -> bool {
        matches!(self, SchemeKind::Dapo | SchemeKind::Daro)
    }

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Grpo => "grpo",
            SchemeKind::Dapo => "dapo",
            SchemeKind::Lipo => "lipo",
            SchemeKind::DrGrpo => "drgrpo",
            SchemeKind::Daro => "daro",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['.', '-', '_'], "").as_str() {
            "grpo" => Ok(SchemeKind::Grpo),
            "dapo" => Ok(SchemeKind::Dapo),
            "lipo" => Ok(SchemeKind::Lipo),
            "drgrpo" => Ok(SchemeKind::DrGrpo),
            "daro" => Ok(SchemeKind::Daro),
            other => Err(Error::Config(format!("unknown scheme {other:?}"))),
        }
    }
}

/// A weighting scheme with the batch quantities it needs.
#[derive(Debug, Clone, Copy)]
pub enum WeightScheme<'a> {
    Grpo,
    Dapo,
    /// `batch_std` is the pooled reward std `sigma_hat > 0`.
    Lipo { batch_std: f64 },
    /// `batch_tokens` is the token total `L >= 1` of the batch.
    DrGrpo { batch_tokens: usize },
    Daro(&'a DaroWeights),
}

impl WeightScheme<'_> {
    pub fn kind(&self) -> SchemeKind {
        match self {
            WeightScheme::Grpo => SchemeKind::Grpo,
            WeightScheme::Dapo => SchemeKind::Dapo,
            WeightScheme::Lipo { .. } => SchemeKind::Lipo,
            WeightScheme::DrGrpo { .. } => SchemeKind::DrGrpo,
            WeightScheme::Daro(_) => SchemeKind::Daro,
        }
    }
}

/// The weight `w` a scheme assigns to every response of a group.
pub fn scheme_weight(scheme: &WeightScheme<'_>, stats: &GroupStats) -> f64 {
    match *scheme {
        WeightScheme::Grpo => 1.0,
        WeightScheme::Dapo => {
            if stats.degenerate {
                0.0
            } else {
                1.0
            }
        }
        WeightScheme::Lipo { batch_std } => {
            debug_assert!(batch_std > 0.0);
            stats.sigma / batch_std
        }
        WeightScheme::DrGrpo { batch_tokens } => {
            debug_assert!(batch_tokens >= 1);
            batch_tokens as f64 * stats.sigma
        }
        WeightScheme::Daro(weights) => {
            if stats.degenerate {
                0.0
            } else {
                weights.get(stats.pass_rate).unwrap_or(0.0)
            }
        }
    }
}
