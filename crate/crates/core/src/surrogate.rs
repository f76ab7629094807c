//! Clipped surrogate, token-mean batch loss and its per-pass-rate breakdown.
//!
//! The batch loss for a set of groups `g` with weights `w_g` is
//!
//! ```text
//! loss = -(1/L) * sum_g w_g * sum_i sum_t f(A_i, r_{i,t})
//! ```
//!
//! where `L` is the token total of the batch and `f` is the clipped
//! surrogate. The breakdown keeps the same sum per pass rate with unit
//! weights, so `sum_mu L_mu` equals the unweighted token-mean loss.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::group_stats::{GroupStats, PassRate, ResponseGroup};

/// Ratios closer than this to a clip bound count as sitting on the boundary.
pub const BOUNDARY_TOL: f64 = 1e-9;

/// Which form the `A < 0` branch of the surrogate takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum NegativeBranch {
    /// `min(r A, (1 - eps_low) A)`: the pessimistic PPO bound, identical to
    /// `min(r A, clip(r, 1 - eps_low, 1 + eps_high) A)`. Satisfies `f(A, 1) = A`.
    #[default]
    Pessimistic,
    /// `max(r A, (1 - eps_low) A)`: bounded in `[(1 - eps_low) A, 0]`, but
    /// `f(A, 1) = (1 - eps_low) A`, so negatives are flat around `r = 1`.
    Bounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub negative_branch: NegativeBranch,
}

impl ClipConfig {
    pub fn new(eps_low: f64, eps_high: f64) -> Result<Self> {
        if !(eps_low > 0.0 && eps_low < 1.0) {
            return Err(Error::Config(format!("eps_low = {eps_low} must lie in (0, 1)")));
        }
        if !(eps_high >= eps_low) {
            return Err(Error::Config(format!(
                "eps_high = {eps_high} must be >= eps_low = {eps_low}"
            )));
        }
        Ok(Self {
            eps_low,
            eps_high,
            negative_branch: NegativeBranch::Pessimistic,
        })
    }

    pub fn symmetric(eps: f64) -> Result<Self> {
        Self::new(eps, eps)
    }

    pub fn with_negative_branch(mut self, branch: NegativeBranch) -> Self {
        self.negative_branch = branch;
        self
    }

    /// The ratio bound that applies for an advantage of the given sign.
    pub fn bound(&self, advantage: f64) -> f64 {
        if advantage > 0.0 {
            1.0 + self.eps_high
        } else {
            1.0 - self.eps_low
        }
    }
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
            negative_branch: NegativeBranch::Pessimistic,
        }
    }
}

/// Which side of the surrogate is active for one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipBranch {
    /// `A = 0`; the surrogate is identically zero.
    Zero,
    /// `f = r A`, differentiable in the ratio.
    Unclipped,
    /// `f = bound * A`, constant in the ratio.
    Clipped,
}

/// Active branch; exact boundaries resolve to [`ClipBranch::Unclipped`].
pub fn clip_branch(advantage: f64, ratio: f64, cfg: &ClipConfig) -> ClipBranch {
    if advantage == 0.0 {
        return ClipBranch::Zero;
    }
    let bound = cfg.bound(advantage);
    let unclipped = if advantage > 0.0 {
        ratio <= bound
    } else {
        match cfg.negative_branch {
            NegativeBranch::Pessimistic => ratio >= bound,
            NegativeBranch::Bounded => ratio <= bound,
        }
    };
    if unclipped {
        ClipBranch::Unclipped
    } else {
        ClipBranch::Clipped
    }
}

pub fn is_on_boundary(advantage: f64, ratio: f64, cfg: &ClipConfig) -> bool {
    advantage != 0.0 && (ratio - cfg.bound(advantage)).abs() < BOUNDARY_TOL
}

/// Clipped surrogate `f(A, r)`.
pub fn clip_surrogate(advantage: f64, ratio: f64, cfg: &ClipConfig) -> f64 {
    match clip_branch(advantage, ratio, cfg) {
        ClipBranch::Zero => 0.0,
        ClipBranch::Unclipped => ratio * advantage,
        ClipBranch::Clipped => cfg.bound(advantage) * advantage,
    }
}

/// Whether `f(c A, r) = c f(A, r)` holds to 1e-12 relative.
pub fn positive_homogeneity_check(advantage: f64, ratio: f64, c: f64, cfg: &ClipConfig) -> bool {
    let lhs = clip_surrogate(c * advantage, ratio, cfg);
    let rhs = c * clip_surrogate(advantage, ratio, cfg);
    (lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE)
}

/// A group entering the batch loss with its statistics and scheme weight.
#[derive(Debug, Clone, Copy)]
pub struct WeightedGroup<'a> {
    pub group: &'a ResponseGroup,
    pub stats: &'a GroupStats,
    pub weight: f64,
}

/// Unweighted loss of one pass-rate bucket.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct BucketLoss {
    pub loss: f64,
    pub token_count: usize,
    pub group_count: usize,
    pub len_pos: usize,
    pub len_neg: usize,
}

/// Per-pass-rate split of a batch loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GroupLossBreakdown {
    pub per_mu: BTreeMap<PassRate, BucketLoss>,
    pub batch_token_total: usize,
}

impl GroupLossBreakdown {
    /// `sum_mu L_mu`.
    pub fn unweighted_total(&self) -> f64 {
        self.per_mu.values().map(|b| b.loss).sum()
    }

    pub fn losses(&self) -> BTreeMap<PassRate, f64> {
        self.per_mu.iter().map(|(&mu, b)| (mu, b.loss)).collect()
    }

    /// Ratio-one closed form of each bucket.
    pub fn closed_forms(&self) -> BTreeMap<PassRate, f64> {
        self.per_mu
            .iter()
            .map(|(&mu, b)| {
                let v = closed_form_from_lengths(mu, b.len_pos, b.len_neg, self.batch_token_total)
                    .expect("breakdown buckets are non-degenerate");
                (mu, v)
            })
            .collect()
    }
}

/// Token-mean weighted loss and its unweighted per-pass-rate breakdown.
///
/// `ratios[g][i][t]` is the probability ratio of token `t` of response `i`
/// of group `g`.
pub fn weighted_token_mean_loss(
    groups: &[WeightedGroup<'_>],
    ratios: &[Vec<Vec<f64>>],
    cfg: &ClipConfig,
) -> Result<(f64, GroupLossBreakdown)> {
    if ratios.len() != groups.len() {
        return Err(Error::Misaligned(format!(
            "{} groups but {} ratio sets",
            groups.len(),
            ratios.len()
        )));
    }
    let batch_tokens: usize = groups.iter().map(|g| g.group.token_count()).sum();
    let mut breakdown = GroupLossBreakdown {
        per_mu: BTreeMap::new(),
        batch_token_total: batch_tokens,
    };
    if batch_tokens == 0 {
        return Ok((0.0, breakdown));
    }
    let norm = batch_tokens as f64;

    let mut weighted_sum = 0.0;
    for (gi, (wg, group_ratios)) in groups.iter().zip(ratios).enumerate() {
        let group = wg.group;
        if group_ratios.len() != group.responses.len() {
            return Err(Error::Misaligned(format!(
                "group {gi}: {} responses but {} ratio rows",
                group.responses.len(),
                group_ratios.len()
            )));
        }
        let mut group_sum = 0.0;
        for (i, (tokens, row)) in group.responses.iter().zip(group_ratios).enumerate() {
            if tokens.len() != row.len() {
                return Err(Error::Misaligned(format!(
                    "group {gi} response {i}: {} tokens but {} ratios",
                    tokens.len(),
                    row.len()
                )));
            }
            let adv = wg.stats.advantage(group.rewards[i]);
            group_sum += row.iter().map(|&r| clip_surrogate(adv, r, cfg)).sum::<f64>();
        }
        weighted_sum += wg.weight * group_sum;

        if !wg.stats.degenerate {
            let bucket = breakdown.per_mu.entry(wg.stats.pass_rate).or_default();
            bucket.loss -= group_sum / norm;
            bucket.token_count += group.token_count();
            bucket.group_count += 1;
            bucket.len_pos += wg.stats.len_pos;
            bucket.len_neg += wg.stats.len_neg;
        }
    }
    Ok((-weighted_sum / norm, breakdown))
}

fn require_interior(pass_rate: PassRate) -> Result<()> {
    if pass_rate.is_degenerate() {
        Err(Error::DegeneratePassRate(pass_rate))
    } else {
        Ok(())
    }
}

/// Exact group loss when every ratio equals one:
/// `-(A+ len_pos + A- len_neg) / L`.
pub fn closed_form_at_unity(stats: &GroupStats, batch_token_total: usize) -> Result<f64> {
    closed_form_from_lengths(stats.pass_rate, stats.len_pos, stats.len_neg, batch_token_total)
}

/// [`closed_form_at_unity`] from length tallies; linear in the tallies, so it
/// also applies to whole pass-rate buckets.
pub fn closed_form_from_lengths(
    pass_rate: PassRate,
    len_pos: usize,
    len_neg: usize,
    batch_token_total: usize,
) -> Result<f64> {
    require_interior(pass_rate)?;
    if batch_token_total < len_pos + len_neg {
        return Err(Error::Misaligned(format!(
            "batch token total {batch_token_total} < {} group tokens",
            len_pos + len_neg
        )));
    }
    let mu = pass_rate.value();
    let adv_pos = ((1.0 - mu) / mu).sqrt();
    let adv_neg = -(mu / (1.0 - mu)).sqrt();
    Ok(-(adv_pos * len_pos as f64 + adv_neg * len_neg as f64) / batch_token_total as f64)
}

/// Length-imbalance approximation `(len_pos - len_neg) / L * sqrt(mu (1 - mu))`.
pub fn paper_scale_approx(stats: &GroupStats, batch_token_total: usize) -> Result<f64> {
    approx_from_lengths(stats.pass_rate, stats.len_pos, stats.len_neg, batch_token_total)
}

pub fn approx_from_lengths(
    pass_rate: PassRate,
    len_pos: usize,
    len_neg: usize,
    batch_token_total: usize,
) -> Result<f64> {
    require_interior(pass_rate)?;
    let mu = pass_rate.value();
    Ok((len_pos as f64 - len_neg as f64) / batch_token_total as f64 * (mu * (1.0 - mu)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Side {
    Pos,
    Neg,
}

/// Hoeffding tail bound on the deviation of the positive or negative
/// partial loss of a bucket of `n_groups` groups with `k` of `group_size`
/// correct, capped at 1.
pub fn hoeffding_bound(
    delta: f64,
    n_groups: usize,
    k: u32,
    group_size: u32,
    eps: f64,
    side: Side,
) -> Result<f64> {
    let pass_rate = PassRate::new(k.min(group_size), group_size);
    require_interior(pass_rate)?;
    if n_groups == 0 {
        return Err(Error::Config("n_groups must be >= 1".into()));
    }
    let n = n_groups as f64;
    let width_sq_sum = match side {
        Side::Pos => n * f64::from(group_size - k) * (1.0 + eps).powi(2),
        Side::Neg => f64::from(k) * n * (1.0 - eps).powi(2),
    };
    Ok((2.0 * (-2.0 * delta * delta / width_sq_sum).exp()).min(1.0))
}
