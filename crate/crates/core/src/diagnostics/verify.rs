//! Self-contained property suite: every check compares the library against
//! an independent brute-force computation and reports the measured error.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::daro::{DaroConfig, DaroWeights};
use crate::error::Result;
use crate::group_stats::{batch_reward_std, group_stats, GroupStats, PassRate, ResponseGroup};
use crate::policy::{
    evaluate_batch, sample_response, sequence_logprobs, sequence_ratio_per_token, BatchGroup,
    PolicyParams,
};
use crate::rng;
use crate::surrogate::{
    clip_branch, clip_surrogate, closed_form_at_unity, hoeffding_bound, paper_scale_approx,
    weighted_token_mean_loss, ClipBranch, ClipConfig, Side, WeightedGroup,
};

/// Deliberate faults used to confirm that the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mutation {
    /// Flip the sign of the negative-response advantage.
    FlipAdvNegSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerifyOptions {
    pub seed: u64,
    pub mutation: Option<Mutation>,
    /// Monte-Carlo trials per Hoeffding cell.
    pub hoeffding_trials: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            mutation: None,
            hoeffding_trials: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    /// Worst measured error (or the headline measurement).
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub properties: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.properties.iter().all(|p| p.passed)
    }

    pub fn get(&self, name: &str) -> Option<&PropertyResult> {
        self.properties.iter().find(|p| p.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

fn result(name: &str, measured: f64, tolerance: f64, detail: String) -> PropertyResult {
    PropertyResult {
        name: name.into(),
        passed: measured <= tolerance,
        measured,
        tolerance,
        detail,
    }
}

pub fn verify_suite(options: &VerifyOptions) -> Result<VerifyReport> {
    let mut rng = rng::stream(options.seed, &[0xfeed]);
    let homogeneity = clip_homogeneity(&mut rng);
    let (lipo, drgrpo) = scheme_equivalence(&mut rng)?;
    let properties = vec![
        advantage_oracle(options.mutation),
        homogeneity,
        lipo,
        drgrpo,
        gradient_check(&mut rng, 20)?,
        daro_stationarity(&mut rng)?,
        ratio_one_closed_form(&mut rng)?,
        hoeffding_monte_carlo(&mut rng, options.hoeffding_trials)?,
    ];
    Ok(VerifyReport { properties })
}

/// Mean, population std and standardized rewards, straight from the definition.
pub fn brute_force_stats(rewards: &[u8]) -> (f64, f64, Vec<f64>) {
    let n = rewards.len() as f64;
    let mean = rewards.iter().map(|&r| f64::from(r)).sum::<f64>() / n;
    let var = rewards.iter().map(|&r| (f64::from(r) - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let adv = rewards
        .iter()
        .map(|&r| if std > 0.0 { (f64::from(r) - mean) / std } else { 0.0 })
        .collect();
    (mean, std, adv)
}

fn unit_group(rewards: Vec<u8>) -> ResponseGroup {
    let k = rewards.len();
    ResponseGroup {
        prompt_id: 0,
        responses: vec![vec![1]; k],
        rewards,
        rollout_logprobs: vec![vec![0.0]; k],
    }
}

fn advantage_oracle(mutation: Option<Mutation>) -> PropertyResult {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for group_size in [2u32, 4, 8, 16] {
        for k in 1..group_size {
            let rewards: Vec<u8> = (0..group_size).map(|i| u8::from(i < k)).collect();
            let mut stats = group_stats(&unit_group(rewards.clone()));
            if mutation == Some(Mutation::FlipAdvNegSign) {
                stats.adv_neg = -stats.adv_neg;
            }
            let (mean, std, adv) = brute_force_stats(&rewards);
            worst = worst.max((stats.mu - mean).abs()).max((stats.sigma - std).abs());
            for (&r, &a) in rewards.iter().zip(&adv) {
                worst = worst.max((stats.advantage(r) - a).abs());
            }
            cases += 1;
        }
    }
    result(
        "advantage_oracle",
        worst,
        1e-12,
        format!("{cases} (K, k) cases, max abs error"),
    )
}

fn clip_homogeneity(rng: &mut ChaCha8Rng) -> PropertyResult {
    let cfg = ClipConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let a: f64 = rng.random_range(-3.0..3.0);
        let r: f64 = rng.random_range(0.0..2.5);
        let c: f64 = rng.random_range(0.01..10.0);
        let lhs = clip_surrogate(c * a, r, &cfg);
        let rhs = c * clip_surrogate(a, r, &cfg);
        worst = worst.max((lhs - rhs).abs() / rhs.abs().max(1.0));
    }
    result(
        "clip_positive_homogeneity",
        worst,
        1e-12,
        "10000 random (A, r, c) triples, max relative error".into(),
    )
}

struct RandomBatch {
    groups: Vec<ResponseGroup>,
    stats: Vec<GroupStats>,
    ratios: Vec<Vec<Vec<f64>>>,
}

fn random_batch(rng: &mut ChaCha8Rng, unit_ratios: bool) -> RandomBatch {
    let n_groups = rng.random_range(1..6);
    let group_size = [2usize, 4, 8][rng.random_range(0..3)];
    let mut groups = Vec::with_capacity(n_groups);
    let mut ratios = Vec::with_capacity(n_groups);
    for g in 0..n_groups {
        let mut responses = Vec::with_capacity(group_size);
        let mut rewards = Vec::with_capacity(group_size);
        let mut lps = Vec::with_capacity(group_size);
        let mut rows = Vec::with_capacity(group_size);
        for _ in 0..group_size {
            let len = rng.random_range(1..9);
            responses.push((0..len).map(|_| rng.random_range(1..8)).collect::<Vec<u32>>());
            rewards.push(u8::from(rng.random_bool(0.5)));
            lps.push(vec![-1.0; len]);
            rows.push(
                (0..len)
                    .map(|_| if unit_ratios { 1.0 } else { rng.random_range(0.5..1.6) })
                    .collect::<Vec<f64>>(),
            );
        }
        groups.push(ResponseGroup {
            prompt_id: g as u64,
            responses,
            rewards,
            rollout_logprobs: lps,
        });
        ratios.push(rows);
    }
    let stats = groups.iter().map(group_stats).collect();
    RandomBatch { groups, stats, ratios }
}

/// Unified loss with LIPO and Dr.GRPO weights against their original forms.
fn scheme_equivalence(rng: &mut ChaCha8Rng) -> Result<(PropertyResult, PropertyResult)> {
    let cfg = ClipConfig::default();
    let (mut worst_lipo, mut worst_dr): (f64, f64) = (0.0, 0.0);
    let mut lipo_batches = 0;
    for _ in 0..100 {
        let b = random_batch(rng, false);
        let total_tokens: usize = b.groups.iter().map(ResponseGroup::token_count).sum();
        let n = b.groups.len() as f64;
        let k = b.groups[0].group_size() as f64;

        // Original Dr.GRPO: unnormalized advantage r - mu, averaged over the n K responses.
        let mut direct_dr = 0.0;
        for ((g, s), rows) in b.groups.iter().zip(&b.stats).zip(&b.ratios) {
            for (&r, row) in g.rewards.iter().zip(rows) {
                let a = f64::from(r) - s.mu;
                direct_dr += row.iter().map(|&q| clip_surrogate(a, q, &cfg)).sum::<f64>();
            }
        }
        direct_dr = -direct_dr / (n * k);
        let weighted: Vec<WeightedGroup<'_>> = b
            .groups
            .iter()
            .zip(&b.stats)
            .map(|(g, s)| WeightedGroup {
                group: g,
                stats: s,
                weight: total_tokens as f64 * s.sigma,
            })
            .collect();
        let (unified_dr, _) = weighted_token_mean_loss(&weighted, &b.ratios, &cfg)?;
        let scaled = unified_dr / (n * k);
        worst_dr = worst_dr.max((scaled - direct_dr).abs() / direct_dr.abs().max(1.0));

        // Original LIPO: rewards standardized by the pooled batch std, token mean.
        let Ok(sigma_hat) = batch_reward_std(&b.groups) else {
            continue;
        };
        lipo_batches += 1;
        let mut direct_lipo = 0.0;
        for ((g, s), rows) in b.groups.iter().zip(&b.stats).zip(&b.ratios) {
            for (&r, row) in g.rewards.iter().zip(rows) {
                let a = (f64::from(r) - s.mu) / sigma_hat;
                direct_lipo += row.iter().map(|&q| clip_surrogate(a, q, &cfg)).sum::<f64>();
            }
        }
        direct_lipo = -direct_lipo / total_tokens as f64;
        let weighted: Vec<WeightedGroup<'_>> = b
            .groups
            .iter()
            .zip(&b.stats)
            .map(|(g, s)| WeightedGroup {
                group: g,
                stats: s,
                weight: s.sigma / sigma_hat,
            })
            .collect();
        let (unified_lipo, _) = weighted_token_mean_loss(&weighted, &b.ratios, &cfg)?;
        worst_lipo = worst_lipo.max((unified_lipo - direct_lipo).abs() / direct_lipo.abs().max(1.0));
    }
    Ok((
        result(
            "lipo_equivalence",
            worst_lipo,
            1e-10,
            format!("{lipo_batches} random batches with non-constant rewards"),
        ),
        result(
            "drgrpo_equivalence",
            worst_dr,
            1e-10,
            "100 random batches; unified loss divided by n K".into(),
        ),
    ))
}

/// Random parameters, uniform in `[-scale, scale]`.
fn random_params(rng: &mut ChaCha8Rng, vocab: usize, positions: usize, scale: f64) -> PolicyParams {
    let f = 2 * vocab + positions;
    let m = (0..f * vocab).map(|_| rng.random_range(-scale..scale)).collect();
    PolicyParams::from_matrix(vocab, f, m).expect("consistent shape")
}

struct ToyProblem {
    cues: Vec<Vec<u32>>,
    groups: Vec<ResponseGroup>,
    stats: Vec<GroupStats>,
    weights: Vec<f64>,
    temperature: f64,
}

impl ToyProblem {
    fn batch(&self) -> Vec<BatchGroup<'_>> {
        self.cues
            .iter()
            .zip(&self.groups)
            .zip(&self.stats)
            .zip(&self.weights)
            .map(|(((c, g), s), &w)| BatchGroup {
                cue: c,
                group: g,
                stats: s,
                weight: w,
            })
            .collect()
    }

    fn branches(&self, params: &PolicyParams, cfg: &ClipConfig) -> Vec<ClipBranch> {
        let mut out = Vec::new();
        for ((cue, g), s) in self.cues.iter().zip(&self.groups).zip(&self.stats) {
            for ((tokens, lps), &r) in g.responses.iter().zip(&g.rollout_logprobs).zip(&g.rewards) {
                let adv = s.advantage(r);
                for q in sequence_ratio_per_token(params, cue, tokens, lps, self.temperature) {
                    out.push(clip_branch(adv, q, cfg));
                }
            }
        }
        out
    }
}

/// A random toy problem whose rollouts came from `old`.
fn toy_problem(rng: &mut ChaCha8Rng, old: &PolicyParams) -> ToyProblem {
    let vocab = old.vocab();
    let temperature = [1.0, 0.7, 1.3][rng.random_range(0..3)];
    let n_groups = rng.random_range(1..4);
    let group_size = rng.random_range(2..5);
    let mut cues = Vec::new();
    let mut groups = Vec::new();
    for g in 0..n_groups {
        let cue: Vec<u32> = (0..rng.random_range(1..4))
            .map(|_| rng.random_range(1..vocab as u32))
            .collect();
        let mut responses = Vec::new();
        let mut rewards = Vec::new();
        let mut lps = Vec::new();
        for _ in 0..group_size {
            let t = sample_response(old, g as u64, &cue, 5, temperature, rng);
            lps.push(sequence_logprobs(old, &cue, &t.tokens, temperature));
            responses.push(t.tokens);
            rewards.push(u8::from(rng.random_bool(0.5)));
        }
        cues.push(cue);
        groups.push(ResponseGroup {
            prompt_id: g as u64,
            responses,
            rewards,
            rollout_logprobs: lps,
        });
    }
    let stats = groups.iter().map(group_stats).collect();
    let weights = (0..n_groups).map(|_| rng.random_range(0.2..3.0)).collect();
    ToyProblem {
        cues,
        groups,
        stats,
        weights,
        temperature,
    }
}

/// Analytic gradient against central differences with step `1e-5`.
/// Coordinates whose perturbation changes any token's clip branch are
/// skipped; relative errors use an absolute floor of `1e-6`.
pub fn gradient_check_error(rng: &mut ChaCha8Rng, configs: usize) -> Result<(f64, usize, usize)> {
    let h = 1e-5;
    let cfg = ClipConfig::default();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for _ in 0..configs {
        let vocab = rng.random_range(3..7);
        let positions = rng.random_range(2..5);
        let old = random_params(rng, vocab, positions, 0.8);
        let problem = toy_problem(rng, &old);
        let mut params = old.clone();
        for v in params.as_mut_slice() {
            *v += rng.random_range(-0.25..0.25);
        }
        let batch = problem.batch();
        let analytic = evaluate_batch(&params, &batch, &cfg, problem.temperature, true)?
            .grad
            .expect("requested");
        for i in 0..analytic.len() {
            let mut plus = params.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = params.clone();
            minus.as_mut_slice()[i] -= h;
            if problem.branches(&plus, &cfg) != problem.branches(&minus, &cfg) {
                skipped += 1;
                continue;
            }
            let lp = evaluate_batch(&plus, &batch, &cfg, problem.temperature, false)?.loss;
            let lm = evaluate_batch(&minus, &batch, &cfg, problem.temperature, false)?.loss;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok((worst, checked, skipped))
}

fn gradient_check(rng: &mut ChaCha8Rng, configs: usize) -> Result<PropertyResult> {
    let (worst, checked, skipped) = gradient_check_error(rng, configs)?;
    Ok(result(
        "gradient_check",
        worst,
        1e-4,
        format!("{configs} toy configs, {checked} coordinates checked, {skipped} boundary-crossing skipped"),
    ))
}

/// Iterates weight updates on fixed losses until the step becomes negligible.
pub fn iterate_to_stationarity(weights: &mut DaroWeights, losses: &BTreeMap<PassRate, f64>, max_iters: usize) -> Result<usize> {
    let breakdown = crate::surrogate::GroupLossBreakdown {
        per_mu: losses
            .iter()
            .map(|(&mu, &l)| {
                (
                    mu,
                    crate::surrogate::BucketLoss {
                        loss: l,
                        ..Default::default()
                    },
                )
            })
            .collect(),
        batch_token_total: 1,
    };
    for it in 0..max_iters {
        let g = weights.weight_gradient(&breakdown)?;
        if g.values().all(|v| v.abs() < 1e-12) {
            return Ok(it);
        }
        weights.apply_weight_update(&g)?;
    }
    Ok(max_iters)
}

fn daro_stationarity(rng: &mut ChaCha8Rng) -> Result<PropertyResult> {
    let group_size = 8;
    let mut worst: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    let mut worst_identity: f64 = 0.0;
    for _ in 0..50 {
        let c = rng.random_range(0.5..2.0);
        let losses: BTreeMap<PassRate, f64> = PassRate::interior(group_size)
            .map(|mu| (mu, rng.random_range(0.2..5.0)))
            .collect();
        let mut w = DaroWeights::new(
            group_size,
            DaroConfig {
                c,
                lr: 0.05,
                ..DaroConfig::default()
            },
        )?;
        iterate_to_stationarity(&mut w, &losses, 20_000)?;
        let target = crate::daro::stationary_weights(&losses, c)?;
        for (mu, wstar) in &target {
            let got = w.get(*mu).expect("interior");
            worst = worst.max((got - wstar).abs() / wstar);
            worst_identity = worst_identity.max((wstar * losses[mu] - c).abs() / c);
        }
        let mut exact = w.clone();
        for (mu, wstar) in &target {
            exact.set(*mu, *wstar)?;
        }
        let breakdown = crate::surrogate::GroupLossBreakdown {
            per_mu: losses
                .iter()
                .map(|(&mu, &l)| {
                    (
                        mu,
                        crate::surrogate::BucketLoss {
                            loss: l,
                            ..Default::default()
                        },
                    )
                })
                .collect(),
            batch_token_total: 1,
        };
        for g in exact.weight_gradient(&breakdown)?.values() {
            worst_grad = worst_grad.max(g.abs());
        }
    }
    let passed = worst <= 1e-3 && worst_grad < 1e-10 && worst_identity <= 4.0 * f64::EPSILON;
    Ok(PropertyResult {
        name: "daro_stationarity".into(),
        passed,
        measured: worst,
        tolerance: 1e-3,
        detail: format!(
            "50 loss vectors; max |grad| at fixed point {worst_grad:.3e}; max |w* L - C| / C {worst_identity:.3e}"
        ),
    })
}

fn ratio_one_closed_form(rng: &mut ChaCha8Rng) -> Result<PropertyResult> {
    let cfg = ClipConfig::default();
    let mut worst: f64 = 0.0;
    let mut factors: BTreeMap<PassRate, (f64, f64)> = BTreeMap::new();
    for _ in 0..50 {
        let b = random_batch(rng, true);
        let weighted: Vec<WeightedGroup<'_>> = b
            .groups
            .iter()
            .zip(&b.stats)
            .map(|(g, s)| WeightedGroup {
                group: g,
                stats: s,
                weight: 1.0,
            })
            .collect();
        let (_, breakdown) = weighted_token_mean_loss(&weighted, &b.ratios, &cfg)?;
        let total = breakdown.batch_token_total;
        let mut expected: BTreeMap<PassRate, (f64, f64)> = BTreeMap::new();
        for s in b.stats.iter().filter(|s| !s.degenerate) {
            let e = expected.entry(s.pass_rate).or_default();
            e.0 += closed_form_at_unity(s, total)?;
            e.1 += paper_scale_approx(s, total)?;
        }
        for (mu, bucket) in &breakdown.per_mu {
            let (cf, ap) = expected[mu];
            worst = worst.max((bucket.loss - cf).abs());
            if ap != 0.0 {
                factors.insert(*mu, (bucket.loss, ap));
            }
        }
    }
    let detail = factors
        .iter()
        .map(|(mu, (l, a))| format!("{mu}: L/approx={:.4}", l / a))
        .collect::<Vec<_>>()
        .join("; ");
    Ok(result(
        "ratio_one_closed_form",
        worst,
        1e-12,
        format!("50 batches, max abs error; last observed factors {detail}"),
    ))
}

/// Monte-Carlo tail frequency of a sum of `count` uniforms on `[lo, hi]`
/// deviating from its mean by at least `delta`.
pub fn uniform_sum_tail(rng: &mut ChaCha8Rng, count: usize, lo: f64, hi: f64, delta: f64, trials: usize) -> f64 {
    let mean = count as f64 * 0.5 * (lo + hi);
    let hits = (0..trials)
        .filter(|_| {
            let s: f64 = (0..count).map(|_| rng.random_range(lo..=hi)).sum();
            (s - mean).abs() >= delta
        })
        .count();
    hits as f64 / trials as f64
}

fn hoeffding_monte_carlo(rng: &mut ChaCha8Rng, trials: usize) -> Result<PropertyResult> {
    let eps = 0.2;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut cells = 0;
    for &(k, group_size) in &[(1u32, 4u32), (2, 4), (4, 8), (7, 8)] {
        for &n in &[1usize, 4] {
            for &delta in &[0.5, 1.0, 2.0] {
                let mu = f64::from(k) / f64::from(group_size);
                let adv_pos = ((1.0 - mu) / mu).sqrt();
                let adv_neg = -(mu / (1.0 - mu)).sqrt();
                for side in [Side::Pos, Side::Neg] {
                    let (count, lo, hi) = match side {
                        Side::Pos => (k as usize * n, 0.0, (1.0 + eps) * adv_pos),
                        Side::Neg => ((group_size - k) as usize * n, (1.0 - eps) * adv_neg, 0.0),
                    };
                    let freq = uniform_sum_tail(rng, count, lo, hi, delta, trials);
                    let bound = hoeffding_bound(delta, n, k, group_size, eps, side)?;
                    let slack = 3.0 * (bound * (1.0 - bound) / trials as f64).sqrt();
                    worst_excess = worst_excess.max(freq - bound - slack);
                    cells += 1;
                }
            }
        }
    }
    Ok(PropertyResult {
        name: "hoeffding_monte_carlo".into(),
        passed: worst_excess <= 0.0,
        measured: worst_excess,
        tolerance: 0.0,
        detail: format!("{cells} cells x {trials} trials; max (frequency - bound - 3 sigma)"),
    })
}
