#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use daro_lab::group_stats::group_stats;
use daro_lab::surrogate::{clip_surrogate, weighted_token_mean_loss, ClipConfig, WeightedGroup};
use daro_lab::policy::{sample_response, BatchGroup, PolicyParams};
use daro_lab::{GroupStats, ResponseGroup};

pub fn random_params(vocab: usize, positions: usize, scale: f64, rng: &mut ChaCha8Rng) -> PolicyParams {
    let mut p = PolicyParams::zeros(vocab, positions).unwrap();
    for x in p.as_mut_slice() {
        *x = rng.random_range(-scale..scale);
    }
    p
}

/// A group whose response `i` has `lens[i]` tokens, all token 1, and
/// rollout log-probabilities of -1.
pub fn fixed_group(rewards: &[u8], lens: &[usize]) -> ResponseGroup {
    assert_eq!(rewards.len(), lens.len());
    ResponseGroup {
        prompt_id: 0,
        responses: lens.iter().map(|&l| vec![1; l]).collect(),
        rewards: rewards.to_vec(),
        rollout_logprobs: lens.iter().map(|&l| vec![-1.0; l]).collect(),
    }
}

/// Rewards with exactly `k` ones in random positions.
pub fn shuffled_rewards(k: usize, group_size: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut r: Vec<u8> = (0..group_size).map(|i| u8::from(i < k)).collect();
    for i in (1..r.len()).rev() {
        let j = rng.random_range(0..=i);
        r.swap(i, j);
    }
    r
}

/// Groups sampled from `snapshot` with random cues and random binary rewards.
pub struct SampledBatch {
    pub cues: Vec<Vec<u32>>,
    pub groups: Vec<ResponseGroup>,
    pub stats: Vec<GroupStats>,
}

impl SampledBatch {
    pub fn new(
        snapshot: &PolicyParams,
        n_groups: usize,
        group_size: usize,
        max_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let v = snapshot.vocab() as u32;
        let mut cues = Vec::new();
        let mut groups = Vec::new();
        for g in 0..n_groups {
            let d = rng.random_range(1..=3);
            let cue: Vec<u32> = (0..d).map(|_| rng.random_range(1..v)).collect();
            let k = rng.random_range(0..=group_size);
            let rewards = shuffled_rewards(k, group_size, rng);
            let mut responses = Vec::new();
            let mut lps = Vec::new();
            for _ in 0..group_size {
                let t = sample_response(snapshot, g as u64, &cue, max_len, 1.0, rng);
                responses.push(t.tokens);
                lps.push(t.logprobs);
            }
            groups.push(ResponseGroup::new(g as u64, responses, rewards, lps).unwrap());
            cues.push(cue);
        }
        let stats = groups.iter().map(group_stats).collect();
        Self { cues, groups, stats }
    }

    pub fn batch(&self, weights: &[f64]) -> Vec<BatchGroup<'_>> {
        self.groups
            .iter()
            .zip(&self.stats)
            .zip(&self.cues)
            .zip(weights)
            .map(|(((group, stats), cue), &weight)| BatchGroup {
                cue,
                group,
                stats,
                weight,
            })
            .collect()
    }
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

fn branch_signature(
    params: &PolicyParams,
    sampled: &SampledBatch,
    cfg: &daro_lab::ClipConfig,
) -> Vec<daro_lab::surrogate::ClipBranch> {
    let mut out = Vec::new();
    for ((g, s), cue) in sampled.groups.iter().zip(&sampled.stats).zip(&sampled.cues) {
        for ((tokens, lps), &reward) in g.responses.iter().zip(&g.rollout_logprobs).zip(&g.rewards) {
            let adv = s.advantage(reward);
            for r in daro_lab::policy::sequence_ratio_per_token(params, cue, tokens, lps, 1.0) {
                out.push(daro_lab::surrogate::clip_branch(adv, r, cfg));
            }
        }
    }
    out
}

/// Central differences with step `h` against `evaluate_batch` gradients on
/// `configs` random instances (V in {4, 8}, F <= 32, K in {4, 8}). Coordinates
/// whose perturbation moves any token across a clip bound are skipped.
pub fn finite_difference_check(rng: &mut ChaCha8Rng, configs: usize, h: f64) -> GradCheck {
    use daro_lab::policy::evaluate_batch;
    let cfg = daro_lab::ClipConfig::default();
    let mut out = GradCheck::default();
    for _ in 0..configs {
        let vocab = [4usize, 8][rng.random_range(0..2)];
        let positions = rng.random_range(1..=32 - 2 * vocab);
        let group_size = [4usize, 8][rng.random_range(0..2)];
        let n_groups = rng.random_range(1..=3);
        let snapshot = random_params(vocab, positions, 0.7, rng);
        let sampled = SampledBatch::new(&snapshot, n_groups, group_size, 5, rng);
        let mut live = snapshot.clone();
        for x in live.as_mut_slice() {
            *x += rng.random_range(-0.15..0.15);
        }
        let weights: Vec<f64> = (0..n_groups).map(|_| rng.random_range(0.2..3.0)).collect();
        let batch = sampled.batch(&weights);
        let analytic = evaluate_batch(&live, &batch, &cfg, 1.0, true).unwrap().grad.unwrap();
        let base = branch_signature(&live, &sampled, &cfg);
        let loss = |p: &PolicyParams| evaluate_batch(p, &batch, &cfg, 1.0, false).unwrap().loss;
        for i in 0..live.as_slice().len() {
            let mut plus = live.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = live.clone();
            minus.as_mut_slice()[i] -= h;
            if branch_signature(&plus, &sampled, &cfg) != base || branch_signature(&minus, &sampled, &cfg) != base {
                out.skipped += 1;
                continue;
            }
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            out.max_rel_error = out.max_rel_error.max((fd - analytic[i]).abs() / denom);
            out.checked += 1;
        }
    }
    out
}

/// Random groups with per-token ratios; `unit_ratios` pins every ratio to one.
pub struct RandomBatch {
    pub groups: Vec<ResponseGroup>,
    pub ratios: Vec<Vec<Vec<f64>>>,
}

pub fn random_batch(rng: &mut ChaCha8Rng, unit_ratios: bool) -> RandomBatch {
    let n = rng.random_range(1..8);
    let group_size = [2usize, 4, 8][rng.random_range(0..3)];
    let mut groups = Vec::new();
    let mut ratios = Vec::new();
    for _ in 0..n {
        let k = rng.random_range(0..=group_size);
        let rewards = shuffled_rewards(k, group_size, rng);
        let lens: Vec<usize> = (0..group_size).map(|_| rng.random_range(1..12)).collect();
        ratios.push(
            lens.iter()
                .map(|&l| {
                    (0..l)
                        .map(|_| if unit_ratios { 1.0 } else { rng.random_range(0.5..1.6) })
                        .collect()
                })
                .collect(),
        );
        groups.push(fixed_group(&rewards, &lens));
    }
    RandomBatch { groups, ratios }
}

/// Token-mean loss with a per-group weight `weight(stats, batch_tokens)`.
pub fn unified(b: &RandomBatch, weight: impl Fn(&GroupStats, usize) -> f64) -> (f64, usize) {
    let stats: Vec<GroupStats> = b.groups.iter().map(group_stats).collect();
    let total: usize = b.groups.iter().map(ResponseGroup::token_count).sum();
    let wg: Vec<WeightedGroup<'_>> = b
        .groups
        .iter()
        .zip(&stats)
        .map(|(group, stats)| WeightedGroup {
            group,
            stats,
            weight: weight(stats, total),
        })
        .collect();
    (weighted_token_mean_loss(&wg, &b.ratios, &ClipConfig::default()).unwrap().0, total)
}

/// Loss written with batch-std advantages `(r - mean) / sigma_hat`.
pub fn lipo_direct_loss(b: &RandomBatch, sigma_hat: f64, cfg: &ClipConfig) -> f64 {
    direct_loss(b, cfg, |adv| adv / sigma_hat) / b.groups.iter().map(ResponseGroup::token_count).sum::<usize>() as f64
}

/// Loss written with unnormalized advantages `r - mean`, averaged per response.
pub fn drgrpo_direct_loss(b: &RandomBatch, cfg: &ClipConfig) -> f64 {
    let responses: usize = b.groups.iter().map(|g| g.rewards.len()).sum();
    direct_loss(b, cfg, |adv| adv) / responses as f64
}

fn direct_loss(b: &RandomBatch, cfg: &ClipConfig, scale: impl Fn(f64) -> f64) -> f64 {
    let mut sum = 0.0;
    for (g, rg) in b.groups.iter().zip(&b.ratios) {
        let mean = g.rewards.iter().map(|&r| f64::from(r)).sum::<f64>() / g.rewards.len() as f64;
        for (&r, row) in g.rewards.iter().zip(rg) {
            let adv = scale(f64::from(r) - mean);
            sum += row.iter().map(|&x| clip_surrogate(adv, x, cfg)).sum::<f64>();
        }
    }
    -sum
}
