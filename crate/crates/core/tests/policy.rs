mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{finite_difference_check, random_params, SampledBatch};
use daro_lab::policy::{
    evaluate_batch, mean_token_entropy, sample_response, sequence_logprobs, sequence_ratio_per_token,
    token_distribution, Context, PolicyParams, EOS,
};
use daro_lab::surrogate::closed_form_at_unity;
use daro_lab::ClipConfig;

#[test]
fn analytic_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let report = finite_difference_check(&mut rng, 20, 1e-5);
    assert!(report.checked > 500, "{report:?}");
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn sampled_token_frequencies_match_the_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = random_params(16, 4, 1.0, &mut rng);
    let cue = [3u32, 9];
    let probs = token_distribution(&params, &Context::start(&cue), 1.0);
    let n = 100_000;
    let mut counts = [0usize; 16];
    for _ in 0..n {
        let t = sample_response(&params, 0, &cue, 1, 1.0, &mut rng);
        counts[t.tokens[0] as usize] += 1;
    }
    for (j, &p) in probs.iter().enumerate() {
        let freq = counts[j] as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() <= 3.0 * se, "token {j}: {freq} vs {p}");
    }
}

#[test]
fn distributions_are_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let v = rng.random_range(3..20);
        let params = random_params(v, rng.random_range(1..10), 5.0, &mut rng);
        let cue: Vec<u32> = (0..rng.random_range(0..5)).map(|_| rng.random_range(1..v as u32)).collect();
        let mut ctx = Context::start(&cue);
        for _ in 0..rng.random_range(0..12) {
            ctx = ctx.next(rng.random_range(0..v as u32));
        }
        let p = token_distribution(&params, &ctx, rng.random_range(0.3..2.0));
        assert!(p.iter().all(|&x| x >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn ratios_against_brute_force_log_probs() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let snapshot = random_params(8, 6, 1.0, &mut rng);
    let cue = [2u32, 5, 7];
    let traj = sample_response(&snapshot, 1, &cue, 8, 1.0, &mut rng);
    let same = sequence_ratio_per_token(&snapshot, &cue, &traj.tokens, &traj.logprobs, 1.0);
    assert!(same.iter().all(|&r| r == 1.0));

    let mut live = snapshot.clone();
    for x in live.as_mut_slice() {
        *x += rng.random_range(-0.3..0.3);
    }
    let got = sequence_ratio_per_token(&live, &cue, &traj.tokens, &traj.logprobs, 1.0);
    // recompute both log-probabilities from raw logits
    let brute = |p: &PolicyParams| -> Vec<f64> {
        let mut ctx = Context::start(&cue);
        traj.tokens
            .iter()
            .map(|&t| {
                let rows = p.active_rows(&ctx);
                let logits: Vec<f64> = (0..p.vocab())
                    .map(|j| rows.iter().map(|&r| p.row(r)[j]).sum())
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                ctx = ctx.next(t);
                logits[t as usize] - z.ln()
            })
            .collect()
    };
    for ((r, new), old) in got.iter().zip(brute(&live)).zip(brute(&snapshot)) {
        assert!((r - (new - old).exp()).abs() <= 1e-12);
    }
    assert_eq!(sequence_logprobs(&snapshot, &cue, &traj.tokens, 1.0), traj.logprobs);

    // a log-prob gap of ln 2 is a ratio of 2
    let mut shifted = traj.logprobs.clone();
    shifted[0] -= 2f64.ln();
    let r = sequence_ratio_per_token(&snapshot, &cue, &traj.tokens, &shifted, 1.0);
    assert!((r[0] - 2.0).abs() < 1e-12);
}

#[test]
fn snapshot_loss_equals_the_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = ClipConfig::default();
    for _ in 0..20 {
        let snapshot = random_params(6, 5, 1.0, &mut rng);
        let sampled = SampledBatch::new(&snapshot, 5, 4, 6, &mut rng);
        let unit = vec![1.0; 5];
        let eval = evaluate_batch(&snapshot, &sampled.batch(&unit), &cfg, 1.0, false).unwrap();
        let total = eval.breakdown.batch_token_total;
        let expected: f64 = sampled
            .stats
            .iter()
            .filter(|s| !s.degenerate)
            .map(|s| closed_form_at_unity(s, total).unwrap())
            .sum();
        assert!((eval.loss - expected).abs() <= 1e-12);
        assert_eq!(eval.max_ratio_deviation, 0.0);
    }
}

#[test]
fn zero_and_fully_clipped_batches_have_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = ClipConfig::default();
    let snapshot = random_params(5, 3, 1.0, &mut rng);
    let sampled = SampledBatch::new(&snapshot, 4, 4, 5, &mut rng);
    let zero = vec![0.0; 4];
    let g = evaluate_batch(&snapshot, &sampled.batch(&zero), &cfg, 1.0, true).unwrap().grad.unwrap();
    assert!(g.iter().all(|&x| x == 0.0));

    // Ratios of e^5 for positives and e^-5 for negatives put every token on
    // its flat side. The shifted cache is only used to form ratios.
    let mut clipped = SampledBatch {
        cues: sampled.cues.clone(),
        groups: sampled.groups.clone(),
        stats: sampled.stats.clone(),
    };
    for g in &mut clipped.groups {
        for (lps, &r) in g.rollout_logprobs.iter_mut().zip(&g.rewards) {
            for lp in lps.iter_mut() {
                *lp += if r == 1 { -5.0 } else { 5.0 };
            }
        }
    }
    let ones = vec![1.0; 4];
    let eval = evaluate_batch(&snapshot, &clipped.batch(&ones), &cfg, 1.0, true).unwrap();
    let live_tokens: usize = clipped
        .groups
        .iter()
        .zip(&clipped.stats)
        .filter(|(_, s)| !s.degenerate)
        .map(|(g, _)| g.token_count())
        .sum();
    assert_eq!(eval.clipped_tokens, live_tokens);
    assert!(eval.grad.unwrap().iter().all(|&x| x == 0.0));
}

#[test]
fn entropy_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let uniform = PolicyParams::zeros(16, 2).unwrap();
    let cue = [1u32];
    let h = mean_token_entropy(&uniform, [Context::start(&cue)], 1.0);
    assert!((h - 2.772_588_7).abs() < 5e-8);

    let mut sharp = PolicyParams::zeros(4, 1).unwrap();
    sharp.as_mut_slice()[4 + 2] = 800.0;
    assert!(mean_token_entropy(&sharp, [Context::start(&cue)], 1.0).abs() < 1e-12);

    let params = random_params(7, 3, 2.0, &mut rng);
    let cue = [1u32, 4, 6];
    let mut ctxs = vec![Context::start(&cue)];
    for t in [4u32, 4, 2, 6] {
        let next = ctxs.last().unwrap().next(t);
        ctxs.push(next);
    }
    let brute: f64 = ctxs
        .iter()
        .map(|c| {
            -token_distribution(&params, c, 1.0)
                .iter()
                .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
                .sum::<f64>()
        })
        .sum::<f64>()
        / ctxs.len() as f64;
    assert!((mean_token_entropy(&params, ctxs.iter().copied(), 1.0) - brute).abs() <= 1e-12);
}

#[test]
fn eos_prior_stops_immediately() {
    let mut p = PolicyParams::zeros(5, 2).unwrap();
    // previous-token row for the start marker puts all mass on EOS
    let start_row = 5 + 2 + EOS as usize;
    p.as_mut_slice()[start_row * 5] = 60.0;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..100 {
        let t = sample_response(&p, 0, &[1, 2], 6, 1.0, &mut rng);
        assert_eq!(t.tokens, vec![EOS]);
        assert!(t.terminated);
    }
}
