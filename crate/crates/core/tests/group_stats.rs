mod common;

use proptest::prelude::*;

use common::fixed_group;
use daro_lab::daro::{DaroConfig, DaroWeights};
use daro_lab::group_stats::{batch_reward_std, group_stats, scheme_weight, WeightScheme};
use daro_lab::{Error, PassRate, ResponseGroup};

/// Mean, population std and `(r - mean) / std` computed from scratch.
fn reference_stats(rewards: &[u8]) -> (f64, f64, Vec<f64>) {
    let n = rewards.len() as f64;
    let values: Vec<f64> = rewards.iter().map(|&r| f64::from(r)).collect();
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let adv = values
        .iter()
        .map(|v| if std == 0.0 { 0.0 } else { (v - mean) / std })
        .collect();
    (mean, std, adv)
}

#[test]
fn matches_reference_for_every_group_size_and_count() {
    for group_size in [2usize, 4, 8, 16] {
        for k in 0..=group_size {
            let rewards: Vec<u8> = (0..group_size).map(|i| u8::from(i < k)).collect();
            let lens: Vec<usize> = (1..=group_size).collect();
            let s = group_stats(&fixed_group(&rewards, &lens));
            let (mean, std, adv) = reference_stats(&rewards);
            assert!((s.mu - mean).abs() <= 1e-12, "K={group_size} k={k}");
            assert!((s.sigma - std).abs() <= 1e-12, "K={group_size} k={k}");
            for (i, &r) in rewards.iter().enumerate() {
                assert!((s.advantage(r) - adv[i]).abs() <= 1e-12, "K={group_size} k={k} i={i}");
            }
            assert_eq!(s.len_pos, (1..=k).sum::<usize>());
            assert_eq!(s.len_neg, (k + 1..=group_size).sum::<usize>());
            assert_eq!(s.degenerate, k == 0 || k == group_size);
        }
    }
}

#[test]
fn worked_examples() {
    let half = group_stats(&fixed_group(&[1, 1, 1, 1, 0, 0, 0, 0], &[1; 8]));
    assert_eq!((half.mu, half.sigma, half.adv_pos, half.adv_neg), (0.5, 0.5, 1.0, -1.0));

    let quarter = group_stats(&fixed_group(&[1, 1, 0, 0, 0, 0, 0, 0], &[1; 8]));
    assert_eq!(quarter.mu, 0.25);
    assert!((quarter.sigma - 0.433_012_7).abs() < 5e-8);
    assert!((quarter.adv_pos - 1.732_050_8).abs() < 5e-8);
    assert!((quarter.adv_neg + 0.577_350_3).abs() < 5e-8);

    let all = group_stats(&fixed_group(&[1; 8], &[1; 8]));
    assert_eq!((all.mu, all.sigma, all.adv_pos, all.adv_neg), (1.0, 0.0, 0.0, 0.0));
    assert!(all.degenerate);
}

#[test]
fn pooled_batch_std() {
    let a = fixed_group(&[1, 1, 0, 0], &[1; 4]);
    let b = fixed_group(&[1, 0, 0, 0], &[1; 4]);
    let s = batch_reward_std([&a, &b]).unwrap();
    assert!((s - 0.484_122_9).abs() < 5e-8);
    // brute force over the eight pooled rewards
    let (_, std, _) = reference_stats(&[1, 1, 0, 0, 1, 0, 0, 0]);
    assert!((s - std).abs() < 1e-15);

    assert_eq!(batch_reward_std([&fixed_group(&[1, 0], &[1, 1])]).unwrap(), 0.5);
    assert!(matches!(
        batch_reward_std([&fixed_group(&[1, 1, 1], &[1; 3])]),
        Err(Error::DegenerateBatch)
    ));
}

#[test]
fn scheme_weight_examples() {
    let quarter = group_stats(&fixed_group(&[1, 1, 0, 0, 0, 0, 0, 0], &[1; 8]));
    let full = group_stats(&fixed_group(&[1; 8], &[1; 8]));
    assert_eq!(scheme_weight(&WeightScheme::Grpo, &quarter), 1.0);
    assert_eq!(scheme_weight(&WeightScheme::Grpo, &full), 1.0);
    assert_eq!(scheme_weight(&WeightScheme::Dapo, &full), 0.0);
    assert_eq!(scheme_weight(&WeightScheme::Dapo, &quarter), 1.0);

    let dr = scheme_weight(&WeightScheme::DrGrpo { batch_tokens: 1000 }, &quarter);
    assert!((dr - 433.012_7).abs() < 5e-5);
    let lipo = scheme_weight(&WeightScheme::Lipo { batch_std: 0.5 }, &quarter);
    assert!((lipo - 0.866_025_4).abs() < 5e-8);

    let mut w = DaroWeights::new(8, DaroConfig::default()).unwrap();
    w.set(PassRate::new(2, 8), 3.5).unwrap();
    assert_eq!(scheme_weight(&WeightScheme::Daro(&w), &quarter), 3.5);
    assert_eq!(scheme_weight(&WeightScheme::Daro(&w), &full), 0.0);
}

#[test]
fn lipo_and_drgrpo_weights_are_proportional_to_sigma() {
    for group_size in [4usize, 8, 16] {
        let ratios: Vec<(f64, f64)> = (1..group_size)
            .map(|k| {
                let rewards: Vec<u8> = (0..group_size).map(|i| u8::from(i < k)).collect();
                let s = group_stats(&fixed_group(&rewards, &vec![2; group_size]));
                let m = s.mu;
                let root = (m * (1.0 - m)).sqrt();
                (
                    scheme_weight(&WeightScheme::Lipo { batch_std: 0.37 }, &s) / root,
                    scheme_weight(&WeightScheme::DrGrpo { batch_tokens: 640 }, &s) / root,
                )
            })
            .collect();
        for &(l, d) in &ratios {
            assert!((l - ratios[0].0).abs() <= 1e-12 * ratios[0].0);
            assert!((d - ratios[0].1).abs() <= 1e-12 * ratios[0].1);
        }
    }
}

#[test]
fn malformed_groups_are_rejected() {
    let ok = |rewards: Vec<u8>, lps: Vec<Vec<f64>>, responses: Vec<Vec<u32>>| {
        ResponseGroup::new(0, responses, rewards, lps)
    };
    assert!(ok(vec![1], vec![vec![-1.0]], vec![vec![1]]).is_err());
    assert!(ok(vec![1, 2], vec![vec![-1.0]; 2], vec![vec![1]; 2]).is_err());
    assert!(ok(vec![1, 0], vec![vec![-1.0], vec![0.5]], vec![vec![1]; 2]).is_err());
    assert!(ok(vec![1, 0], vec![vec![-1.0], vec![f64::NAN]], vec![vec![1]; 2]).is_err());
    assert!(ok(vec![1, 0], vec![vec![-1.0], vec![-1.0, -1.0]], vec![vec![1]; 2]).is_err());
    assert!(ok(vec![1, 0], vec![vec![-1.0], vec![]], vec![vec![1], vec![]]).is_err());
    assert!(ok(vec![1, 0, 0], vec![vec![-1.0]; 2], vec![vec![1]; 2]).is_err());
    assert!(ok(vec![1, 0], vec![vec![-1.0]; 2], vec![vec![1]; 2]).is_ok());
}

proptest! {
    #[test]
    fn advantages_are_permutation_invariant_and_zero_mean(
        rewards in proptest::collection::vec(0u8..=1, 2..24),
        rotate in 0usize..24,
    ) {
        let lens = vec![1; rewards.len()];
        let s = group_stats(&fixed_group(&rewards, &lens));
        let mut permuted = rewards.clone();
        let n = permuted.len();
        permuted.rotate_left(rotate % n);
        permuted.reverse();
        let p = group_stats(&fixed_group(&permuted, &lens));
        prop_assert_eq!(s.adv_pos, p.adv_pos);
        prop_assert_eq!(s.adv_neg, p.adv_neg);
        prop_assert!((s.adv_pos * s.mu + s.adv_neg * (1.0 - s.mu)).abs() <= 1e-12);
        prop_assert!((s.sigma * s.sigma - s.mu * (1.0 - s.mu)).abs() <= 1e-12);
        if !s.degenerate {
            prop_assert!(s.adv_pos > 0.0 && s.adv_neg < 0.0);
        }
    }
}
