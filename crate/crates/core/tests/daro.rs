mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{random_params, SampledBatch};
use daro_lab::daro::{stationary_weights, DaroConfig, DaroWeights};
use daro_lab::policy::{evaluate_batch, PolicyParams};
use daro_lab::surrogate::BucketLoss;
use daro_lab::{ClipConfig, Error, GroupLossBreakdown, PassRate};

fn breakdown(losses: &[(u32, f64)], group_size: u32) -> GroupLossBreakdown {
    GroupLossBreakdown {
        per_mu: losses
            .iter()
            .map(|&(k, loss)| {
                (
                    PassRate::new(k, group_size),
                    BucketLoss {
                        loss,
                        ..BucketLoss::default()
                    },
                )
            })
            .collect(),
        batch_token_total: 1,
    }
}

fn weights(group_size: u32, c: f64, lr: f64) -> DaroWeights {
    DaroWeights::new(
        group_size,
        DaroConfig {
            c,
            lr,
            ..DaroConfig::default()
        },
    )
    .unwrap()
}

#[test]
fn regularized_loss_examples() {
    let w = weights(4, 1.0, 1e-2);
    let b = breakdown(&[(1, 0.3), (2, 0.7)], 4);
    assert!((w.regularized_total_loss(&b).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(w.regularized_total_loss(&GroupLossBreakdown::default()).unwrap(), 0.0);

    let mut half = weights(4, 1.0, 1e-2);
    half.set(PassRate::new(1, 4), 0.5).unwrap();
    let v = half.regularized_total_loss(&breakdown(&[(1, 2.0)], 4)).unwrap();
    assert!((v - 1.693_147_2).abs() < 5e-8);

    let foreign = breakdown(&[(3, 1.0)], 8);
    assert!(matches!(w.regularized_total_loss(&foreign), Err(Error::MissingWeight(_))));
}

#[test]
fn weight_gradient_examples() {
    let mut w = weights(4, 1.0, 1e-2);
    let mu = PassRate::new(1, 4);
    w.set(mu, 0.25).unwrap();
    assert_eq!(w.weight_gradient(&breakdown(&[(1, 1.0)], 4)).unwrap()[&mu], -3.0);
    w.set(mu, 2.0).unwrap();
    assert_eq!(w.weight_gradient(&breakdown(&[(1, 0.5)], 4)).unwrap()[&mu], 0.0);
    w.set(mu, 1.0).unwrap();
    assert_eq!(w.weight_gradient(&breakdown(&[(1, 0.0)], 4)).unwrap()[&mu], -1.0);
    // absent buckets get no gradient entry
    assert_eq!(w.weight_gradient(&breakdown(&[(2, 1.0)], 4)).unwrap().len(), 1);
}

#[test]
fn stationary_weight_examples() {
    let (a, b) = (PassRate::new(1, 4), PassRate::new(3, 4));
    let losses = BTreeMap::from([(a, 0.5), (b, 2.0)]);
    let w = stationary_weights(&losses, 1.0).unwrap();
    assert_eq!((w[&a], w[&b]), (2.0, 0.5));
    for (mu, wv) in &w {
        assert_eq!(wv * losses[mu], 1.0);
    }
    let same = stationary_weights(&BTreeMap::from([(a, 1.5), (b, 1.5)]), 1.5).unwrap();
    assert!(same.values().all(|&x| x == 1.0));
    assert!(matches!(
        stationary_weights(&BTreeMap::from([(a, 0.5), (b, 0.0)]), 1.0),
        Err(Error::NoStationaryPoint(_, _))
    ));
    assert!(stationary_weights(&BTreeMap::from([(a, -0.1)]), 1.0).is_err());
}

#[test]
fn repeated_updates_reach_the_fixed_point() {
    let mut w = weights(4, 1.0, 1e-2);
    let b = breakdown(&[(1, 0.5), (3, 2.0)], 4);
    let (lo, hi) = (PassRate::new(1, 4), PassRate::new(3, 4));
    let mut steps = 0;
    while steps < 20_000 {
        let g = w.weight_gradient(&b).unwrap();
        w.apply_weight_update(&g).unwrap();
        steps += 1;
        let done = (w.get(lo).unwrap() - 2.0).abs() / 2.0 < 1e-3 && (w.get(hi).unwrap() - 0.5).abs() / 0.5 < 1e-3;
        if done && steps > 100 {
            break;
        }
    }
    assert!(steps < 20_000, "no convergence");
    assert!((w.get(lo).unwrap() - 2.0).abs() / 2.0 < 1e-3);
    assert!((w.get(hi).unwrap() - 0.5).abs() / 0.5 < 1e-3);
    // the untouched bucket keeps its initial weight and fresh moments
    assert_eq!(w.get(PassRate::new(2, 4)), Some(1.0));
    assert_eq!(w.moment_steps(PassRate::new(2, 4)), Some(0));
}

#[test]
fn zero_gradient_leaves_weights_but_decays_moments() {
    let mut w = weights(4, 1.0, 1e-2);
    let mu = PassRate::new(2, 4);
    w.apply_weight_update(&BTreeMap::from([(mu, -1.0)])).unwrap();
    let after_first = w.get(mu).unwrap();
    let m1 = w.first_moment(mu).unwrap();
    w.apply_weight_update(&BTreeMap::from([(mu, 0.0)])).unwrap();
    let m2 = w.first_moment(mu).unwrap();
    assert!(m2.abs() < m1.abs());
    // Adam keeps moving on momentum, so only a fresh state stays put
    let mut fresh = weights(4, 1.0, 1e-2);
    fresh.apply_weight_update(&BTreeMap::from([(mu, 0.0)])).unwrap();
    assert_eq!(fresh.get(mu), Some(1.0));
    assert!(after_first > 1.0);
}

#[test]
fn clamping_holds_at_both_ends() {
    let cfg = DaroConfig {
        lr: 10.0,
        clamp_min: 0.5,
        clamp_max: 2.0,
        ..DaroConfig::default()
    };
    let mut w = DaroWeights::new(4, cfg).unwrap();
    let mu = PassRate::new(1, 4);
    w.apply_weight_update(&BTreeMap::from([(mu, 100.0)])).unwrap();
    assert_eq!(w.get(mu), Some(0.5));
    for _ in 0..5 {
        w.apply_weight_update(&BTreeMap::from([(mu, -100.0)])).unwrap();
    }
    assert_eq!(w.get(mu), Some(2.0));
    assert!(DaroWeights::new(4, DaroConfig { init: 5.0, ..cfg }).is_err());
    assert!(DaroWeights::new(4, DaroConfig { c: 0.0, ..DaroConfig::default() }).is_err());
    assert!(DaroWeights::new(1, DaroConfig::default()).is_err());
    assert!(w.get(PassRate::new(0, 4)).is_none());
    assert!(w.get(PassRate::new(4, 4)).is_none());
}

#[test]
fn unit_weights_recover_the_filtered_batch_loss() {
    let w = weights(8, 1.0, 1e-2);
    let b = breakdown(&[(1, 0.31), (4, -0.2), (7, 1.7)], 8);
    let total = w.regularized_total_loss(&b).unwrap();
    let reg = w.regularizer(&b).unwrap();
    assert_eq!(reg, 0.0);
    assert!((total - reg - b.unweighted_total()).abs() <= 1e-12);
}

/// The policy gradient of the DARO objective, with weights held fixed, is the
/// gradient of the batch loss with each group weighted by its bucket weight.
#[test]
fn policy_gradient_treats_weights_as_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let cfg = ClipConfig::default();
    let snapshot = random_params(5, 4, 0.5, &mut rng);
    let sampled = SampledBatch::new(&snapshot, 6, 4, 5, &mut rng);
    let mut live = snapshot.clone();
    for x in live.as_mut_slice() {
        *x += 0.03 * (*x).signum();
    }
    let mut dw = weights(4, 1.0, 1e-2);
    for (i, mu) in PassRate::interior(4).enumerate() {
        dw.set(mu, 0.6 + 0.7 * i as f64).unwrap();
    }
    let group_w: Vec<f64> = sampled
        .stats
        .iter()
        .map(|s| if s.degenerate { 0.0 } else { dw.get(s.pass_rate).unwrap() })
        .collect();
    let analytic = evaluate_batch(&live, &sampled.batch(&group_w), &cfg, 1.0, true)
        .unwrap()
        .grad
        .unwrap();

    let unit = vec![1.0; sampled.groups.len()];
    let objective = |p: &PolicyParams| {
        let e = evaluate_batch(p, &sampled.batch(&unit), &cfg, 1.0, false).unwrap();
        dw.regularized_total_loss(&e.breakdown).unwrap()
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..live.as_slice().len() {
        let mut plus = live.clone();
        plus.as_mut_slice()[i] += h;
        let mut minus = live.clone();
        minus.as_mut_slice()[i] -= h;
        let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
        worst = worst.max((fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6));
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

proptest! {
    #[test]
    fn weights_never_leave_their_bounds(grads in proptest::collection::vec(-1e3f64..1e3, 1..60)) {
        let mut w = DaroWeights::new(8, DaroConfig { lr: 0.5, ..DaroConfig::default() }).unwrap();
        for (i, g) in grads.iter().enumerate() {
            let mu = PassRate::new(1 + (i % 7) as u32, 8);
            w.apply_weight_update(&BTreeMap::from([(mu, *g)])).unwrap();
            for (_, x) in w.iter() {
                prop_assert!((1e-3..=1e3).contains(&x));
            }
        }
    }
}
