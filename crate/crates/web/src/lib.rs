//! WebAssembly bindings for the interactive demo page in `www/`.
//!
//! Each exported function has a plain Rust twin (the `*_values` functions)
//! that the native tests exercise; the exported wrappers only convert errors.

use std::collections::BTreeMap;

use wasm_bindgen::prelude::*;

use daro_lab::daro::{DaroConfig, DaroWeights};
use daro_lab::group_stats::{scheme_weight, GroupStats, WeightScheme};
use daro_lab::surrogate::{
    approx_from_lengths, clip_surrogate, closed_form_from_lengths, BucketLoss, ClipConfig,
    GroupLossBreakdown, NegativeBranch,
};
use daro_lab::{PassRate, SchemeKind};

/// `f(A, r)` on `n` evenly spaced ratios in `[r_min, r_max]`.
pub fn clip_curve_values(
    advantage: f64,
    eps_low: f64,
    eps_high: f64,
    bounded_negative: bool,
    r_min: f64,
    r_max: f64,
    n: usize,
) -> Result<Vec<f64>, String> {
    if n < 2 || !(r_max > r_min) || r_min < 0.0 {
        return Err("need n >= 2 and 0 <= r_min < r_max".into());
    }
    let branch = if bounded_negative {
        NegativeBranch::Bounded
    } else {
        NegativeBranch::Pessimistic
    };
    let cfg = ClipConfig::new(eps_low, eps_high)
        .map_err(|e| e.to_string())?
        .with_negative_branch(branch);
    Ok((0..n)
        .map(|i| {
            let r = r_min + (r_max - r_min) * i as f64 / (n - 1) as f64;
            clip_surrogate(advantage, r, &cfg)
        })
        .collect())
}

/// For every `k = 1..K-1`, a single group with responses of fixed lengths:
/// `[mu, L_mu, scheme weight, weighted loss, length approximation]`, flat.
pub fn loss_scale_values(
    group_size: u32,
    len_pos: usize,
    len_neg: usize,
    scheme: &str,
) -> Result<Vec<f64>, String> {
    if group_size < 2 || len_pos == 0 || len_neg == 0 {
        return Err("need K >= 2 and positive lengths".into());
    }
    let kind: SchemeKind = scheme.parse().map_err(|e: daro_lab::Error| e.to_string())?;
    let daro = DaroWeights::new(group_size, DaroConfig::default()).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(5 * (group_size as usize - 1));
    for mu in PassRate::interior(group_size) {
        let lp = mu.k as usize * len_pos;
        let ln = (group_size - mu.k) as usize * len_neg;
        let total = lp + ln;
        let loss = closed_form_from_lengths(mu, lp, ln, total).map_err(|e| e.to_string())?;
        let approx = approx_from_lengths(mu, lp, ln, total).map_err(|e| e.to_string())?;
        let m = mu.value();
        let sigma = (m * (1.0 - m)).sqrt();
        let stats = GroupStats {
            pass_rate: mu,
            mu: m,
            sigma,
            k: mu.k,
            adv_pos: ((1.0 - m) / m).sqrt(),
            adv_neg: -(m / (1.0 - m)).sqrt(),
            len_pos: lp,
            len_neg: ln,
            degenerate: false,
        };
        let weight = match kind {
            SchemeKind::Grpo => scheme_weight(&WeightScheme::Grpo, &stats),
            SchemeKind::Dapo => scheme_weight(&WeightScheme::Dapo, &stats),
            // A lone group: the pooled batch std is the group's own std.
            SchemeKind::Lipo => scheme_weight(&WeightScheme::Lipo { batch_std: sigma }, &stats),
            SchemeKind::DrGrpo => scheme_weight(&WeightScheme::DrGrpo { batch_tokens: total }, &stats),
            SchemeKind::Daro => {
                if loss > 0.0 {
                    daro.c / loss
                } else {
                    daro.clamp_max
                }
            }
        };
        out.extend([m, loss, weight, weight * loss, approx]);
    }
    Ok(out)
}

/// Weight trajectories under fixed per-bucket losses `losses[k - 1]`:
/// `steps + 1` rows of `K - 1` weights, flat and row-major.
pub fn daro_trajectory_values(losses: &[f64], c: f64, lr: f64, steps: usize) -> Result<Vec<f64>, String> {
    if losses.is_empty() {
        return Err("need at least one loss".into());
    }
    let group_size = losses.len() as u32 + 1;
    let config = DaroConfig {
        c,
        lr,
        ..DaroConfig::default()
    };
    let mut weights = DaroWeights::new(group_size, config).map_err(|e| e.to_string())?;
    let per_mu: BTreeMap<PassRate, BucketLoss> = PassRate::interior(group_size)
        .zip(losses)
        .map(|(mu, &loss)| {
            (
                mu,
                BucketLoss {
                    loss,
                    ..BucketLoss::default()
                },
            )
        })
        .collect();
    let breakdown = GroupLossBreakdown {
        per_mu,
        batch_token_total: 1,
    };
    let mut out = Vec::with_capacity((steps + 1) * losses.len());
    out.extend(weights.iter().map(|(_, w)| w));
    for _ in 0..steps {
        let g = weights.weight_gradient(&breakdown).map_err(|e| e.to_string())?;
        weights.apply_weight_update(&g).map_err(|e| e.to_string())?;
        out.extend(weights.iter().map(|(_, w)| w));
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn clip_curve(
    advantage: f64,
    eps_low: f64,
    eps_high: f64,
    bounded_negative: bool,
    r_min: f64,
    r_max: f64,
    n: usize,
) -> Result<Vec<f64>, JsError> {
    clip_curve_values(advantage, eps_low, eps_high, bounded_negative, r_min, r_max, n)
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn loss_scale(group_size: u32, len_pos: usize, len_neg: usize, scheme: &str) -> Result<Vec<f64>, JsError> {
    loss_scale_values(group_size, len_pos, len_neg, scheme).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn daro_trajectory(losses: Vec<f64>, c: f64, lr: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    daro_trajectory_values(&losses, c, lr, steps).map_err(|e| JsError::new(&e))
}
