//! Loss-scale and response-length studies over a metrics table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::diagnostics::metrics::MetricsTable;
use crate::diagnostics::svg::{LineChart, Series, Stroke};
use crate::error::{Error, Result};
use crate::group_stats::PassRate;
use crate::surrogate::{approx_from_lengths, closed_form_from_lengths};

/// Exponential smoothing: `s_0 = v_0`, `s_t = alpha v_t + (1 - alpha) s_{t-1}`.
pub fn smooth_series(values: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha = {alpha} must lie in (0, 1]")));
    }
    let mut out = Vec::with_capacity(values.len());
    let mut prev = None;
    for &v in values {
        let s = match prev {
            None => v,
            Some(p) => alpha * v + (1.0 - alpha) * p,
        };
        out.push(s);
        prev = Some(s);
    }
    Ok(out)
}

/// Like [`smooth_series`], but gaps (`None`) are skipped and stay gaps.
fn smooth_sparse(values: &[Option<f64>], alpha: f64) -> Vec<Option<f64>> {
    let mut prev: Option<f64> = None;
    values
        .iter()
        .map(|v| {
            v.map(|v| {
                let s = prev.map_or(v, |p| alpha * v + (1.0 - alpha) * p);
                prev = Some(s);
                s
            })
        })
        .collect()
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowStat {
    pub first_step: usize,
    pub last_step: usize,
    /// Mean `|L_mu|` over the window's steps, per bucket seen in the window.
    pub mean_abs_loss: BTreeMap<PassRate, f64>,
    pub max_over_median: f64,
    pub max_over_min: f64,
    pub dominant: Option<PassRate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossScaleReport {
    pub windows: Vec<WindowStat>,
    /// Per bucket: mean over steps of `L_mu / closed form` and `L_mu / approx`.
    pub closed_form_factor: BTreeMap<PassRate, f64>,
    pub approx_factor: BTreeMap<PassRate, f64>,
    pub svg: String,
}

impl LossScaleReport {
    /// Fraction of windows whose largest bucket beats the median by `factor`.
    pub fn fraction_windows_with(&self, factor: f64) -> f64 {
        if self.windows.is_empty() {
            return 0.0;
        }
        let hits = self.windows.iter().filter(|w| w.max_over_median >= factor).count();
        hits as f64 / self.windows.len() as f64
    }

    pub fn table_csv(&self) -> String {
        let mut out = String::from("first_step,last_step,buckets,dominant,max_over_median,max_over_min\n");
        for w in &self.windows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                w.first_step,
                w.last_step,
                w.mean_abs_loss.len(),
                w.dominant.map_or_else(String::new, |m| m.to_string()),
                w.max_over_median,
                w.max_over_min
            );
        }
        out
    }
}

fn require_rows(metrics: &MetricsTable) -> Result<()> {
    if metrics.rows.is_empty() {
        return Err(Error::Schema("metrics table has no rows".into()));
    }
    Ok(())
}

/// Per-bucket loss curves (smoothed) with both ratio-one predictions, and
/// the spread of mean `|L_mu|` across buckets per window of `window` steps.
pub fn loss_scale_report(metrics: &MetricsTable, window: usize, alpha: f64) -> Result<LossScaleReport> {
    require_rows(metrics)?;
    if window == 0 {
        return Err(Error::Config("window must be >= 1".into()));
    }
    smooth_series(&[], alpha)?;
    let buckets = metrics.present_buckets();

    let mut windows = Vec::new();
    for chunk in metrics.rows.chunks(window) {
        let mut sums: BTreeMap<PassRate, (f64, usize)> = BTreeMap::new();
        for row in chunk {
            for (mu, b) in &row.buckets {
                let e = sums.entry(*mu).or_default();
                e.0 += b.loss.abs();
                e.1 += 1;
            }
        }
        let mean_abs_loss: BTreeMap<PassRate, f64> =
            sums.into_iter().map(|(mu, (s, n))| (mu, s / n as f64)).collect();
        let mut values: Vec<f64> = mean_abs_loss.values().copied().collect();
        values.sort_by(f64::total_cmp);
        let (max_over_median, max_over_min) = match values.len() {
            0 | 1 => (1.0, 1.0),
            _ => {
                let max = *values.last().expect("nonempty");
                (ratio(max, median(&values)), ratio(max, values[0]))
            }
        };
        let dominant = mean_abs_loss
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(mu, _)| *mu);
        windows.push(WindowStat {
            first_step: chunk[0].step,
            last_step: chunk[chunk.len() - 1].step,
            mean_abs_loss,
            max_over_median,
            max_over_min,
            dominant,
        });
    }

    let mut chart = LineChart::new(
        "Per pass-rate loss L_mu (solid), ratio-one closed form (dotted), length approximation (dashed)",
        "step",
        "loss",
    );
    let mut closed_form_factor = BTreeMap::new();
    let mut approx_factor = BTreeMap::new();
    for (ci, mu) in buckets.iter().enumerate() {
        let mut loss = Vec::with_capacity(metrics.rows.len());
        let mut closed = Vec::with_capacity(metrics.rows.len());
        let mut approx = Vec::with_capacity(metrics.rows.len());
        let (mut cf_sum, mut cf_n, mut ap_sum, mut ap_n) = (0.0, 0usize, 0.0, 0usize);
        for row in &metrics.rows {
            match row.buckets.get(mu) {
                Some(b) => {
                    let cf = closed_form_from_lengths(*mu, b.len_pos, b.len_neg, row.tokens)?;
                    let ap = approx_from_lengths(*mu, b.len_pos, b.len_neg, row.tokens)?;
                    if cf != 0.0 {
                        cf_sum += b.loss / cf;
                        cf_n += 1;
                    }
                    if ap != 0.0 {
                        ap_sum += b.loss / ap;
                        ap_n += 1;
                    }
                    loss.push(Some(b.loss));
                    closed.push(Some(cf));
                    approx.push(Some(ap));
                }
                None => {
                    loss.push(None);
                    closed.push(None);
                    approx.push(None);
                }
            }
        }
        if cf_n > 0 {
            closed_form_factor.insert(*mu, cf_sum / cf_n as f64);
        }
        if ap_n > 0 {
            approx_factor.insert(*mu, ap_sum / ap_n as f64);
        }
        let steps: Vec<f64> = metrics.rows.iter().map(|r| r.step as f64).collect();
        let to_points = |v: Vec<Option<f64>>| -> Vec<(f64, f64)> {
            steps
                .iter()
                .zip(v)
                .map(|(&x, y)| (x, y.unwrap_or(f64::NAN)))
                .collect()
        };
        chart.push(Series::new(format!("mu={mu}"), to_points(smooth_sparse(&loss, alpha)), Stroke::Solid, ci));
        chart.push(Series::new(format!("closed {mu}"), to_points(smooth_sparse(&closed, alpha)), Stroke::Dotted, ci));
        chart.push(Series::new(format!("approx {mu}"), to_points(smooth_sparse(&approx, alpha)), Stroke::Dashed, ci));
    }
    Ok(LossScaleReport {
        windows,
        closed_form_factor,
        approx_factor,
        svg: chart.render(),
    })
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLengthReport {
    /// Per step and bucket: `(len_pos / L, len_neg / L)`.
    pub shares: Vec<BTreeMap<PassRate, (f64, f64)>>,
    pub svg: String,
}

/// Positive and negative response-length shares of the batch token total.
pub fn normalized_length_report(metrics: &MetricsTable, alpha: f64) -> Result<NormalizedLengthReport> {
    require_rows(metrics)?;
    smooth_series(&[], alpha)?;
    let shares: Vec<BTreeMap<PassRate, (f64, f64)>> = metrics
        .rows
        .iter()
        .map(|row| {
            row.buckets
                .iter()
                .map(|(mu, b)| {
                    let l = row.tokens.max(1) as f64;
                    (*mu, (b.len_pos as f64 / l, b.len_neg as f64 / l))
                })
                .collect()
        })
        .collect();
    let mut chart = LineChart::new(
        "Normalized response length per pass rate: positive (solid), negative (dashed)",
        "step",
        "share of batch tokens",
    );
    let steps: Vec<f64> = metrics.rows.iter().map(|r| r.step as f64).collect();
    for (ci, mu) in metrics.present_buckets().iter().enumerate() {
        for (pos, stroke, label) in [(true, Stroke::Solid, "pos"), (false, Stroke::Dashed, "neg")] {
            let vals: Vec<Option<f64>> = shares
                .iter()
                .map(|s| s.get(mu).map(|&(p, n)| if pos { p } else { n }))
                .collect();
            let pts = steps
                .iter()
                .zip(smooth_sparse(&vals, alpha))
                .map(|(&x, y)| (x, y.unwrap_or(f64::NAN)))
                .collect();
            chart.push(Series::new(format!("{label} {mu}"), pts, stroke, ci));
        }
    }
    Ok(NormalizedLengthReport {
        shares,
        svg: chart.render(),
    })
}

/// One curve per weight column, raw values.
pub fn weight_chart(metrics: &MetricsTable, title: &str) -> String {
    let mut chart = LineChart::new(title, "step", "w_mu");
    for (ci, mu) in PassRate::interior(metrics.group_size).enumerate() {
        let pts: Vec<(f64, f64)> = metrics
            .rows
            .iter()
            .map(|r| (r.step as f64, r.weights.get(&mu).copied().unwrap_or(f64::NAN)))
            .collect();
        if pts.iter().any(|p| p.1.is_finite()) {
            chart.push(Series::new(format!("w {mu}"), pts, Stroke::Solid, ci));
        }
    }
    chart.render()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group_stats::SchemeKind;
    use crate::surrogate::BucketLoss;
    use crate::trainer::StepMetrics;

    fn row(step: usize, buckets: &[(u32, f64, usize, usize)], tokens: usize) -> StepMetrics {
        StepMetrics {
            step,
            pass_rate: 0.5,
            batch_reward: 0.5,
            batch_loss: 0.0,
            entropy: 1.0,
            tokens,
            groups_sampled: 1,
            groups_degenerate: 0,
            groups_kept: 1,
            rounds: 1,
            shortfall: false,
            skipped: false,
            passes: 1,
            first_pass_ratio_dev: 0.0,
            last_pass_ratio_dev: 0.0,
            grad_norm: 0.0,
            clipped_grad_norm: 0.0,
            boundary_tokens: 0,
            buckets: buckets
                .iter()
                .map(|&(k, loss, lp, ln)| {
                    (
                        PassRate::new(k, 8),
                        BucketLoss {
                            loss,
                            token_count: lp + ln,
                            group_count: 1,
                            len_pos: lp,
                            len_neg: ln,
                        },
                    )
                })
                .collect(),
            weights: BTreeMap::new(),
        }
    }

    #[test]
    fn smoothing_examples() {
        assert_eq!(smooth_series(&[0.0, 1.0], 0.1).unwrap(), vec![0.0, 0.1]);
        assert_eq!(smooth_series(&[3.0, 1.0, 2.0], 1.0).unwrap(), vec![3.0, 1.0, 2.0]);
        assert!(smooth_series(&[2.5; 5], 0.3).unwrap().iter().all(|&v| v == 2.5));
        assert!(smooth_series(&[1.0], 0.0).is_err());
    }

    #[test]
    fn single_bucket_ratio_one() {
        let mut t = MetricsTable::new(SchemeKind::Grpo, 8);
        t.rows = (0..5).map(|s| row(s, &[(4, 0.2, 4, 4)], 8)).collect();
        let r = loss_scale_report(&t, 10, 0.1).unwrap();
        assert_eq!(r.windows.len(), 1);
        assert_eq!(r.windows[0].max_over_min, 1.0);
        assert_eq!(r.windows[0].max_over_median, 1.0);
    }

    #[test]
    fn ratio_ten_passes_through() {
        let mut t = MetricsTable::new(SchemeKind::Grpo, 8);
        t.rows = (0..4)
            .map(|s| row(s, &[(2, 0.05, 2, 6), (6, -0.5, 6, 2)], 16))
            .collect();
        let r = loss_scale_report(&t, 2, 0.1).unwrap();
        assert_eq!(r.windows.len(), 2);
        for w in &r.windows {
            assert!((w.max_over_min - 10.0).abs() < 1e-12);
            assert_eq!(w.dominant, Some(PassRate::new(6, 8)));
        }
    }

    #[test]
    fn equal_lengths_split_evenly() {
        let mut t = MetricsTable::new(SchemeKind::Grpo, 8);
        t.rows = vec![row(0, &[(4, 0.0, 12, 12)], 24)];
        let r = normalized_length_report(&t, 0.1).unwrap();
        assert_eq!(r.shares[0][&PassRate::new(4, 8)], (0.5, 0.5));
    }

    #[test]
    fn empty_table_is_a_schema_error() {
        let t = MetricsTable::new(SchemeKind::Grpo, 8);
        assert!(matches!(loss_scale_report(&t, 10, 0.1), Err(Error::Schema(_))));
    }
}
