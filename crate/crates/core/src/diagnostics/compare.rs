//! Paired multi-scheme, multi-seed comparisons.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::TrainConfig;
use crate::diagnostics::metrics::MetricsTable;
use crate::diagnostics::reports::{smooth_series, weight_chart};
use crate::diagnostics::svg::{LineChart, Series, Stroke};
use crate::error::{Error, Result};
use crate::group_stats::SchemeKind;
use crate::trainer::run;

/// Steps averaged for the "final" pass rate.
pub const FINAL_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeSummary {
    pub scheme: SchemeKind,
    /// Per seed: mean pass rate over the last [`FINAL_WINDOW`] steps.
    pub finals: Vec<f64>,
    /// Per seed: mean pass rate over all steps.
    pub aucs: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Sample standard deviation; zero for fewer than two values.
fn std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

impl SchemeSummary {
    pub fn final_mean(&self) -> f64 {
        mean(&self.finals)
    }
    pub fn final_std(&self) -> f64 {
        std(&self.finals)
    }
    pub fn auc_mean(&self) -> f64 {
        mean(&self.aucs)
    }
    pub fn auc_std(&self) -> f64 {
        std(&self.aucs)
    }
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    /// `runs[i][j]`: scheme `i`, seed `j`.
    pub runs: Vec<Vec<MetricsTable>>,
    pub summaries: Vec<SchemeSummary>,
}

pub fn final_pass_rate(table: &MetricsTable) -> f64 {
    let n = table.rows.len();
    mean(&table.pass_rates()[n.saturating_sub(FINAL_WINDOW)..])
}

pub fn pass_rate_auc(table: &MetricsTable) -> f64 {
    mean(&table.pass_rates())
}

/// Rejects configs that differ in anything but scheme and seed.
pub fn check_comparable(configs: &[TrainConfig]) -> Result<()> {
    let Some(first) = configs.first() else {
        return Err(Error::SchemeMismatch("no configurations".into()));
    };
    for c in &configs[1..] {
        let diff: Vec<&str> = first
            .differing_keys(c)
            .into_iter()
            .filter(|k| *k != "scheme" && *k != "seed")
            .collect();
        if !diff.is_empty() {
            return Err(Error::SchemeMismatch(format!("configs differ in {}", diff.join(", "))));
        }
    }
    Ok(())
}

/// Runs every config once per seed. Seed `j` is the same for all schemes,
/// so rollout streams are paired. `on_run(scheme, seed)` fires before each run.
pub fn compare_schemes<F>(configs: &[TrainConfig], seeds: &[u64], mut on_run: F) -> Result<Comparison>
where
    F: FnMut(SchemeKind, u64),
{
    check_comparable(configs)?;
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut runs = Vec::with_capacity(configs.len());
    let mut summaries = Vec::with_capacity(configs.len());
    for cfg in configs {
        let mut tables = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            on_run(cfg.scheme, seed);
            let mut c = cfg.clone();
            c.seed = seed;
            tables.push(run(&c, None)?.metrics);
        }
        summaries.push(SchemeSummary {
            scheme: cfg.scheme,
            finals: tables.iter().map(final_pass_rate).collect(),
            aucs: tables.iter().map(pass_rate_auc).collect(),
        });
        runs.push(tables);
    }
    Ok(Comparison {
        seeds: seeds.to_vec(),
        runs,
        summaries,
    })
}

impl Comparison {
    pub fn summary(&self, scheme: SchemeKind) -> Option<&SchemeSummary> {
        self.summaries.iter().find(|s| s.scheme == scheme)
    }

    pub fn table_csv(&self) -> String {
        let mut out = String::from("scheme,seeds,final_mean,final_std,auc_mean,auc_std\n");
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.scheme.name(),
                s.finals.len(),
                s.final_mean(),
                s.final_std(),
                s.auc_mean(),
                s.auc_std()
            );
        }
        out
    }

    /// Seed-averaged, smoothed curve of one per-step quantity per scheme.
    pub fn mean_curve_chart<F>(&self, title: &str, y_label: &str, alpha: f64, value: F) -> Result<String>
    where
        F: Fn(&crate::trainer::StepMetrics) -> f64,
    {
        let mut chart = LineChart::new(title, "step", y_label);
        for (ci, (tables, summary)) in self.runs.iter().zip(&self.summaries).enumerate() {
            let steps = tables.iter().map(|t| t.rows.len()).min().unwrap_or(0);
            let avg: Vec<f64> = (0..steps)
                .map(|i| mean(&tables.iter().map(|t| value(&t.rows[i])).collect::<Vec<_>>()))
                .collect();
            let pts = smooth_series(&avg, alpha)?
                .into_iter()
                .enumerate()
                .map(|(i, y)| (i as f64, y))
                .collect();
            chart.push(Series::new(summary.scheme.name(), pts, Stroke::Solid, ci));
        }
        Ok(chart.render())
    }

    /// Writes the summary table, per-run metrics and charts into `dir`.
    pub fn write_artifacts(&self, dir: &Path, alpha: f64) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.csv"), self.table_csv())?;
        for (tables, summary) in self.runs.iter().zip(&self.summaries) {
            for (table, seed) in tables.iter().zip(&self.seeds) {
                let name = format!("metrics_{}_seed{seed}.csv", summary.scheme.name().replace('.', ""));
                table.write_csv_file(&dir.join(name))?;
            }
        }
        fs::write(
            dir.join("pass_rate.svg"),
            self.mean_curve_chart("Training pass rate (seed mean)", "pass rate", alpha, |r| r.pass_rate)?,
        )?;
        fs::write(
            dir.join("entropy.svg"),
            self.mean_curve_chart("Mean token entropy (seed mean)", "nats", alpha, |r| r.entropy)?,
        )?;
        fs::write(
            dir.join("response_length.svg"),
            self.mean_curve_chart("Mean response length (seed mean)", "tokens", alpha, |r| {
                if r.groups_kept == 0 {
                    0.0
                } else {
                    r.tokens as f64 / r.groups_kept as f64
                }
            })?,
        )?;
        if let Some(i) = self.summaries.iter().position(|s| s.scheme == SchemeKind::Daro) {
            if let Some(table) = self.runs[i].first() {
                fs::write(
                    dir.join("daro_weights.svg"),
                    weight_chart(table, "DARO weight trajectories (first seed)"),
                )?;
            }
        }
        Ok(())
    }
}
