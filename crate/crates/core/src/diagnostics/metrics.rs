//! The per-step metrics table and its CSV form.
//!
//! The file starts with one comment line carrying the schema version, the
//! scheme and the group size, followed by an ordinary CSV header. Per
//! pass-rate columns are suffixed `mu_k_of_K`; a bucket absent from a step's
//! batch leaves its cells empty.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::group_stats::{PassRate, SchemeKind};
use crate::surrogate::BucketLoss;
use crate::trainer::StepMetrics;

pub const SCHEMA: &str = "daro-lab-metrics-v1";

const SCALAR_COLUMNS: &[&str] = &[
    "step",
    "pass_rate",
    "batch_reward",
    "batch_loss",
    "entropy",
    "tokens",
    "groups_sampled",
    "groups_degenerate",
    "groups_kept",
    "rounds",
    "shortfall",
    "skipped",
    "passes",
    "first_pass_ratio_dev",
    "last_pass_ratio_dev",
    "grad_norm",
    "clipped_grad_norm",
    "boundary_tokens",
];

const BUCKET_PREFIXES: &[&str] = &["loss_mu_", "w_mu_", "len_pos_mu_", "len_neg_mu_", "groups_mu_"];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub scheme: SchemeKind,
    pub group_size: u32,
    pub rows: Vec<StepMetrics>,
}

fn bool_cell(b: bool) -> String {
    u8::from(b).to_string()
}

fn opt_cell<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl MetricsTable {
    pub fn new(scheme: SchemeKind, group_size: u32) -> Self {
        Self {
            scheme,
            group_size,
            rows: Vec::new(),
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut cols: Vec<String> = SCALAR_COLUMNS.iter().map(|s| s.to_string()).collect();
        for prefix in BUCKET_PREFIXES {
            for mu in PassRate::interior(self.group_size) {
                cols.push(format!("{prefix}{}", mu.column_suffix()));
            }
        }
        cols
    }

    /// Rows must be strictly increasing in step and carry finite values.
    pub fn validate(&self) -> Result<()> {
        for pair in self.rows.windows(2) {
            if pair[1].step <= pair[0].step {
                return Err(Error::Schema(format!(
                    "step {} follows step {}",
                    pair[1].step, pair[0].step
                )));
            }
        }
        for row in &self.rows {
            let scalars = [
                row.pass_rate,
                row.batch_reward,
                row.batch_loss,
                row.entropy,
                row.first_pass_ratio_dev,
                row.last_pass_ratio_dev,
                row.grad_norm,
                row.clipped_grad_norm,
            ];
            let finite = scalars.iter().all(|v| v.is_finite())
                && row.buckets.values().all(|b| b.loss.is_finite())
                && row.weights.values().all(|w| w.is_finite());
            if !finite {
                return Err(Error::Schema(format!("non-finite value at step {}", row.step)));
            }
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        self.validate()?;
        let mut out = format!(
            "# schema={SCHEMA} scheme={} group_size={}\n",
            self.scheme.name(),
            self.group_size
        );
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![
                r.step.to_string(),
                r.pass_rate.to_string(),
                r.batch_reward.to_string(),
                r.batch_loss.to_string(),
                r.entropy.to_string(),
                r.tokens.to_string(),
                r.groups_sampled.to_string(),
                r.groups_degenerate.to_string(),
                r.groups_kept.to_string(),
                r.rounds.to_string(),
                bool_cell(r.shortfall),
                bool_cell(r.skipped),
                r.passes.to_string(),
                r.first_pass_ratio_dev.to_string(),
                r.last_pass_ratio_dev.to_string(),
                r.grad_norm.to_string(),
                r.clipped_grad_norm.to_string(),
                r.boundary_tokens.to_string(),
            ];
            let mus: Vec<PassRate> = PassRate::interior(self.group_size).collect();
            rec.extend(mus.iter().map(|mu| opt_cell(r.buckets.get(mu).map(|b| b.loss))));
            rec.extend(mus.iter().map(|mu| opt_cell(r.weights.get(mu))));
            rec.extend(mus.iter().map(|mu| opt_cell(r.buckets.get(mu).map(|b| b.len_pos))));
            rec.extend(mus.iter().map(|mu| opt_cell(r.buckets.get(mu).map(|b| b.len_neg))));
            rec.extend(mus.iter().map(|mu| opt_cell(r.buckets.get(mu).map(|b| b.group_count))));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        out.push_str(&String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))?);
        Ok(out)
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn read_csv_file(path: &Path) -> Result<Self> {
        Self::from_csv_str(&fs::read_to_string(path)?)
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let (first, body) = text.split_once('\n').unwrap_or((text, ""));
        let meta = first
            .strip_prefix('#')
            .ok_or_else(|| Error::Schema("missing schema comment line".into()))?;
        let mut schema = None;
        let mut scheme = None;
        let mut group_size = None;
        for kv in meta.split_whitespace() {
            match kv.split_once('=') {
                Some(("schema", v)) => schema = Some(v),
                Some(("scheme", v)) => scheme = Some(v.parse::<SchemeKind>()?),
                Some(("group_size", v)) => {
                    group_size = Some(v.parse::<u32>().map_err(|_| Error::Schema(format!("group_size {v:?}")))?)
                }
                _ => {}
            }
        }
        if schema != Some(SCHEMA) {
            return Err(Error::Schema(format!("expected schema {SCHEMA}, found {schema:?}")));
        }
        let scheme = scheme.ok_or_else(|| Error::Schema("missing scheme".into()))?;
        let group_size = group_size.ok_or_else(|| Error::Schema("missing group_size".into()))?;
        if group_size < 2 {
            return Err(Error::Schema(format!("group_size {group_size} < 2")));
        }
        let mut table = Self::new(scheme, group_size);

        let mut reader = csv::Reader::from_reader(body.as_bytes());
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let index: BTreeMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
        let col = |name: &str| -> Result<usize> {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::Schema(format!("missing column {name}")))
        };
        let expected = table.header();
        for name in &expected {
            col(name)?;
        }
        let mus: Vec<PassRate> = PassRate::interior(group_size).collect();

        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            let cell = |name: &str| -> Result<&str> {
                let i = col(name)?;
                rec.get(i)
                    .ok_or_else(|| Error::Schema(format!("row {}: short record", line + 1)))
            };
            let num = |name: &str| -> Result<f64> {
                cell(name)?
                    .parse()
                    .map_err(|_| Error::Parse(format!("row {} column {name}", line + 1)))
            };
            let int = |name: &str| -> Result<usize> {
                cell(name)?
                    .parse()
                    .map_err(|_| Error::Parse(format!("row {} column {name}", line + 1)))
            };
            let flag = |name: &str| -> Result<bool> {
                match cell(name)? {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(Error::Parse(format!("row {} column {name}: {other:?}", line + 1))),
                }
            };
            let mut buckets = BTreeMap::new();
            let mut weights = BTreeMap::new();
            for mu in &mus {
                let sfx = mu.column_suffix();
                let w = cell(&format!("w_mu_{sfx}"))?;
                if !w.is_empty() {
                    weights.insert(*mu, num(&format!("w_mu_{sfx}"))?);
                }
                if !cell(&format!("loss_mu_{sfx}"))?.is_empty() {
                    let len_pos = int(&format!("len_pos_mu_{sfx}"))?;
                    let len_neg = int(&format!("len_neg_mu_{sfx}"))?;
                    buckets.insert(
                        *mu,
                        BucketLoss {
                            loss: num(&format!("loss_mu_{sfx}"))?,
                            token_count: len_pos + len_neg,
                            group_count: int(&format!("groups_mu_{sfx}"))?,
                            len_pos,
                            len_neg,
                        },
                    );
                }
            }
            table.rows.push(StepMetrics {
                step: int("step")?,
                pass_rate: num("pass_rate")?,
                batch_reward: num("batch_reward")?,
                batch_loss: num("batch_loss")?,
                entropy: num("entropy")?,
                tokens: int("tokens")?,
                groups_sampled: int("groups_sampled")?,
                groups_degenerate: int("groups_degenerate")?,
                groups_kept: int("groups_kept")?,
                rounds: int("rounds")?,
                shortfall: flag("shortfall")?,
                skipped: flag("skipped")?,
                passes: int("passes")?,
                first_pass_ratio_dev: num("first_pass_ratio_dev")?,
                last_pass_ratio_dev: num("last_pass_ratio_dev")?,
                grad_norm: num("grad_norm")?,
                clipped_grad_norm: num("clipped_grad_norm")?,
                boundary_tokens: int("boundary_tokens")?,
                buckets,
                weights,
            });
        }
        table.validate()?;
        Ok(table)
    }

    /// Pass rates that appear in at least one row.
    pub fn present_buckets(&self) -> Vec<PassRate> {
        let mut seen: Vec<PassRate> = self
            .rows
            .iter()
            .flat_map(|r| r.buckets.keys().copied())
            .collect();
        seen.sort();
        seen.dedup();
        seen
    }

    pub fn pass_rates(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.pass_rate).collect()
    }
}
