//! Rollout collection, dynamic sampling and the joint policy / weight update.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::Rng;

use crate::config::TrainConfig;
use crate::daro::DaroWeights;
use crate::diagnostics::metrics::MetricsTable;
use crate::error::{Error, Result};
use crate::group_stats::{
    batch_reward_std, group_stats, scheme_weight, GroupStats, PassRate, ResponseGroup, SchemeKind,
    WeightScheme,
};
use crate::optim::{clip_global_norm, global_norm, Adam, AdamConfig};
use crate::policy::{
    contexts_along, evaluate_batch, mean_token_entropy, sample_response, BatchGroup, PolicyParams,
};
use crate::rng;
use crate::surrogate::{BucketLoss, ClipConfig};
use crate::task::{generate_prompt_set, verify, write_prompt_set, Prompt};

/// Samples `group_size` responses per prompt from `snapshot` and scores them.
pub fn collect_rollouts<R: Rng + ?Sized>(
    snapshot: &PolicyParams,
    prompts: &[&Prompt],
    group_size: usize,
    max_len: usize,
    temperature: f64,
    rng: &mut R,
) -> Vec<ResponseGroup> {
    prompts
        .iter()
        .map(|prompt| {
            let mut responses = Vec::with_capacity(group_size);
            let mut rewards = Vec::with_capacity(group_size);
            let mut logprobs = Vec::with_capacity(group_size);
            for _ in 0..group_size {
                let traj = sample_response(snapshot, prompt.id, prompt.cue(), max_len, temperature, rng);
                rewards.push(verify(prompt, &traj));
                responses.push(traj.tokens);
                logprobs.push(traj.logprobs);
            }
            ResponseGroup {
                prompt_id: prompt.id,
                responses,
                rewards,
                rollout_logprobs: logprobs,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    /// Kept non-degenerate groups, in sampling order.
    pub groups: Vec<ResponseGroup>,
    pub shortfall: bool,
    pub rounds: usize,
    pub groups_seen: usize,
    pub degenerate_seen: usize,
    pub responses_seen: usize,
    pub correct_seen: usize,
}

/// Keeps the first `target_count` non-degenerate groups, asking
/// `regenerate(round)` for fresh rollouts (rounds `2..=max_rounds`) until
/// enough are gathered. Everything sampled is tallied, kept or not.
pub fn dynamic_sampling_filter<F>(
    initial: Vec<ResponseGroup>,
    target_count: usize,
    mut regenerate: F,
    max_rounds: usize,
) -> FilterOutcome
where
    F: FnMut(usize) -> Vec<ResponseGroup>,
{
    let mut out = FilterOutcome::default();
    let mut pending = Some(initial);
    let mut round = 1;
    while let Some(groups) = pending.take() {
        out.rounds = round;
        for g in groups {
            out.groups_seen += 1;
            out.responses_seen += g.rewards.len();
            out.correct_seen += g.rewards.iter().filter(|&&r| r == 1).count();
            if g.pass_rate().is_degenerate() {
                out.degenerate_seen += 1;
            } else if out.groups.len() < target_count {
                out.groups.push(g);
            }
        }
        if out.groups.len() < target_count && round < max_rounds {
            round += 1;
            pending = Some(regenerate(round));
        }
    }
    out.shortfall = out.groups.len() < target_count;
    out
}

/// What happened in one gradient step over a mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PassReport {
    pub groups: usize,
    pub tokens: usize,
    pub loss: f64,
    pub max_ratio_deviation: f64,
    pub boundary_tokens: usize,
    pub clipped_tokens: usize,
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLogEntry {
    pub step: usize,
    pub prompt_id: u64,
    pub pass_rate: PassRate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    /// Mean reward over every response sampled during the step.
    pub pass_rate: f64,
    /// Mean reward over the training batch.
    pub batch_reward: f64,
    /// Scheme-weighted loss of the training batch under the rollout policy.
    pub batch_loss: f64,
    pub entropy: f64,
    /// Token total `L` of the training batch.
    pub tokens: usize,
    pub groups_sampled: usize,
    pub groups_degenerate: usize,
    pub groups_kept: usize,
    pub rounds: usize,
    pub shortfall: bool,
    pub skipped: bool,
    pub passes: usize,
    pub first_pass_ratio_dev: f64,
    pub last_pass_ratio_dev: f64,
    /// Largest pre-clip policy gradient norm over the passes.
    pub grad_norm: f64,
    /// Largest post-clip policy gradient norm over the passes.
    pub clipped_grad_norm: f64,
    pub boundary_tokens: usize,
    /// Unweighted loss and length tallies per present pass rate, computed on
    /// the whole training batch with all ratios equal to one.
    pub buckets: BTreeMap<PassRate, BucketLoss>,
    /// Weight of every interior pass rate after the step.
    pub weights: BTreeMap<PassRate, f64>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub metrics: StepMetrics,
    pub batch: Vec<BatchLogEntry>,
}

pub struct Trainer {
    config: TrainConfig,
    clip: ClipConfig,
    prompts: Vec<Prompt>,
    params: PolicyParams,
    policy_opt: Adam,
    daro: Option<DaroWeights>,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let prompts = generate_prompt_set(&config.task_spec())?;
        let params = PolicyParams::with_copy_prior(
            config.vocab_size,
            config.position_buckets,
            config.init_logit,
            config.stop_logit,
        )?;
        Self::with_parts(config, prompts, params)
    }

    /// A trainer over an explicit prompt set and initial policy.
    pub fn with_parts(config: TrainConfig, prompts: Vec<Prompt>, params: PolicyParams) -> Result<Self> {
        config.validate()?;
        if prompts.is_empty() {
            return Err(Error::Config("empty prompt set".into()));
        }
        if prompts.iter().enumerate().any(|(i, p)| p.id != i as u64) {
            return Err(Error::Config("prompt ids must be 0..n in order".into()));
        }
        if params.vocab() != config.vocab_size {
            return Err(Error::Config(format!(
                "policy vocabulary {} differs from configured {}",
                params.vocab(),
                config.vocab_size
            )));
        }
        let clip = config.clip_config()?;
        let daro = match config.scheme {
            SchemeKind::Daro => Some(DaroWeights::new(config.group_size as u32, config.daro_config())?),
            _ => None,
        };
        let policy_opt = Adam::new(AdamConfig::with_lr(config.lr_policy), params.as_slice().len());
        Ok(Self {
            config,
            clip,
            prompts,
            params,
            policy_opt,
            daro,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn daro_weights(&self) -> Option<&DaroWeights> {
        self.daro.as_ref()
    }

    pub fn daro_weights_mut(&mut self) -> Option<&mut DaroWeights> {
        self.daro.as_mut()
    }

    /// Index of the next step.
    pub fn step_index(&self) -> usize {
        self.step
    }

    fn draw_prompts(&self, round: usize, count: usize) -> Vec<&Prompt> {
        let mut rng = rng::stream(self.config.seed, &[self.step as u64, round as u64, 1]);
        let n = self.prompts.len();
        if count <= n {
            rand::seq::index::sample(&mut rng, n, count)
                .into_iter()
                .map(|i| &self.prompts[i])
                .collect()
        } else {
            (0..count).map(|_| &self.prompts[rng.random_range(0..n)]).collect()
        }
    }

    /// Rollouts for one sampling round of the current step.
    pub fn rollout_round(&self, snapshot: &PolicyParams, round: usize, count: usize) -> Vec<ResponseGroup> {
        let prompts = self.draw_prompts(round, count);
        let mut rng = rng::stream(self.config.seed, &[self.step as u64, round as u64, 2]);
        collect_rollouts(
            snapshot,
            &prompts,
            self.config.group_size,
            self.config.max_response_length,
            self.config.temperature,
            &mut rng,
        )
    }

    /// The training batch of the current step and what sampling it cost.
    pub fn sample_batch(&self) -> FilterOutcome {
        let cfg = &self.config;
        if cfg.scheme.uses_dynamic_sampling() {
            let first = self.rollout_round(&self.params, 1, cfg.gen_batch);
            dynamic_sampling_filter(
                first,
                cfg.train_batch,
                |round| self.rollout_round(&self.params, round, cfg.gen_batch),
                cfg.max_filter_rounds,
            )
        } else {
            let groups = self.rollout_round(&self.params, 1, cfg.train_batch);
            let mut out = FilterOutcome {
                rounds: 1,
                groups_seen: groups.len(),
                ..FilterOutcome::default()
            };
            for g in &groups {
                out.responses_seen += g.rewards.len();
                out.correct_seen += g.rewards.iter().filter(|&&r| r == 1).count();
                out.degenerate_seen += usize::from(g.pass_rate().is_degenerate());
            }
            out.groups = groups;
            out
        }
    }

    fn cue(&self, prompt_id: u64) -> Result<&[u32]> {
        self.prompts
            .get(prompt_id as usize)
            .map(Prompt::cue)
            .ok_or_else(|| Error::Misaligned(format!("unknown prompt id {prompt_id}")))
    }

    fn batch_std(groups: &[ResponseGroup]) -> Option<f64> {
        batch_reward_std(groups).ok().filter(|s| *s > 0.0)
    }

    /// Per-group weights under the configured scheme. `lipo_std` is the
    /// pooled reward std of the whole training batch; `None` zeroes LIPO.
    fn group_weights(&self, stats: &[GroupStats], batch_tokens: usize, lipo_std: Option<f64>) -> Vec<f64> {
        stats
            .iter()
            .map(|s| match self.config.scheme {
                SchemeKind::Grpo => scheme_weight(&WeightScheme::Grpo, s),
                SchemeKind::Dapo => scheme_weight(&WeightScheme::Dapo, s),
                SchemeKind::Lipo => lipo_std
                    .map_or(0.0, |batch_std| scheme_weight(&WeightScheme::Lipo { batch_std }, s)),
                SchemeKind::DrGrpo => scheme_weight(
                    &WeightScheme::DrGrpo {
                        batch_tokens: batch_tokens.max(1),
                    },
                    s,
                ),
                SchemeKind::Daro => {
                    if s.degenerate {
                        0.0
                    } else {
                        let w = self.daro.as_ref().expect("DARO state");
                        scheme_weight(&WeightScheme::Daro(w), s)
                    }
                }
            })
            .collect()
    }

    /// Gradient passes over `groups` in mini-batches, updating the policy and,
    /// for DARO, the weights. The policy snapshot for ratios is the policy at
    /// entry, which must be the one the rollouts were sampled from.
    pub fn update_on_batch(&mut self, groups: &[ResponseGroup]) -> Result<Vec<PassReport>> {
        let stats: Vec<GroupStats> = groups.iter().map(group_stats).collect();
        let lipo_std = Self::batch_std(groups);
        let mut reports = Vec::new();
        for (chunk, chunk_stats) in groups
            .chunks(self.config.mini_batch)
            .zip(stats.chunks(self.config.mini_batch))
        {
            let tokens: usize = chunk.iter().map(ResponseGroup::token_count).sum();
            let weights = self.group_weights(chunk_stats, tokens, lipo_std);
            let batch = chunk
                .iter()
                .zip(chunk_stats)
                .zip(&weights)
                .map(|((g, s), &w)| {
                    Ok(BatchGroup {
                        cue: self.cue(g.prompt_id)?,
                        group: g,
                        stats: s,
                        weight: w,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let eval = evaluate_batch(&self.params, &batch, &self.clip, self.config.temperature, true)?;
            let mut grad = eval.grad.expect("gradient requested");
            let grad_norm = clip_global_norm(&mut grad, self.config.grad_clip_norm);
            let clipped_grad_norm = global_norm(&grad);
            if let Some(daro) = self.daro.as_mut() {
                let wgrad = daro.weight_gradient(&eval.breakdown)?;
                daro.apply_weight_update(&wgrad)?;
            }
            self.policy_opt.step(self.params.as_mut_slice(), &grad);
            reports.push(PassReport {
                groups: chunk.len(),
                tokens,
                loss: eval.loss,
                max_ratio_deviation: eval.max_ratio_deviation,
                boundary_tokens: eval.boundary_tokens,
                clipped_tokens: eval.clipped_tokens,
                grad_norm,
                clipped_grad_norm,
            });
        }
        Ok(reports)
    }

    fn weight_snapshot(&self, batch_tokens: usize, lipo_std: Option<f64>) -> BTreeMap<PassRate, f64> {
        let k_total = self.config.group_size as u32;
        if let Some(daro) = &self.daro {
            return daro.iter().collect();
        }
        PassRate::interior(k_total)
            .map(|mu| {
                let m = mu.value();
                let stats = GroupStats {
                    pass_rate: mu,
                    mu: m,
                    sigma: (m * (1.0 - m)).sqrt(),
                    k: mu.k,
                    adv_pos: 0.0,
                    adv_neg: 0.0,
                    len_pos: 0,
                    len_neg: 0,
                    degenerate: false,
                };
                (mu, self.group_weights(&[stats], batch_tokens, lipo_std)[0])
            })
            .collect()
    }

    /// One full step: snapshot, sample (and filter), update, measure.
    pub fn train_step(&mut self) -> Result<StepOutcome> {
        let sampled = self.sample_batch();
        let step = self.step;
        let pass_rate = if sampled.responses_seen == 0 {
            0.0
        } else {
            sampled.correct_seen as f64 / sampled.responses_seen as f64
        };
        let groups = sampled.groups;
        let mut metrics = StepMetrics {
            step,
            pass_rate,
            batch_reward: 0.0,
            batch_loss: 0.0,
            entropy: 0.0,
            tokens: 0,
            groups_sampled: sampled.groups_seen,
            groups_degenerate: sampled.degenerate_seen,
            groups_kept: groups.len(),
            rounds: sampled.rounds,
            shortfall: sampled.shortfall,
            skipped: groups.is_empty(),
            passes: 0,
            first_pass_ratio_dev: 0.0,
            last_pass_ratio_dev: 0.0,
            grad_norm: 0.0,
            clipped_grad_norm: 0.0,
            boundary_tokens: 0,
            buckets: BTreeMap::new(),
            weights: BTreeMap::new(),
        };
        let batch_log = groups
            .iter()
            .map(|g| BatchLogEntry {
                step,
                prompt_id: g.prompt_id,
                pass_rate: g.pass_rate(),
            })
            .collect();

        if !groups.is_empty() {
            let stats: Vec<GroupStats> = groups.iter().map(group_stats).collect();
            let tokens: usize = groups.iter().map(ResponseGroup::token_count).sum();
            let lipo_std = Self::batch_std(&groups);
            let weights = self.group_weights(&stats, tokens, lipo_std);
            let batch = groups
                .iter()
                .zip(&stats)
                .zip(&weights)
                .map(|((g, s), &w)| {
                    Ok(BatchGroup {
                        cue: self.cue(g.prompt_id)?,
                        group: g,
                        stats: s,
                        weight: w,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let eval = evaluate_batch(&self.params, &batch, &self.clip, self.config.temperature, false)?;
            let responses: usize = groups.iter().map(|g| g.rewards.len()).sum();
            let correct: usize = groups
                .iter()
                .map(|g| g.rewards.iter().filter(|&&r| r == 1).count())
                .sum();
            metrics.batch_reward = correct as f64 / responses as f64;
            metrics.batch_loss = eval.loss;
            metrics.tokens = tokens;
            metrics.buckets = eval.breakdown.per_mu;
            metrics.entropy = mean_token_entropy(
                &self.params,
                batch
                    .iter()
                    .flat_map(|b| b.group.responses.iter().flat_map(move |r| contexts_along(b.cue, r))),
                self.config.temperature,
            );
            drop(batch);

            let reports = self.update_on_batch(&groups)?;
            metrics.passes = reports.len();
            metrics.first_pass_ratio_dev = reports.first().map_or(0.0, |r| r.max_ratio_deviation);
            metrics.last_pass_ratio_dev = reports.last().map_or(0.0, |r| r.max_ratio_deviation);
            metrics.grad_norm = reports.iter().map(|r| r.grad_norm).fold(0.0, f64::max);
            metrics.clipped_grad_norm = reports.iter().map(|r| r.clipped_grad_norm).fold(0.0, f64::max);
            metrics.boundary_tokens = reports.iter().map(|r| r.boundary_tokens).sum();
            metrics.weights = self.weight_snapshot(tokens, lipo_std);
        } else {
            metrics.weights = self.weight_snapshot(0, None);
        }
        self.step += 1;
        Ok(StepOutcome {
            metrics,
            batch: batch_log,
        })
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: MetricsTable,
    pub params: PolicyParams,
    pub daro_weights: Option<DaroWeights>,
    pub batch_log: Vec<BatchLogEntry>,
}

/// Runs `total_steps` steps. With `out_dir`, writes the config, the prompt
/// set, `metrics.csv`, checkpoints and (if enabled) `batches.csv` there.
pub fn run(config: &TrainConfig, out_dir: Option<&Path>) -> Result<RunOutput> {
    run_with(config, out_dir, |_| {})
}

/// [`run`] with a callback after every step.
pub fn run_with<F>(config: &TrainConfig, out_dir: Option<&Path>, mut on_step: F) -> Result<RunOutput>
where
    F: FnMut(&StepMetrics),
{
    let mut trainer = Trainer::new(config.clone())?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), config.to_text())?;
        fs::write(
            dir.join("tasks.txt"),
            write_prompt_set(trainer.prompts(), config.vocab_size),
        )?;
    }
    let mut table = MetricsTable::new(config.scheme, config.group_size as u32);
    let mut batch_log = Vec::new();
    for _ in 0..config.total_steps {
        let outcome = trainer.train_step()?;
        on_step(&outcome.metrics);
        if config.log_batches {
            batch_log.extend(outcome.batch);
        }
        let step_no = outcome.metrics.step + 1;
        table.rows.push(outcome.metrics);
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && step_no % config.checkpoint_every == 0 {
                write_checkpoint(trainer.params(), &dir.join(format!("checkpoint_step_{step_no:05}.txt")))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        write_checkpoint(trainer.params(), &dir.join("checkpoint_final.txt"))?;
        table.write_csv_file(&dir.join("metrics.csv"))?;
        if config.log_batches {
            write_batch_log(&batch_log, &dir.join("batches.csv"))?;
        }
    }
    Ok(RunOutput {
        metrics: table,
        params: trainer.params().clone(),
        daro_weights: trainer.daro_weights().cloned(),
        batch_log,
    })
}

fn write_checkpoint(params: &PolicyParams, path: &Path) -> Result<()> {
    params.write_checkpoint(BufWriter::new(fs::File::create(path)?))
}

pub fn write_batch_log(entries: &[BatchLogEntry], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "prompt_id", "k", "group_size"])?;
    for e in entries {
        w.write_record([
            e.step.to_string(),
            e.prompt_id.to_string(),
            e.pass_rate.k.to_string(),
            e.pass_rate.group_size.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_batch_log(path: &Path) -> Result<Vec<BatchLogEntry>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            let field = |i: usize| -> Result<u64> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Parse(format!("batch log row {:?}", rec)))
            };
            let (k, group_size) = (field(2)? as u32, field(3)? as u32);
            if k > group_size {
                return Err(Error::Parse(format!("k {k} > K {group_size}")));
            }
            Ok(BatchLogEntry {
                step: field(0)? as usize,
                prompt_id: field(1)?,
                pass_rate: PassRate::new(k, group_size),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(rewards: &[u8]) -> ResponseGroup {
        ResponseGroup {
            prompt_id: rewards.len() as u64,
            responses: rewards.iter().map(|_| vec![0]).collect(),
            rewards: rewards.to_vec(),
            rollout_logprobs: rewards.iter().map(|_| vec![-1.0]).collect(),
        }
    }

    #[test]
    fn filter_keeps_good_groups_in_order() {
        let mut input = Vec::new();
        for i in 0..8u64 {
            let mut g = if [1, 4, 6].contains(&i) { group(&[1, 1]) } else { group(&[1, 0]) };
            g.prompt_id = i;
            input.push(g);
        }
        let out = dynamic_sampling_filter(input, 5, |_| unreachable!(), 3);
        let ids: Vec<u64> = out.groups.iter().map(|g| g.prompt_id).collect();
        assert_eq!(ids, vec![0, 2, 3, 5, 7]);
        assert!(!out.shortfall);
        assert_eq!(out.rounds, 1);
        assert_eq!(out.degenerate_seen, 3);
    }

    #[test]
    fn filter_shortfall_after_max_rounds() {
        let mut calls = Vec::new();
        let out = dynamic_sampling_filter(
            vec![group(&[0, 0]); 4],
            2,
            |round| {
                calls.push(round);
                vec![group(&[1, 1]); 4]
            },
            3,
        );
        assert!(out.groups.is_empty());
        assert!(out.shortfall);
        assert_eq!(out.rounds, 3);
        assert_eq!(calls, vec![2, 3]);
        assert_eq!(out.groups_seen, 12);
    }

    #[test]
    fn filter_tops_up_across_rounds() {
        let out = dynamic_sampling_filter(
            vec![group(&[1, 0]), group(&[0, 0])],
            3,
            |_| vec![group(&[0, 1]), group(&[1, 0]), group(&[0, 1])],
            4,
        );
        assert_eq!(out.groups.len(), 3);
        assert_eq!(out.rounds, 2);
        assert_eq!(out.groups_seen, 5);
    }
}
