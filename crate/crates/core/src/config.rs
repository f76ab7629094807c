//! Training configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;

use crate::daro::DaroConfig;
use crate::error::{Error, Result};
use crate::group_stats::SchemeKind;
use crate::surrogate::{ClipConfig, NegativeBranch};
use crate::task::TaskSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub scheme: SchemeKind,
    /// Responses per prompt (`K`).
    pub group_size: usize,
    /// Groups per update step.
    pub train_batch: usize,
    /// Groups per gradient step.
    pub mini_batch: usize,
    /// Prompts per rollout round when dynamic sampling is on.
    pub gen_batch: usize,
    pub max_filter_rounds: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub negative_branch: NegativeBranch,
    pub lr_policy: f64,
    pub lr_weights: f64,
    pub grad_clip_norm: f64,
    pub total_steps: usize,
    pub temperature: f64,
    pub seed: u64,
    pub daro_c: f64,
    pub daro_clamp_min: f64,
    pub daro_clamp_max: f64,
    pub daro_init: f64,
    pub vocab_size: usize,
    pub max_response_length: usize,
    pub position_buckets: usize,
    pub difficulty_profile: Vec<(usize, usize)>,
    pub task_seed: u64,
    /// Cue-copy logit of the initial policy.
    pub init_logit: f64,
    /// Logit the initial policy puts on EOS once the cue is exhausted.
    pub stop_logit: f64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Keep a per-step log of every training-batch group.
    pub log_batches: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: SchemeKind::Daro,
            group_size: 8,
            train_batch: 32,
            mini_batch: 16,
            gen_batch: 96,
            max_filter_rounds: 4,
            eps_low: 0.2,
            eps_high: 0.28,
            negative_branch: NegativeBranch::Pessimistic,
            lr_policy: 1e-3,
            lr_weights: 1e-2,
            grad_clip_norm: 0.5,
            total_steps: 300,
            temperature: 1.0,
            seed: 0,
            daro_c: 1.0,
            daro_clamp_min: 1e-3,
            daro_clamp_max: 1e3,
            daro_init: 1.0,
            vocab_size: 16,
            max_response_length: 12,
            position_buckets: 16,
            difficulty_profile: [1, 2, 3, 4, 6, 8].iter().map(|&d| (d, 32)).collect(),
            task_seed: 0,
            init_logit: 4.0,
            stop_logit: 1.5,
            checkpoint_every: 0,
            log_batches: true,
        }
    }
}

/// Every key accepted by [`TrainConfig::set`].
pub const KEYS: &[&str] = &[
    "scheme",
    "group_size",
    "train_batch",
    "mini_batch",
    "gen_batch",
    "max_filter_rounds",
    "eps_low",
    "eps_high",
    "negative_branch",
    "lr_policy",
    "lr_weights",
    "grad_clip_norm",
    "total_steps",
    "temperature",
    "seed",
    "daro_c",
    "daro_clamp_min",
    "daro_clamp_max",
    "daro_init",
    "vocab_size",
    "max_response_length",
    "position_buckets",
    "difficulty_profile",
    "task_seed",
    "init_logit",
    "stop_logit",
    "checkpoint_every",
    "log_batches",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_profile(value: &str) -> Result<Vec<(usize, usize)>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (d, n) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("difficulty_profile item {item:?} is not d:count")))?;
            Ok((parse("difficulty_profile", d.trim())?, parse("difficulty_profile", n.trim())?))
        })
        .collect()
}

impl TrainConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "scheme" => self.scheme = value.parse()?,
            "group_size" | "K" => self.group_size = parse(key, value)?,
            "train_batch" => self.train_batch = parse(key, value)?,
            "mini_batch" => self.mini_batch = parse(key, value)?,
            "gen_batch" => self.gen_batch = parse(key, value)?,
            "max_filter_rounds" => self.max_filter_rounds = parse(key, value)?,
            "eps_low" => self.eps_low = parse(key, value)?,
            "eps_high" => self.eps_high = parse(key, value)?,
            "negative_branch" => {
                self.negative_branch = match value {
                    "pessimistic" => NegativeBranch::Pessimistic,
                    "bounded" => NegativeBranch::Bounded,
                    other => {
                        return Err(Error::Config(format!("negative_branch: unknown {other:?}")))
                    }
                }
            }
            "lr_policy" => self.lr_policy = parse(key, value)?,
            "lr_weights" => self.lr_weights = parse(key, value)?,
            "grad_clip_norm" => self.grad_clip_norm = parse(key, value)?,
            "total_steps" | "steps" => self.total_steps = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "daro_c" => self.daro_c = parse(key, value)?,
            "daro_clamp_min" => self.daro_clamp_min = parse(key, value)?,
            "daro_clamp_max" => self.daro_clamp_max = parse(key, value)?,
            "daro_init" => self.daro_init = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "max_response_length" => self.max_response_length = parse(key, value)?,
            "position_buckets" => self.position_buckets = parse(key, value)?,
            "difficulty_profile" => self.difficulty_profile = parse_profile(value)?,
            "task_seed" => self.task_seed = parse(key, value)?,
            "init_logit" => self.init_logit = parse(key, value)?,
            "stop_logit" => self.stop_logit = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "log_batches" => self.log_batches = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "scheme" => self.scheme.to_string(),
            "group_size" => self.group_size.to_string(),
            "train_batch" => self.train_batch.to_string(),
            "mini_batch" => self.mini_batch.to_string(),
            "gen_batch" => self.gen_batch.to_string(),
            "max_filter_rounds" => self.max_filter_rounds.to_string(),
            "eps_low" => format!("{:?}", self.eps_low),
            "eps_high" => format!("{:?}", self.eps_high),
            "negative_branch" => match self.negative_branch {
                NegativeBranch::Pessimistic => "pessimistic".into(),
                NegativeBranch::Bounded => "bounded".into(),
            },
            "lr_policy" => format!("{:?}", self.lr_policy),
            "lr_weights" => format!("{:?}", self.lr_weights),
            "grad_clip_norm" => format!("{:?}", self.grad_clip_norm),
            "total_steps" => self.total_steps.to_string(),
            "temperature" => format!("{:?}", self.temperature),
            "seed" => self.seed.to_string(),
            "daro_c" => format!("{:?}", self.daro_c),
            "daro_clamp_min" => format!("{:?}", self.daro_clamp_min),
            "daro_clamp_max" => format!("{:?}", self.daro_clamp_max),
            "daro_init" => format!("{:?}", self.daro_init),
            "vocab_size" => self.vocab_size.to_string(),
            "max_response_length" => self.max_response_length.to_string(),
            "position_buckets" => self.position_buckets.to_string(),
            "difficulty_profile" => self
                .difficulty_profile
                .iter()
                .map(|(d, n)| format!("{d}:{n}"))
                .collect::<Vec<_>>()
                .join(","),
            "task_seed" => self.task_seed.to_string(),
            "init_logit" => format!("{:?}", self.init_logit),
            "stop_logit" => format!("{:?}", self.stop_logit),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "log_batches" => self.log_batches.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn clip_config(&self) -> Result<ClipConfig> {
        Ok(ClipConfig::new(self.eps_low, self.eps_high)?.with_negative_branch(self.negative_branch))
    }

    pub fn daro_config(&self) -> DaroConfig {
        DaroConfig {
            c: self.daro_c,
            lr: self.lr_weights,
            clamp_min: self.daro_clamp_min,
            clamp_max: self.daro_clamp_max,
            init: self.daro_init,
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            vocab_size: self.vocab_size,
            max_response_length: self.max_response_length,
            difficulty_profile: self.difficulty_profile.clone(),
            seed: self.task_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.group_size < 2 {
            return fail(format!("group_size {} < 2", self.group_size));
        }
        if self.train_batch == 0 || self.mini_batch == 0 {
            return fail("train_batch and mini_batch must be positive".into());
        }
        if !self.train_batch.is_multiple_of(self.mini_batch) {
            return fail(format!(
                "mini_batch {} does not divide train_batch {}",
                self.mini_batch, self.train_batch
            ));
        }
        if self.scheme.uses_dynamic_sampling() {
            if self.gen_batch < self.train_batch {
                return fail(format!(
                    "gen_batch {} < train_batch {} with dynamic sampling",
                    self.gen_batch, self.train_batch
                ));
            }
            if self.max_filter_rounds == 0 {
                return fail("max_filter_rounds must be >= 1".into());
            }
        }
        for (name, v) in [
            ("lr_policy", self.lr_policy),
            ("lr_weights", self.lr_weights),
            ("grad_clip_norm", self.grad_clip_norm),
            ("temperature", self.temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} = {v} must be positive"));
            }
        }
        if !(self.init_logit.is_finite() && self.stop_logit.is_finite()) {
            return fail("init_logit and stop_logit must be finite".into());
        }
        if self.position_buckets == 0 {
            return fail("position_buckets must be positive".into());
        }
        self.clip_config()?;
        self.daro_config().validate()?;
        self.task_spec().validate()
    }

    /// Keys whose values differ between two configs.
    pub fn differing_keys(&self, other: &TrainConfig) -> Vec<&'static str> {
        KEYS.iter()
            .copied()
            .filter(|k| self.get(k) != other.get(k))
            .collect()
    }
}
