//! Synthetic verifiable tasks: reproduce a target token sequence, then stop.
//!
//! Each prompt carries a target of `d` non-EOS tokens. The policy sees the
//! target as its cue; the verifier pays 1 only for an exact reproduction
//! followed by EOS. Difficulty is the target length, so the pass rate of a
//! policy that copies each token with probability `q` is `q^(d + 1)` and
//! positive responses are exactly `d + 1` tokens long.

use std::fmt::Write as _;
use std::io::BufRead;

use rand::Rng;

use crate::error::{Error, Result};
use crate::policy::{Trajectory, EOS};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub vocab_size: usize,
    pub max_response_length: usize,
    /// `(target length d, prompt count)` pairs.
    pub difficulty_profile: Vec<(usize, usize)>,
    pub seed: u64,
}

impl TaskSpec {
    pub fn n_prompts(&self) -> usize {
        self.difficulty_profile.iter().map(|&(_, n)| n).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::Config(format!("vocab size {} < 3", self.vocab_size)));
        }
        for &(d, _) in &self.difficulty_profile {
            if d < 1 || d + 1 > self.max_response_length {
                return Err(Error::Config(format!(
                    "difficulty {d} outside [1, {}]",
                    self.max_response_length.saturating_sub(1)
                )));
            }
        }
        if self.n_prompts() == 0 {
            return Err(Error::Config("task set has no prompts".into()));
        }
        Ok(())
    }
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            max_response_length: 12,
            difficulty_profile: [1, 2, 3, 4, 6, 8].iter().map(|&d| (d, 32)).collect(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub id: u64,
    pub difficulty: usize,
    pub target: Vec<u32>,
}

impl Prompt {
    /// The sequence the policy conditions on.
    pub fn cue(&self) -> &[u32] {
        &self.target
    }
}

/// Deterministic prompt set; targets are uniform over non-EOS tokens.
pub fn generate_prompt_set(spec: &TaskSpec) -> Result<Vec<Prompt>> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, &[0x7a5c]);
    let mut prompts = Vec::with_capacity(spec.n_prompts());
    for &(d, count) in &spec.difficulty_profile {
        for _ in 0..count {
            let target = (0..d)
                .map(|_| rng.random_range(1..spec.vocab_size as u32))
                .collect();
            prompts.push(Prompt {
                id: prompts.len() as u64,
                difficulty: d,
                target,
            });
        }
    }
    Ok(prompts)
}

/// 1 iff the response terminated and its answer equals the target.
pub fn verify(prompt: &Prompt, trajectory: &Trajectory) -> u8 {
    u8::from(trajectory.terminated && trajectory.answer() == prompt.target.as_slice())
}

/// Line format: `id,difficulty,t1 t2 ...`, preceded by a `#` header.
pub fn write_prompt_set(prompts: &[Prompt], vocab_size: usize) -> String {
    let mut out = format!("# daro-lab tasks vocab_size={vocab_size}\n");
    for p in prompts {
        let toks: Vec<String> = p.target.iter().map(u32::to_string).collect();
        let _ = writeln!(out, "{},{},{}", p.id, p.difficulty, toks.join(" "));
    }
    out
}

pub fn read_prompt_set<R: BufRead>(r: R) -> Result<Vec<Prompt>> {
    let mut prompts = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::Parse(format!("line {}: {line:?}", n + 1));
        let mut parts = line.splitn(3, ',');
        let id = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let difficulty: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let target: Vec<u32> = parts
            .next()
            .ok_or_else(bad)?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if target.len() != difficulty || target.contains(&EOS) {
            return Err(bad());
        }
        prompts.push(Prompt {
            id,
            difficulty,
            target,
        });
    }
    Ok(prompts)
}
