//! Linear-softmax autoregressive policy.
//!
//! A context is a prompt cue, a position and the previous token. It
//! activates exactly three rows of the `F x V` parameter matrix:
//!
//! - the cue row: the cue token at this position, or the end marker once the
//!   cue is exhausted (`[0, V)`),
//! - the position-bucket row (`[V, V + P)`),
//! - the previous-token row, with the start of the sequence encoded as EOS
//!   (`[V + P, 2V + P)`).
//!
//! Logits are the sum of the active rows divided by the temperature, so
//! log-probability gradients are exact and cheap.

use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::group_stats::{GroupStats, ResponseGroup};
use crate::surrogate::{
    clip_branch, is_on_boundary, weighted_token_mean_loss, ClipBranch, ClipConfig,
    GroupLossBreakdown, WeightedGroup,
};

/// End-of-sequence token id. Ordinary tokens are `1..V`.
pub const EOS: u32 = 0;

const CHECKPOINT_MAGIC: &str = "DAROLAB-POLICY-V1";

#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub cue: &'a [u32],
    pub position: usize,
    pub prev: u32,
}

impl<'a> Context<'a> {
    pub fn start(cue: &'a [u32]) -> Self {
        Self {
            cue,
            position: 0,
            prev: EOS,
        }
    }

    pub fn next(self, token: u32) -> Self {
        Self {
            cue: self.cue,
            position: self.position + 1,
            prev: token,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab: usize,
    positions: usize,
    matrix: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(vocab: usize, positions: usize) -> Result<Self> {
        if vocab < 3 {
            return Err(Error::Config(format!("vocab size {vocab} < 3")));
        }
        if positions == 0 {
            return Err(Error::Config("need at least one position bucket".into()));
        }
        let f = 2 * vocab + positions;
        Ok(Self {
            vocab,
            positions,
            matrix: vec![0.0; f * vocab],
        })
    }

    /// Starting point that favours copying the cue: every cue token row puts
    /// `copy` on its own token and the end-marker row puts `stop` on EOS.
    pub fn with_copy_prior(vocab: usize, positions: usize, copy: f64, stop: f64) -> Result<Self> {
        let mut p = Self::zeros(vocab, positions)?;
        for v in 1..vocab {
            p.matrix[v * vocab + v] = copy;
        }
        p.matrix[0] = stop;
        Ok(p)
    }

    pub fn from_matrix(vocab: usize, feature_dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if feature_dim < 2 * vocab + 1 {
            return Err(Error::Config(format!(
                "feature dim {feature_dim} too small for vocab {vocab}"
            )));
        }
        if matrix.len() != feature_dim * vocab {
            return Err(Error::Misaligned(format!(
                "{} values for a {feature_dim} x {vocab} matrix",
                matrix.len()
            )));
        }
        if let Some(x) = matrix.iter().find(|x| !x.is_finite()) {
            return Err(Error::Parse(format!("non-finite parameter {x}")));
        }
        let mut p = Self::zeros(vocab, feature_dim - 2 * vocab)?;
        p.matrix = matrix;
        Ok(p)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.vocab + self.positions
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.matrix
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.matrix
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.vocab..(i + 1) * self.vocab]
    }

    /// Indices of the three active feature rows.
    pub fn active_rows(&self, ctx: &Context<'_>) -> [usize; 3] {
        let cue = ctx.cue.get(ctx.position).copied().unwrap_or(EOS) as usize;
        debug_assert!(cue < self.vocab && (ctx.prev as usize) < self.vocab);
        [
            cue,
            self.vocab + ctx.position.min(self.positions - 1),
            self.vocab + self.positions + ctx.prev as usize,
        ]
    }

    /// Log-softmax of the context's logits into `out`.
    pub fn log_probs_into(&self, ctx: &Context<'_>, temperature: f64, out: &mut [f64]) {
        let rows = self.active_rows(ctx);
        let v = self.vocab;
        let (a, b, c) = (self.row(rows[0]), self.row(rows[1]), self.row(rows[2]));
        let mut max = f64::NEG_INFINITY;
        for j in 0..v {
            out[j] = (a[j] + b[j] + c[j]) / temperature;
            max = max.max(out[j]);
        }
        let sum: f64 = out[..v].iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        out[..v].iter_mut().for_each(|z| *z -= lse);
    }

    pub fn log_probs(&self, ctx: &Context<'_>, temperature: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab];
        self.log_probs_into(ctx, temperature, &mut out);
        out
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "{} {}", self.feature_dim(), self.vocab)?;
        for row in self.matrix.chunks(self.vocab) {
            let line: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let magic = lines.next().transpose()?.unwrap_or_default();
        if magic.trim() != CHECKPOINT_MAGIC {
            return Err(Error::Parse(format!("bad checkpoint magic {magic:?}")));
        }
        let header = lines.next().transpose()?.unwrap_or_default();
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::Parse(format!("bad dimension {s:?}"))))
            .collect::<Result<_>>()?;
        let [f, v] = dims[..] else {
            return Err(Error::Parse(format!("bad checkpoint header {header:?}")));
        };
        let mut matrix = Vec::with_capacity(f * v);
        for line in lines {
            for tok in line?.split_whitespace() {
                matrix.push(
                    tok.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad value {tok:?}")))?,
                );
            }
        }
        Self::from_matrix(v, f, matrix)
    }
}

/// Softmax distribution over the vocabulary.
pub fn token_distribution(params: &PolicyParams, ctx: &Context<'_>, temperature: f64) -> Vec<f64> {
    params
        .log_probs(ctx, temperature)
        .into_iter()
        .map(f64::exp)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt_id: u64,
    /// Sampled tokens, including the terminating EOS when one was sampled.
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f64>,
    pub terminated: bool,
}

impl Trajectory {
    /// Emitted answer, without the terminating EOS.
    pub fn answer(&self) -> &[u32] {
        if self.terminated {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Samples tokens until EOS or `max_len` tokens.
pub fn sample_response<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt_id: u64,
    cue: &[u32],
    max_len: usize,
    temperature: f64,
    rng: &mut R,
) -> Trajectory {
    assert!(max_len >= 1);
    let mut lp = vec![0.0; params.vocab()];
    let mut ctx = Context::start(cue);
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    let mut terminated = false;
    while tokens.len() < max_len {
        params.log_probs_into(&ctx, temperature, &mut lp);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut choice = lp.len() - 1;
        for (j, &l) in lp.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                choice = j;
                break;
            }
        }
        let token = choice as u32;
        tokens.push(token);
        logprobs.push(lp[choice]);
        if token == EOS {
            terminated = true;
            break;
        }
        ctx = ctx.next(token);
    }
    Trajectory {
        prompt_id,
        tokens,
        logprobs,
        terminated,
    }
}

/// Log-probabilities of `tokens` under `params`, token by token.
pub fn sequence_logprobs(
    params: &PolicyParams,
    cue: &[u32],
    tokens: &[u32],
    temperature: f64,
) -> Vec<f64> {
    let mut lp = vec![0.0; params.vocab()];
    let mut ctx = Context::start(cue);
    tokens
        .iter()
        .map(|&t| {
            params.log_probs_into(&ctx, temperature, &mut lp);
            ctx = ctx.next(t);
            lp[t as usize]
        })
        .collect()
}

/// `exp(log pi_new - log pi_old)` per token.
pub fn sequence_ratio_per_token(
    params_new: &PolicyParams,
    cue: &[u32],
    tokens: &[u32],
    rollout_logprobs: &[f64],
    temperature: f64,
) -> Vec<f64> {
    sequence_logprobs(params_new, cue, tokens, temperature)
        .into_iter()
        .zip(rollout_logprobs)
        .map(|(new, old)| (new - old).exp())
        .collect()
}

/// A group in a training batch, with the cue the policy conditions on.
#[derive(Debug, Clone, Copy)]
pub struct BatchGroup<'a> {
    pub cue: &'a [u32],
    pub group: &'a ResponseGroup,
    pub stats: &'a GroupStats,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    pub loss: f64,
    pub breakdown: GroupLossBreakdown,
    /// Gradient of `loss` with respect to the parameter matrix, row-major.
    pub grad: Option<Vec<f64>>,
    /// Tokens whose ratio sits within tolerance of a clip bound.
    pub boundary_tokens: usize,
    pub clipped_tokens: usize,
    pub max_ratio_deviation: f64,
}

/// Weighted token-mean loss of a batch under `params`, with its exact
/// gradient when `with_grad` is set. Clipped tokens contribute no gradient;
/// tokens exactly on a bound use the unclipped branch.
pub fn evaluate_batch(
    params: &PolicyParams,
    batch: &[BatchGroup<'_>],
    cfg: &ClipConfig,
    temperature: f64,
    with_grad: bool,
) -> Result<BatchEvaluation> {
    let v = params.vocab();
    let batch_tokens: usize = batch.iter().map(|b| b.group.token_count()).sum();
    let norm = batch_tokens.max(1) as f64;
    let mut grad = with_grad.then(|| vec![0.0; params.as_slice().len()]);
    let mut lp = vec![0.0; v];
    let mut ratios = Vec::with_capacity(batch.len());
    let mut boundary_tokens = 0;
    let mut clipped_tokens = 0;
    let mut max_ratio_deviation: f64 = 0.0;

    for b in batch {
        let group = b.group;
        if group.responses.len() != group.rollout_logprobs.len() {
            return Err(Error::Misaligned("responses vs rollout log-probs".into()));
        }
        let mut group_ratios = Vec::with_capacity(group.responses.len());
        for ((tokens, old_lps), &reward) in group
            .responses
            .iter()
            .zip(&group.rollout_logprobs)
            .zip(&group.rewards)
        {
            if tokens.len() != old_lps.len() {
                return Err(Error::Misaligned("tokens vs rollout log-probs".into()));
            }
            let adv = b.stats.advantage(reward);
            let mut row = Vec::with_capacity(tokens.len());
            let mut ctx = Context::start(b.cue);
            for (&tok, &old) in tokens.iter().zip(old_lps) {
                params.log_probs_into(&ctx, temperature, &mut lp);
                let ratio = (lp[tok as usize] - old).exp();
                max_ratio_deviation = max_ratio_deviation.max((ratio - 1.0).abs());
                if is_on_boundary(adv, ratio, cfg) {
                    boundary_tokens += 1;
                }
                match clip_branch(adv, ratio, cfg) {
                    ClipBranch::Clipped => clipped_tokens += 1,
                    ClipBranch::Unclipped => {
                        if let Some(g) = grad.as_mut() {
                            // d(-w f / L) / d log pi = -w A r / L
                            let coef = -b.weight * adv * ratio / norm / temperature;
                            if coef != 0.0 {
                                for row_idx in params.active_rows(&ctx) {
                                    let gr = &mut g[row_idx * v..(row_idx + 1) * v];
                                    for (j, gj) in gr.iter_mut().enumerate() {
                                        *gj -= coef * lp[j].exp();
                                    }
                                    gr[tok as usize] += coef;
                                }
                            }
                        }
                    }
                    ClipBranch::Zero => {}
                }
                row.push(ratio);
                ctx = ctx.next(tok);
            }
            group_ratios.push(row);
        }
        ratios.push(group_ratios);
    }

    let weighted: Vec<WeightedGroup<'_>> = batch
        .iter()
        .map(|b| WeightedGroup {
            group: b.group,
            stats: b.stats,
            weight: b.weight,
        })
        .collect();
    let (loss, breakdown) = weighted_token_mean_loss(&weighted, &ratios, cfg)?;
    Ok(BatchEvaluation {
        loss,
        breakdown,
        grad,
        boundary_tokens,
        clipped_tokens,
        max_ratio_deviation,
    })
}

/// Exact gradient of the weighted token-mean loss.
pub fn loss_gradient(
    params: &PolicyParams,
    batch: &[BatchGroup<'_>],
    cfg: &ClipConfig,
    temperature: f64,
) -> Result<Vec<f64>> {
    Ok(evaluate_batch(params, batch, cfg, temperature, true)?
        .grad
        .expect("requested"))
}

/// Mean Shannon entropy (nats) of the next-token distribution over `contexts`.
pub fn mean_token_entropy<'a, I>(params: &PolicyParams, contexts: I, temperature: f64) -> f64
where
    I: IntoIterator<Item = Context<'a>>,
{
    let mut lp = vec![0.0; params.vocab()];
    let mut total = 0.0;
    let mut n = 0usize;
    for ctx in contexts {
        params.log_probs_into(&ctx, temperature, &mut lp);
        total -= lp
            .iter()
            .map(|&l| if l.is_finite() { l.exp() * l } else { 0.0 })
            .sum::<f64>();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Every context visited while emitting `tokens` for `cue`.
pub fn contexts_along<'a>(cue: &'a [u32], tokens: &'a [u32]) -> impl Iterator<Item = Context<'a>> + 'a {
    let mut ctx = Context::start(cue);
    tokens.iter().map(move |&t| {
        let here = ctx;
        ctx = ctx.next(t);
        here
    })
}
