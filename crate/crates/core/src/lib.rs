//! Desk-scale laboratory for RLVR policy optimization.
//!
//! The crate implements the unified weighted clipped-surrogate loss that
//! covers GRPO, DAPO, LIPO and Dr.GRPO, the DARO adaptive difficulty
//! reweighting rule, a tiny linear-softmax autoregressive policy with exact
//! gradients, synthetic exact-match tasks, a training loop and the
//! diagnostics (CSV metrics, SVG charts, property suites) used to study
//! per-difficulty loss scales.
//!
//! Module map:
//! - [`group_stats`]: pass rates, binary-reward advantages and scheme weights.
//! - [`surrogate`]: the clip function, token-mean batch loss and its
//!   per-pass-rate breakdown, closed forms and Hoeffding bounds.
//! - [`daro`]: learnable per-pass-rate weights and their regularized loss.
//! - [`policy`]: the linear-softmax policy, sampling, ratios and gradients.
//! - [`task`]: synthetic verifiable tasks.
//! - [`trainer`]: the rollout / filter / update loop.
//! - [`diagnostics`]: metrics tables, charts, reports and the verify suite.

pub mod config;
pub mod daro;
pub mod diagnostics;
pub mod error;
pub mod group_stats;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod surrogate;
pub mod task;
pub mod trainer;

pub use error::{Error, Result};
pub use group_stats::{GroupStats, PassRate, ResponseGroup, SchemeKind, WeightScheme};
pub use surrogate::{ClipConfig, GroupLossBreakdown};
