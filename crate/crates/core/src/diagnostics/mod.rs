//! Metrics persistence, charts, loss-scale studies and the property suite.

pub mod compare;
pub mod metrics;
pub mod reports;
pub mod svg;
pub mod verify;

pub use compare::{compare_schemes, Comparison, SchemeSummary};
pub use metrics::MetricsTable;
pub use reports::{loss_scale_report, normalized_length_report, smooth_series};
pub use verify::{verify_suite, Mutation, VerifyOptions, VerifyReport};
