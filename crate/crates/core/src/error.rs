use crate::group_stats::PassRate;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid response group: {0}")]
    InvalidGroup(String),
    #[error("degenerate batch: all pooled rewards are equal")]
    DegenerateBatch,
    #[error("degenerate pass rate {0}: requires 0 < mu < 1")]
    DegeneratePassRate(PassRate),
    #[error("no weight for pass rate {0}")]
    MissingWeight(PassRate),
    #[error("misaligned input: {0}")]
    Misaligned(String),
    #[error("no stationary point for pass rate {0}: loss {1} is not positive")]
    NoStationaryPoint(PassRate, f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("scheme comparison rejected: {0}")]
    SchemeMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
