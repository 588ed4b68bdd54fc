//! Error type shared by every stage of the estimation pipeline.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing required column `{0}` in header")]
    MissingColumn(String),

    #[error("row {row}: {msg}")]
    Row { row: usize, msg: String },

    #[error("duplicate (unit, time) keys: {}", format_keys(.0))]
    DuplicateKeys(Vec<(String, i64)>),

    #[error("row {row}: treatment value `{value}` is not 0 or 1")]
    InvalidTreatment { row: usize, value: String },

    #[error(
        "unit `{unit}`: treatment reverts to 0 at t={time}; \
         absorbing mode requires monotone adoption (use an episode mode)"
    )]
    NonMonotoneTreatment { unit: String, time: i64 },

    #[error("unknown unit `{0}`")]
    UnknownUnit(String),

    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),

    #[error("invalid event window: {0}")]
    InvalidWindow(String),

    #[error("invalid covariate spec: {0}")]
    InvalidSpec(String),

    #[error("empty stack: {0}")]
    EmptyStack(String),

    #[error("design failure in frame {frame}: {reason}")]
    Design { frame: String, reason: String },

    #[error(
        "entropy balancing did not converge in frame {frame} \
         (worst column `{column}`, standardized violation {violation:.3e})"
    )]
    NoConvergence {
        frame: String,
        column: String,
        violation: f64,
    },

    #[error("degenerate weights in frame {frame}: {reason}")]
    Degenerate { frame: String, reason: String },

    #[error("estimation failure: {0}")]
    Estimation(String),

    #[error("bootstrap failure: {0}")]
    Bootstrap(String),
}

fn format_keys(keys: &[(String, i64)]) -> String {
    let mut out = keys
        .iter()
        .take(10)
        .map(|(u, t)| format!("({u}, {t})"))
        .collect::<Vec<_>>()
        .join(", ");
    if keys.len() > 10 {
        out.push_str(&format!(", ... {} total", keys.len()));
    }
    out
}
