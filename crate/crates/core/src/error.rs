use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate input in {op}: {detail}")]
    DegenerateInput { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid parameter {name}: {detail}")]
    Parameter { name: &'static str, detail: String },

    #[error("batch too small: need at least 2 samples, got {0}")]
    BatchTooSmall(usize),

    #[error("every anchor was skipped: no anchor has a positive")]
    EmptyLoss,

    #[error("KL divergence undefined: q[{index}] = 0 where p[{index}] > 0")]
    DivergenceUndefined { index: usize },

    #[error("undefined metric {metric}: {detail}")]
    UndefinedMetric {
        metric: &'static str,
        detail: String,
    },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("integrity error for sample {sample_id}: {detail}")]
    Integrity { sample_id: u64, detail: String },

    #[error("not enough samples for biomarker slot {slot}: need {needed} per class, have {present} present and {absent} absent")]
    Shortage {
        slot: usize,
        needed: usize,
        present: usize,
        absent: usize,
    },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("bad value for config key `{key}`: {detail}")]
    BadValue { key: String, detail: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::DegenerateInput { .. }
        )
    }
}
