use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the estimation and selection routines.
#[derive(Debug, Error)]
pub enum IvError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("outcome column required")]
    MissingOutcome,

    #[error("column `{column}` assigned to more than one role")]
    DuplicateRole { column: String },

    #[error("non-numeric cell at ({row}, {col})")]
    NonNumeric { row: usize, col: String },

    #[error("non-finite cell at ({row}, {col})")]
    NonFinite { row: usize, col: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("rank-deficient {what}: singular value ratio {ratio:.3e} below tolerance; {detail}")]
    RankDeficient {
        what: String,
        ratio: f64,
        detail: String,
    },

    #[error("underidentified: {valid} instruments left as valid for {exposures} exposures")]
    Underidentified { valid: usize, exposures: usize },

    #[error("enumeration cap exceeded: {count} candidate sets, cap is {cap}")]
    CapExceeded { count: u128, cap: u128 },

    #[error("unsupported structure: {0}")]
    Unsupported(String),

    #[error("median input missing for near-singular just-identifying sets {0:?}")]
    MissingSubsets(Vec<Vec<usize>>),

    #[error("instrument {0} has no admissible just-identifying partner")]
    NoPartner(usize),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("estimator `{estimator}` failed in {failures} of {reps} replications (first error: {first})")]
    TooManyFailures {
        estimator: String,
        failures: usize,
        reps: usize,
        first: String,
    },
}

impl IvError {
    /// True for failures of the numerics (as opposed to malformed input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            IvError::RankDeficient { .. }
                | IvError::Underidentified { .. }
                | IvError::MissingSubsets(_)
                | IvError::NoPartner(_)
                | IvError::TooManyFailures { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IvError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, IvError>;
