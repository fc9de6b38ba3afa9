//! Error type shared across the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Shapes of two values that must agree do not.
    DimensionMismatch(String),
    /// A NaN or infinite value where only finite values are allowed.
    NonFinite(String),
    /// A marginal row does not sum to 1 within tolerance.
    RowNotNormalized { row: usize, sum: f64 },
    /// A marginal entry falls outside [0, 1].
    EntryOutOfRange { row: usize, col: usize, value: f64 },
    /// A token label is not a valid index for the vocabulary.
    LabelOutOfRange {
        position: usize,
        label: u16,
        vocab_size: usize,
    },
    /// A location index outside the grid.
    IndexOutOfRange { index: usize, len: usize },
    /// A parameter or argument violates its stated range.
    InvalidArgument(String),
    /// Exhaustive enumeration refused: the state space exceeds the guard.
    InstanceTooLarge { states: f64, limit: f64 },
    /// A masked-prediction loss was requested with nothing masked.
    NoMaskedPositions,
    /// A corpus with zero grids.
    EmptyCorpus,
    /// A conditioning label the model was not trained with.
    UnknownCondition { condition: u16, count: usize },
    Io(std::io::Error),
    /// A tensor container that does not parse.
    MalformedFile(String),
    /// A tensor container written by an incompatible format version.
    VersionMismatch { found: u32, expected: u32 },
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch(what) => write!(f, "dimension mismatch: {what}"),
            Error::NonFinite(what) => write!(f, "non-finite entry: {what}"),
            Error::RowNotNormalized { row, sum } => {
                write!(f, "row not normalized: row {row} sums to {sum}")
            }
            Error::EntryOutOfRange { row, col, value } => {
                write!(f, "entry out of [0,1]: ({row}, {col}) = {value}")
            }
            Error::LabelOutOfRange {
                position,
                label,
                vocab_size,
            } => write!(
                f,
                "label out of range: position {position} holds {label}, vocabulary size {vocab_size}"
            ),
            Error::IndexOutOfRange { index, len } => {
                write!(f, "index out of range: {index} >= {len}")
            }
            Error::InvalidArgument(what) => write!(f, "invalid argument: {what}"),
            Error::InstanceTooLarge { states, limit } => write!(
                f,
                "instance too large for exhaustive enumeration: {states:.3e} states exceeds guard {limit:.1e}"
            ),
            Error::NoMaskedPositions => write!(f, "no masked positions: loss undefined"),
            Error::EmptyCorpus => write!(f, "empty corpus"),
            Error::UnknownCondition { condition, count } => write!(
                f,
                "unknown condition label {condition}: model has {count} conditions"
            ),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::MalformedFile(what) => write!(f, "malformed file: {what}"),
            Error::VersionMismatch { found, expected } => {
                write!(f, "format version mismatch: found {found}, expected {expected}")
            }
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
