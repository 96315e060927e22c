//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by data loading, model fitting and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-numeric value `{value}` in column `{column}` (record {record})")]
    NonNumeric {
        column: String,
        value: String,
        record: usize,
    },

    #[error("duplicate time {time} for individual `{id}`")]
    DuplicateTime { id: String, time: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("kernel domain error: {0}")]
    KernelDomain(String),

    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("singular leaf system: {0}")]
    SingularLeafSystem(String),

    #[error("no out-of-bag observations available")]
    NoOobSamples,

    #[error("empty candidate grid")]
    EmptyGrid,

    #[error("evaluation grid overlaps a measurement time (t = {0})")]
    GridOverlapsMeasurements(f64),

    #[error("individual `{id}` has {available} observations, cannot hold out {requested}")]
    InfeasibleSplit {
        id: String,
        available: usize,
        requested: usize,
    },

    #[error("unknown individual `{0}`")]
    UnknownIndividual(String),

    #[error("rank lists are not permutations of the same variable set")]
    NotPermutations,

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("model file format version {found} unsupported (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
