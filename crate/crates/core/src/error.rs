use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("exponential coordinates out of range: |w| = {0} (must be < pi)")]
    ExpCoordsOutOfRange(f64),
    #[error("timestamps not strictly increasing at sample {index}")]
    NonMonotoneTime { index: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("stream length mismatch: {poses} poses vs {other} samples")]
    LengthMismatch { poses: usize, other: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown model identifier `{0}`")]
    UnknownModel(String),
    #[error("parameters do not match model {0}")]
    WrongParams(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("parameter vector for {model} has length {got}, expected {expected}")]
    VectorLength {
        model: String,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("demonstration too short for fitting: {got} samples (need {needed})")]
    TooFewSamples { needed: usize, got: usize },
    #[error("initialization failed: {0}")]
    Initialization(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrictionError {
    #[error("no sample has grip force above {g_min} N; kinetic evidence unavailable")]
    NoValidGrip { g_min: f64 },
    #[error("invalid friction configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("unclassifiable demonstration: {0}")]
    Unclassifiable(String),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("row {row}: malformed record: {message}")]
    Malformed { row: usize, message: String },
    #[error("row {row}: non-finite value in column `{column}`")]
    NotFinite { row: usize, column: String },
    #[error("row {row}: timestamp not strictly increasing")]
    NonMonotone { row: usize },
    #[error("row {row}: invalid (zero-norm) quaternion")]
    InvalidQuaternion { row: usize },
    #[error("only {got} samples after resampling (need at least {needed})")]
    TooShort { got: usize, needed: usize },
}

impl IngestError {
    /// Stable numeric code for each failure class.
    pub fn code(&self) -> u32 {
        match self {
            IngestError::Io { .. } => 200,
            IngestError::Schema(_) => 201,
            IngestError::Malformed { .. } => 202,
            IngestError::NotFinite { .. } => 203,
            IngestError::NonMonotone { .. } => 204,
            IngestError::InvalidQuaternion { .. } => 205,
            IngestError::TooShort { .. } => 206,
        }
    }

    pub fn row(&self) -> Option<usize> {
        match self {
            IngestError::Malformed { row, .. }
            | IngestError::NotFinite { row, .. }
            | IngestError::NonMonotone { row }
            | IngestError::InvalidQuaternion { row } => Some(*row),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Friction(#[from] FrictionError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
