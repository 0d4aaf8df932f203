// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

use crate::model::TransformerParams;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, ProbeError>;

/// Every failure mode the laboratory can report.
#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("could not generate {requested} entities with unique first tokens (got {generated} after {attempts} attempts)")]
    UnsatisfiableUniqueness {
        requested: usize,
        generated: usize,
        attempts: usize,
    },

    #[error("pool exhausted: {0}")]
    PoolExhausted(String),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("biography pair for person {person_id} never diverges")]
    NoDivergence { person_id: usize },

    #[error("no clean donor in the non-conflicted subset carries {value:?}")]
    NoCleanDonor { value: String },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("loss was not recorded on this tape")]
    DetachedLoss,

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SeqTooLong { len: usize, max: usize },

    #[error("training diverged at epoch {epoch}, step {step}")]
    Divergence {
        epoch: usize,
        step: usize,
        /// Parameters reached before the non-finite step, untouched by it.
        last_finite: Box<TransformerParams>,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("position {position} out of range for sequence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("injected vector has length {got}, expected d_model = {expected}")]
    DimMismatch { got: usize, expected: usize },

    #[error("model configurations differ: {0}")]
    ConfigMismatch(String),

    #[error("degenerate delta distribution, thresholds {0:?} are not strictly ascending in (0, 1)")]
    DegenerateDistribution(Vec<f64>),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("stale artifact {}: recorded hash {recorded}, found {found}", path.display())]
    StaleArtifact {
        path: PathBuf,
        recorded: String,
        found: String,
    },

    #[error("malformed file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ProbeError {
    /// Stable machine-readable name of the failure kind.
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnsatisfiableUniqueness { .. } => "UNSATISFIABLE_UNIQUENESS",
            Self::PoolExhausted(_) => "POOL_EXHAUSTED",
            Self::UnknownToken(_) => "UNKNOWN_TOKEN",
            Self::NoDivergence { .. } => "NO_DIVERGENCE",
            Self::NoCleanDonor { .. } => "NO_CLEAN_DONOR",
            Self::ShapeMismatch { .. } => "SHAPE_MISMATCH",
            Self::DetachedLoss => "DETACHED_LOSS",
            Self::SeqTooLong { .. } => "SEQ_TOO_LONG",
            Self::Divergence { .. } => "DIVERGENCE",
            Self::CorruptCheckpoint(_) => "CORRUPT_CHECKPOINT",
            Self::PositionOutOfRange { .. } => "POSITION_OUT_OF_RANGE",
            Self::DimMismatch { .. } => "DIM_MISMATCH",
            Self::ConfigMismatch(_) => "CONFIG_MISMATCH",
            Self::DegenerateDistribution(_) => "DEGENERATE_DISTRIBUTION",
            Self::InvalidConfig(_) => "INVALID_CONFIG",
            Self::InvalidInput(_) => "INVALID_INPUT",
            Self::MissingArtifact(_) => "MISSING_ARTIFACT",
            Self::StaleArtifact { .. } => "STALE_ARTIFACT",
            Self::Format { .. } => "FORMAT",
            Self::Io(_) => "IO",
            Self::Json(_) => "JSON",
            Self::Csv(_) => "CSV",
        }
    }
}
