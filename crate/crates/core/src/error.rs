use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("map has no positive value")]
    AllZeroMap,
    #[error("binarized map is empty")]
    EmptyBinaryMap,
    #[error("map has zero variance")]
    ConstantMap,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("grid spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("box has no pixel centers inside the image")]
    EmptyIntersection,
    #[error("labels need at least one positive and one negative")]
    DegenerateLabels,
    #[error("empty input")]
    EmptyInput,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("inconsistent dims: {0}")]
    InconsistentDims(String),
    #[error("infeasible scene spec: {0}")]
    InfeasibleSpec(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed header in {path}: {msg}")]
    MalformedHeader { path: PathBuf, msg: String },
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("negative value at index {index} in {path}")]
    NegativeValue { path: PathBuf, index: usize },
    #[error("{path}:{line}: {msg}")]
    ParseError {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: invalid box: {msg}")]
    InvalidBox {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable name of the variant, used in the CLI's error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::AllZeroMap => "AllZeroMap",
            Error::EmptyBinaryMap => "EmptyBinaryMap",
            Error::ConstantMap => "ConstantMap",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::SpecMismatch(_) => "SpecMismatch",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::EmptyIntersection => "EmptyIntersection",
            Error::DegenerateLabels => "DegenerateLabels",
            Error::EmptyInput => "EmptyInput",
            Error::EmptyDataset => "EmptyDataset",
            Error::InconsistentDims(_) => "InconsistentDims",
            Error::InfeasibleSpec(_) => "InfeasibleSpec",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::MalformedHeader { .. } => "MalformedHeader",
            Error::TruncatedPayload { .. } => "TruncatedPayload",
            Error::NegativeValue { .. } => "NegativeValue",
            Error::ParseError { .. } => "ParseError",
            Error::InvalidBox { .. } => "InvalidBox",
            Error::Io { .. } => "Io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
