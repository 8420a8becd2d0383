use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("row {row} has L2 norm {norm}, expected 1 within 1e-4")]
    NotNormalized { row: usize, norm: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: i64, num_classes: usize },
    #[error("view groups must be non-decreasing (row {row})")]
    UnorderedViewGroups { row: usize },
    #[error("class {class} supplies {found} shots, expected {expected}")]
    ShotCountMismatch {
        class: usize,
        expected: usize,
        found: usize,
    },
    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("entropy must be finite, got {0}")]
    NonFiniteEntropy(f64),
    #[error("projection output has degenerate norm")]
    DegenerateProjection,
    #[error("empty memory bank{}", .0.map(|c| format!(" for class {c}")).unwrap_or_default())]
    EmptyBank(Option<usize>),
    #[error("aggregated view feature has degenerate norm")]
    DegenerateAggregate,
    #[error("malformed probability distribution: {0}")]
    MalformedDistribution(String),
    #[error("no active prediction source in fusion")]
    NoActiveSource,
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("stream has no ground-truth labels")]
    Unlabeled,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line front end, one per error family.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::Truncated(_)
            | Error::NotNormalized { .. }
            | Error::UnorderedViewGroups { .. } => 4,
            Error::DimMismatch { .. }
            | Error::LabelOutOfRange { .. }
            | Error::ShotCountMismatch { .. }
            | Error::ClassOutOfRange { .. }
            | Error::LengthMismatch { .. } => 5,
            Error::NonFiniteEntropy(_)
            | Error::DegenerateProjection
            | Error::EmptyBank(_)
            | Error::DegenerateAggregate
            | Error::MalformedDistribution(_)
            | Error::NumericalFailure(_) => 6,
            Error::NoActiveSource | Error::Config(_) | Error::MissingInput(_) | Error::Unlabeled => 7,
        }
    }

    /// Variant name, as printed by the command line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "Io",
            Error::BadMagic { .. } => "BadMagic",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::Truncated(_) => "Truncated",
            Error::NotNormalized { .. } => "NotNormalized",
            Error::DimMismatch { .. } => "DimMismatch",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::UnorderedViewGroups { .. } => "UnorderedViewGroups",
            Error::ShotCountMismatch { .. } => "ShotCountMismatch",
            Error::ClassOutOfRange { .. } => "ClassOutOfRange",
            Error::NonFiniteEntropy(_) => "NonFiniteEntropy",
            Error::DegenerateProjection => "DegenerateProjection",
            Error::EmptyBank(_) => "EmptyBank",
            Error::DegenerateAggregate => "DegenerateAggregate",
            Error::MalformedDistribution(_) => "MalformedDistribution",
            Error::NoActiveSource => "NoActiveSource",
            Error::NumericalFailure(_) => "NumericalFailure",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::Unlabeled => "Unlabeled",
            Error::Config(_) => "Config",
            Error::MissingInput(_) => "MissingInput",
        }
    }
}
