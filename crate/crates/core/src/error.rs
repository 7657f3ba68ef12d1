use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad IDX magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("label {label} at index {index} is outside [0, 9]")]
    LabelRange { index: usize, label: u8 },

    #[error("unsupported image geometry {rows}x{cols} (expected 28x28)")]
    Geometry { rows: usize, cols: usize },

    #[error("non-finite value in layer {layer}")]
    NumericFailure { layer: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite value in layer {layer}")]
    TrainingDiverged {
        epoch: usize,
        batch: usize,
        layer: String,
    },

    #[error("corrupt {what}: {reason}")]
    Corrupt { what: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unit index {index} out of range for layer {layer} ({size} units)")]
    UnitOutOfRange {
        layer: String,
        index: usize,
        size: usize,
    },

    #[error("unknown layer tag `{0}`")]
    UnknownLayer(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("k = {k} requires more than {k} points, got {n}")]
    TooFewPoints { k: usize, n: usize },

    #[error("smooth-kNN bandwidth search did not converge for point {point}")]
    BandwidthSearch { point: usize },

    #[error("layout produced non-finite coordinates at epoch {epoch}")]
    LayoutDiverged { epoch: usize },

    #[error("degenerate configuration: all points coincide")]
    DegenerateConfiguration,

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("provenance mismatch for {path}: recorded {recorded}, found {found}")]
    Provenance {
        path: PathBuf,
        recorded: String,
        found: String,
    },

    #[error("usage: {0}")]
    Usage(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 usage, 3 data, 4 numeric, 5 provenance.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::InvalidArgument(_) | Error::UnknownLayer(_) => 2,
            Error::NumericFailure { .. }
            | Error::TrainingDiverged { .. }
            | Error::BandwidthSearch { .. }
            | Error::LayoutDiverged { .. }
            | Error::DegenerateConfiguration
            | Error::UndefinedCorrelation(_)
            | Error::TooFewPoints { .. } => 4,
            Error::Provenance { .. } | Error::MissingArtifact { .. } => 5,
            _ => 3,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
