use std::path::PathBuf;

use crate::store::LocationId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("manifest parse error in {path}: {message}")]
    ManifestParse { path: PathBuf, message: String },
    #[error("manifest lists no datasets")]
    EmptyManifest,
    #[error("duplicate dataset: {0}")]
    DuplicateDataset(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("bad magic in {0}")]
    BadMagic(PathBuf),
    #[error("unsupported activation file version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated activation file {path}: {message}")]
    TruncatedFile { path: PathBuf, message: String },
    #[error("non-finite value in record {sample_id} of {path}")]
    NonFiniteValue { path: PathBuf, sample_id: u64 },
    #[error("label {label} out of range in record {sample_id}")]
    LabelOutOfRange { sample_id: u64, label: u8 },
    #[error("location {0} outside the stored geometry")]
    LocationOutOfRange(LocationId),
    #[error("location kind {0} is not stored")]
    LocationKindAbsent(String),
    #[error("dataset {0} is not a test-task dataset")]
    NotATestDataset(String),
    #[error("unknown regime: {0}")]
    UnknownRegime(String),
    #[error("unknown dataset: {0}")]
    UnknownDataset(String),

    #[error("training input has a single class{}", context_suffix(.0))]
    SingleClassInput(Option<String>),
    #[error("non-finite feature at row {row}, column {col}")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("empty view")]
    EmptyView,
    #[error("empty feature matrix")]
    EmptyMatrix,

    #[error("num {num} exceeds the location grid of {grid}")]
    NumExceedsGrid { num: usize, grid: usize },
    #[error("selection plan is empty")]
    EmptyPlan,
    #[error("dim {dim} out of range for location {location} (dim {limit})")]
    DimOutOfRange {
        location: LocationId,
        dim: usize,
        limit: usize,
    },
    #[error("k = {k} exceeds location dim {dim}")]
    KTooLarge { k: usize, dim: usize },
    #[error("probe failed at {location}: {source}")]
    AtLocation {
        location: LocationId,
        #[source]
        source: Box<Error>,
    },

    #[error("hyperparameter grid is empty{}", context_suffix(.0))]
    EmptyGrid(Option<String>),
    #[error("split size {size} exceeds {available} records in {dataset}")]
    SizeExceedsSplit {
        dataset: String,
        size: usize,
        available: usize,
    },
    #[error("duplicate report cell: {0}")]
    DuplicateCell(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("data hygiene violation: {0}")]
    HygieneViolation(String),
    #[error("in dataset {dataset}: {source}")]
    InDataset {
        dataset: String,
        #[source]
        source: Box<Error>,
    },

    #[error("record {0} has no answer log-probability")]
    MissingLogprob(u64),

    #[error("planted geometry does not fit the model: {0}")]
    GeometryOverflow(String),
    #[error("sidecar does not match: {0}")]
    SidecarMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),
}

fn context_suffix(context: &Option<String>) -> String {
    match context {
        Some(c) => format!(" ({c})"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_location(location: LocationId, source: Error) -> Self {
        Error::AtLocation {
            location,
            source: Box::new(source),
        }
    }

    pub(crate) fn in_dataset(dataset: &str, source: Error) -> Self {
        Error::InDataset {
            dataset: dataset.to_string(),
            source: Box::new(source),
        }
    }
}
