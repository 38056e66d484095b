use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty matrix")]
    EmptyMatrix,
    #[error("invalid temperature {0}: must be > 0")]
    InvalidTemperature(f32),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bad magic in {path}")]
    BadMagic { path: PathBuf },
    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("inconsistent grid: {0}")]
    InconsistentGrid(String),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("degenerate box: {0}")]
    DegenerateBox(String),
    #[error("invalid planted heads: {0}")]
    InvalidPlanted(String),
    #[error("synthetic dump failed its objectness check: {0}")]
    GenerationCheck(String),

    #[error("K = {k} exceeds number of points {points}")]
    TooManyClusters { k: usize, points: usize },
    #[error("invalid cluster count {0}")]
    InvalidClusterCount(usize),
    #[error("degenerate centroids: clusters {0} and {1} coincide")]
    DegenerateCentroids(usize, usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dumps disagree on model geometry: {0}")]
    MixedGeometry(String),

    #[error("empty head selection")]
    EmptySelection,
    #[error("head ({layer},{head}) outside dump bounds")]
    HeadOutOfBounds { layer: usize, head: usize },
    #[error("graph needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("graph has a node with non-positive degree {0}")]
    NonPositiveDegree(usize),
    #[error("eigensolver did not converge")]
    EigenNoConvergence,

    #[error("invalid box {0:?}")]
    InvalidBox([f64; 4]),
    #[error("image {0} has a prediction but no ground-truth boxes")]
    MissingGroundTruth(String),
    #[error("undefined denominator: {0}")]
    UndefinedDenominator(&'static str),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("logit vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("stream underrun at step {0}")]
    StreamUnderrun(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
