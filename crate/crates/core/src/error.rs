use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the command line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("no slices found in {0}")]
    NoSlices(PathBuf),

    #[error("missing slice t={t} z={z} (expected {path})")]
    MissingSlice { t: usize, z: usize, path: PathBuf },

    #[error("inconsistent slice dimensions: {expected:?} vs {found:?} at {path}")]
    SliceShape {
        expected: (usize, usize),
        found: (usize, usize),
        path: PathBuf,
    },

    #[error("corrupt volume container: {0}")]
    Corrupt(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("trajectory {index} ({phenotype}) would exit the volume: {reason}")]
    OutOfBounds {
        index: usize,
        phenotype: String,
        reason: String,
    },

    #[error("empty cost matrix")]
    EmptyCostMatrix,

    #[error("empty corpus: no track reaches {min_length} frames")]
    EmptyCorpus { min_length: usize },

    #[error("degenerate pooled covariance: rank {rank} < {required}")]
    DegenerateCovariance { rank: usize, required: usize },

    #[error("trajectory too short for AR({order}) with latent dim {dim}: {len} < {needed} frames")]
    TooShort {
        len: usize,
        needed: usize,
        order: usize,
        dim: usize,
    },

    #[error("unstable system: spectral radius {radius} >= 1")]
    Unstable { radius: f64 },

    #[error("Lyapunov residual {residual:e} exceeds bound {bound:e}")]
    LyapunovResidual { residual: f64, bound: f64 },

    #[error("singular Gramian block: cond(P11) = {cond_11:e}, cond(P22) = {cond_22:e}")]
    SingularGramian { cond_11: f64, cond_22: f64 },

    #[error("pair ({i}, {j}): {source}")]
    Pair {
        i: usize,
        j: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("zero-degree node {0} in affinity matrix")]
    ZeroDegree(usize),

    #[error("k = {k} exceeds number of points {m}")]
    TooManyClusters { k: usize, m: usize },

    #[error("task chunk {chunk} failed: {source}")]
    Task {
        chunk: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Io { .. } => ErrorKind::Io,
            Error::Unstable { .. }
            | Error::LyapunovResidual { .. }
            | Error::SingularGramian { .. }
            | Error::DegenerateCovariance { .. } => ErrorKind::Numerical,
            Error::Pair { source, .. } | Error::Task { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
