use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown {kind} `{name}`")]
    Lookup { kind: &'static str, name: String },
    #[error("training diverged: non-finite value in `{param}`{}", .epoch.map(|e| format!(" at epoch {e}")).unwrap_or_default())]
    Divergence { param: String, epoch: Option<usize> },
    #[error("loss is not deterministic under a fixed seed ({first} vs {second})")]
    Determinism { first: f64, second: f64 },
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),
    #[error("degenerate context: {0}")]
    DegenerateContext(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("prefix {0:?} is not a path in the tree")]
    InvalidPrefix(Vec<u32>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("{path}:{line}: parse error: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}: unknown item `{item}`")]
    Referential { path: PathBuf, line: usize, item: String },
    #[error("stage `{stage}` requires artifact from `{upstream}`, which is missing")]
    Dependency { stage: String, upstream: String },
    #[error("artifact for stage `{stage}` is stale (expected hash {expected}, found {found})")]
    StaleArtifact { stage: String, expected: String, found: String },
    #[error("malformed archive: {0}")]
    Archive(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn lookup(kind: &'static str, name: impl Into<String>) -> Self {
        Error::Lookup { kind, name: name.into() }
    }
}
