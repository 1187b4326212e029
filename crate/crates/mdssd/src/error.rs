use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Format(String),

    #[error(
        "no deconv chain maps extent {from} to {to} in {stages} stage(s); \
         reachable extents by depth: {reachable:?}"
    )]
    NoChain {
        from: usize,
        to: usize,
        stages: usize,
        reachable: Vec<Vec<usize>>,
    },

    #[error("graph error: {0}")]
    Graph(String),

    #[error(
        "training diverged at step {step}: loss not finite \
         (last finite breakdown: total {total:.6}, loc {loc:.6}, conf {conf:.6})"
    )]
    NanLoss {
        step: usize,
        total: f64,
        loc: f64,
        conf: f64,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
