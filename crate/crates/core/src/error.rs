use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt container: {0}")]
    Corruption(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("task `{task}` has {found} non-empty classes, need at least 2")]
    InsufficientClasses { task: String, found: usize },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("centroid {index} has zero norm")]
    DegenerateCentroid { index: usize },

    #[error("degenerate manifold: {0}")]
    DegenerateManifold(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("manifold `{label}`: {source}")]
    InManifold {
        label: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_manifold(label: &str, source: Error) -> Self {
        Error::InManifold {
            label: label.to_string(),
            source: Box::new(source),
        }
    }
}
