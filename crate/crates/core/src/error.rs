use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("invalid model spec at {block}: {detail}")]
    InvalidSpec { block: String, detail: String },

    #[error("manifest {location}: {detail}")]
    Manifest { location: String, detail: String },

    #[error("weight container at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("weight import: {0}")]
    Import(String),

    #[error("config: {0}")]
    Config(String),

    #[error("fold {fold}: {source}")]
    Fold {
        fold: String,
        #[source]
        source: Box<Error>,
    },

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("image {}: {detail}", .path.display())]
    Image { path: PathBuf, detail: String },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than a
    /// failure while doing the work.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Fold { source, .. } => source.is_validation(),
            Error::Io { .. } | Error::Json(_) => false,
            _ => true,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
