use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate features")]
    DegenerateFeatures,

    #[error("no threshold exists")]
    NoThreshold,

    #[error("no boundary band")]
    NoBoundaryBand,

    #[error("unknown parameter name `{0}`")]
    UnknownName(String),

    #[error("optimization diverged at step {step}: loss is not finite")]
    Divergence { step: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("view `{view}` failed: {source}")]
    View {
        view: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("stage `{stage}` failed (input hash {input_hash}): {source}")]
    Stage {
        stage: String,
        input_hash: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
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

    /// Process exit code for the command-line front end.
    ///
    /// 2 = configuration, 3 = data, 4 = invariant or gradient-check failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::UnknownName(_) => 2,
            Error::Invariant(_) | Error::Divergence { .. } => 4,
            Error::View { source, .. } | Error::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}
