use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates a documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A matrix or rational function could not be inverted/evaluated.
    #[error("singular {context}: {detail}")]
    Singular { context: String, detail: String },

    /// Least-squares problem without a unique solution.
    #[error("rank deficient {context}: {detail}")]
    RankDeficient { context: String, detail: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Failure inside a named pipeline stage.
    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn singular(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Singular {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn rank(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::RankDeficient {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// True for singularity and rank failures, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Singular { .. } | Error::RankDeficient { .. } => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
