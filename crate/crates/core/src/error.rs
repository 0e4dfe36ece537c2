use std::fmt;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage names used to tag propagated errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Subsample,
    Blocks,
    Features,
    Candidates,
    Scoring,
    Prune,
    Merge,
    Upsample,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Subsample => "subsample",
            Stage::Blocks => "blocks",
            Stage::Features => "features",
            Stage::Candidates => "candidates",
            Stage::Scoring => "scoring",
            Stage::Prune => "prune",
            Stage::Merge => "merge",
            Stage::Upsample => "upsample",
        };
        f.write_str(s)
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad input data or broken call contracts,
    /// as opposed to I/O failures.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Io(_) => false,
            Error::Stage { source, .. } => source.is_input_error(),
            _ => true,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
