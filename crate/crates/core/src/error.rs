use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: reduction over an empty axis")]
    EmptyAxis { op: &'static str },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("sequence too short: T={frames}, {context} requires at least {min} frames")]
    SequenceTooShort {
        frames: usize,
        min: usize,
        context: &'static str,
    },

    #[error("empty sequence: at least one timestep is required")]
    EmptySequence,

    #[error("invalid configuration [{constraint}]: {detail}")]
    Config {
        constraint: &'static str,
        detail: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("backward seed must be a scalar, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset cache: {0}")]
    Cache(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(constraint: &'static str, detail: impl Into<String>) -> Self {
        Error::Config {
            constraint,
            detail: detail.into(),
        }
    }

    /// Name of the violated configuration constraint, if this is a config error
    /// (possibly wrapped in context).
    pub fn constraint(&self) -> Option<&'static str> {
        match self {
            Error::Config { constraint, .. } => Some(constraint),
            Error::Context { source, .. } => source.constraint(),
            _ => None,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context(self, ctx: impl FnOnce() -> String) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, ctx: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| Error::Context {
            context: ctx(),
            source: Box::new(e),
        })
    }
}
