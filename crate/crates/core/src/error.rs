use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward on a detached or already-consumed tape node")]
    DetachedBackward,

    #[error("sampling chain diverged at t={t}: max |x| = {norm:.3e}")]
    ChainDiverged { t: usize, norm: f32 },

    #[error("all lambda candidates diverged")]
    AllCandidatesDiverged,

    #[error("{frac:.1}% of posterior chains diverged (limit {limit:.1}%)")]
    TooManyDiverged { frac: f32, limit: f32 },

    #[error("training diverged at epoch {epoch}: {detail}")]
    TrainingDiverged { epoch: usize, detail: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint format version {found} not supported (reader expects {expected})")]
    CheckpointVersion { found: u8, expected: u8 },

    #[error("checkpoint checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("container: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-parsable category token, used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::NonFinite { .. } => "non-finite",
            Error::InvalidArgument(_) => "config-invalid",
            Error::DetachedBackward => "autodiff",
            Error::ChainDiverged { .. } => "diverged",
            Error::AllCandidatesDiverged => "diverged",
            Error::TooManyDiverged { .. } => "diverged",
            Error::TrainingDiverged { .. } => "diverged",
            Error::CorruptCheckpoint(_) => "checkpoint",
            Error::CheckpointVersion { .. } => "checkpoint",
            Error::ChecksumMismatch { .. } => "checkpoint",
            Error::Container(_) => "container",
            Error::Io(_) => "io",
        }
    }
}
