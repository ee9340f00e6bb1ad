use std::path::PathBuf;

use thiserror::Error;

/// Every failure the toolkit can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rank {rank} out of range for C({n}, {k})")]
    RankOutOfRange { n: usize, k: usize, rank: String },

    #[error("invalid subset of 0..{n}: {reason}")]
    InvalidSubset { n: usize, reason: String },

    #[error("capacity exceeded: {requested} patterns requested, capacity is {capacity}")]
    CapacityExceeded { requested: u64, capacity: String },

    #[error("codebook format error: {0}")]
    CodebookFormat(String),

    #[error("dataset not found: {}", .0.display())]
    DatasetNotFound(PathBuf),

    #[error("dataset format error: {0}")]
    DatasetFormat(String),

    #[error("shift {shift} exceeds max shift {max_shift}")]
    ShiftOutOfRange { shift: i32, max_shift: u32 },

    #[error("cluster configuration error: {0}")]
    ClusterConfig(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("pattern shape mismatch: {0}")]
    PatternShapeMismatch(String),

    #[error("perceptual distance asset error: {0}")]
    DistanceAsset(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("run configuration error: {0}")]
    RunConfig(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("cluster file format error: {0}")]
    ClusterFormat(String),

    #[error("index {index} out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error families, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorFamily {
    Io,
    Config,
    Data,
    Format,
    Divergence,
    Capacity,
}

impl Error {
    pub fn family(&self) -> ErrorFamily {
        match self {
            Error::Io(_) | Error::Image(_) => ErrorFamily::Io,
            Error::RankOutOfRange { .. }
            | Error::InvalidSubset { .. }
            | Error::ShiftOutOfRange { .. }
            | Error::ClusterConfig(_)
            | Error::Config(_)
            | Error::PatternShapeMismatch(_)
            | Error::RunConfig(_)
            | Error::IndexOutOfRange { .. } => ErrorFamily::Config,
            Error::DatasetNotFound(_) | Error::DatasetFormat(_) => ErrorFamily::Data,
            Error::CodebookFormat(_) | Error::CheckpointFormat(_) | Error::ClusterFormat(_) | Error::DistanceAsset(_) => {
                ErrorFamily::Format
            }
            Error::Divergence { .. } => ErrorFamily::Divergence,
            Error::CapacityExceeded { .. } => ErrorFamily::Capacity,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.family() {
            ErrorFamily::Io => 1,
            ErrorFamily::Config => 2,
            ErrorFamily::Data => 3,
            ErrorFamily::Format => 4,
            ErrorFamily::Divergence => 5,
            ErrorFamily::Capacity => 6,
        }
    }
}
