use std::path::PathBuf;

use mscan_core::CoreError;

use crate::checkpoint::CheckpointError;
use crate::config::ConfigError;
use crate::studyio::StudyIoError;
use crate::synth::TruthError;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_PIPELINE: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] StudyIoError),
    #[error(transparent)]
    Truth(#[from] TruthError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("study {study}: needs at least {needed} axial slices, found {found}")]
    NotEnoughAxial { study: String, needed: usize, found: usize },
    #[error("study {study}: series kinds {found} do not match the configured {wanted}")]
    SeriesKind { study: String, found: String, wanted: String },
    #[error("study {0} has no labels")]
    Unlabeled(String),
    #[error("stage {stage} needs {} from an earlier stage", missing.display())]
    MissingPriorStage { stage: u8, missing: PathBuf },
    #[error("missing checkpoint {}; train all three stages first", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("no usable studies for {0}")]
    EmptyDataset(String),
    #[error("study {0} appears in both the training and evaluation sets")]
    Leakage(String),
    #[error("{path}: {reason}")]
    Output { path: PathBuf, reason: String },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
            Error::Data(_)
            | Error::Truth(_)
            | Error::NotEnoughAxial { .. }
            | Error::SeriesKind { .. }
            | Error::Unlabeled(_)
            | Error::EmptyDataset(_) => EXIT_DATA,
            Error::Checkpoint(_)
            | Error::Core(_)
            | Error::MissingPriorStage { .. }
            | Error::MissingCheckpoint(_)
            | Error::Leakage(_)
            | Error::Output { .. } => EXIT_PIPELINE,
        }
    }

    pub(crate) fn output(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Output { path: path.into(), reason: reason.to_string() }
    }
}
