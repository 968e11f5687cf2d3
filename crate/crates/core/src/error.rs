use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    #[error("bad shape: {0}")]
    BadShape(String),
    #[error("invalid geometry: {0}")]
    BadGeometry(String),
    #[error("need at least {needed} axial slices, found {available}")]
    NotEnoughSlices { needed: usize, available: usize },
    #[error("label {0} is not a valid grade")]
    BadLabel(usize),
    #[error("AUROC is undefined when only one class is present")]
    SingleClass,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("series has no slices")]
    EmptySeries,
    #[error("need at least 2 studies to split, found {0}")]
    TooFewStudies(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = core::result::Result<T, CoreError>;

macro_rules! bad_shape {
    ($($arg:tt)*) => {
        $crate::error::CoreError::BadShape(alloc::format!($($arg)*))
    };
}
pub(crate) use bad_shape;
