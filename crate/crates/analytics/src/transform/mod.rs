//! Data preparation: static outlier rules, PELT change point detection,
//! iterative removal of deviating segments, affine re-alignment across
//! change points and calendar/weather feature engineering.

pub mod features;
pub mod frame;
pub mod outliers;
pub mod pelt;
pub mod segments;
pub mod series;
pub mod transfer;

use thiserror::Error;

pub use features::{engineer_features, FeatureSpec, RawCovariates};
pub use outliers::{remove_outliers, OutlierFlag, OutlierRule};
pub use pelt::{default_penalty, pelt, CostFunction, SegmentStats, Segmentation};
pub use segments::{iterative_segment_removal, CleaningConfig, Penalty, RemovedSegment};
pub use series::MaskedSeries;
pub use transfer::{fit_transfer, TransferFunction, TransferKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("series too short: need at least {required} points, got {actual}")]
    TooShort { required: usize, actual: usize },
    #[error("penalty must be finite and positive, got {0}")]
    InvalidPenalty(f64),
    #[error("non-finite value at index {0}")]
    NonFiniteValue(usize),
    #[error(
        "insufficient data after segment removal: {remaining_fraction:.3} of the series left, \
         minimum is {min_remaining_fraction}"
    )]
    InsufficientData {
        remaining_fraction: f64,
        min_remaining_fraction: f64,
    },
    #[error("missing covariate `{0}`")]
    MissingCovariate(String),
    #[error("timestamps are not aligned to consecutive hours (first offending row {0})")]
    MisalignedTimestamps(usize),
    #[error("column `{name}` has length {actual}, frame has {expected}")]
    LengthMismatch {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
