//! Numerical core of castorette: anomaly-aware data preparation and the
//! two-stage additive model used to forecast a conditional mean and a
//! conditional standard deviation.
//!
//! The [`transform`] module turns raw covariate series into a
//! [`FeatureFrame`]; the [`gam2`] module fits and scores additive models on
//! such frames.

pub mod gam2;
pub mod transform;

pub use transform::frame::{Column, ColumnValues, FeatureFrame};
