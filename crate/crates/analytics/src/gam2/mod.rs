//! Two-stage additive models: a penalized B-spline model of the
//! conditional mean, followed by a LOG-link model of the squared residuals
//! that yields the conditional standard deviation.
//!
//! The response is modelled as `y = mu(x) + sigma(x) * eps` with `eps` of
//! zero mean and unit variance; that assumption is not checked.

pub mod additive;
pub mod basis;
pub mod boost;
mod linalg;
pub mod stage;
pub mod term;

use thiserror::Error;

pub use additive::{fit_additive, AdditiveFit, AdditiveModel, FeatureDomain, Lambdas, Link, PenalizedSystem};
pub use basis::{build_basis, SplineBasis};
pub use boost::{boost_select, boost_trace, BoostConfig, BoostTrace};
pub use stage::{
    default_mean_terms, default_variance_terms, fit_gam2, score, ForecastOutput, Gam2Artifact, Gam2Config,
    SelectedFeatures, TrainMetrics,
};
pub use term::{RowFlags, Term, TermKind, TermSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GamError {
    #[error("feature `{feature}` has {distinct} distinct values, need {required}")]
    DegenerateFeature {
        feature: String,
        distinct: usize,
        required: usize,
    },
    #[error("missing feature `{0}`")]
    MissingFeature(String),
    #[error("feature `{feature}` is missing at row {row}")]
    MissingFeatureValue { feature: String, row: usize },
    #[error("column `{0}` contains missing values")]
    MissingValues(String),
    #[error("frame has no target column")]
    MissingTarget,
    #[error("target is not finite at row {0}")]
    NonFiniteTarget(usize),
    #[error("need at least {required} rows, got {rows}")]
    TooFewRows { rows: usize, required: usize },
    #[error("penalized system is singular (term `{term}`)")]
    SingularSystem { term: String },
    #[error("fit did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("invalid term specification: {0}")]
    InvalidSpec(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("artifact serialization: {0}")]
    Serialization(String),
}
