use serde::{Deserialize, Serialize};

use super::additive::{fit_additive, AdditiveModel, Lambdas, Link};
use super::boost::{boost_select, BoostConfig};
use super::term::TermSpec;
use super::GamError;
use crate::transform::frame::FeatureFrame;
use crate::transform::series::MaskedSeries;

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;
/// `sigma` never drops below this fraction of the training target's
/// standard deviation.
pub const SIGMA_FLOOR_FRACTION: f64 = 1e-6;

pub fn default_mean_terms() -> Vec<TermSpec> {
    ["DayType", "TimeOfDay", "TimeOfYear", "Temperature", "SolarRadiance"]
        .into_iter()
        .map(TermSpec::single)
        .collect()
}

pub fn default_variance_terms() -> Vec<TermSpec> {
    ["TimeOfDay", "DewPoint", "DailyAverageTemperature"]
        .into_iter()
        .map(TermSpec::single)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gam2Config {
    #[serde(default = "default_mean_terms")]
    pub mean_terms: Vec<TermSpec>,
    #[serde(default = "default_variance_terms")]
    pub variance_terms: Vec<TermSpec>,
    /// When set, terms of both stages are chosen by component-wise boosting
    /// among the configured candidates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boosting: Option<BoostConfig>,
    #[serde(default)]
    pub lambda: Lambdas,
}

impl Default for Gam2Config {
    fn default() -> Self {
        Self {
            mean_terms: default_mean_terms(),
            variance_terms: default_variance_terms(),
            boosting: None,
            lambda: Lambdas::Gcv,
        }
    }
}

impl Gam2Config {
    /// All feature columns either stage may read.
    pub fn features(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for spec in self.mean_terms.iter().chain(&self.variance_terms) {
            for f in &spec.features {
                if !out.contains(f) {
                    out.push(f.clone());
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedFeatures {
    pub mean: Vec<String>,
    pub variance: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
}

/// Fitted mean and variance models; the `params` blob of a model version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gam2Artifact {
    pub format_version: u32,
    pub mean_model: AdditiveModel,
    pub variance_model: AdditiveModel,
    pub selected_features: SelectedFeatures,
    pub train_metrics: TrainMetrics,
    pub sigma_floor: f64,
}

impl Gam2Artifact {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("artifact serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GamError> {
        let artifact: Gam2Artifact = serde_json::from_str(text).map_err(|e| GamError::Serialization(e.to_string()))?;
        if artifact.format_version != ARTIFACT_FORMAT_VERSION {
            return Err(GamError::Serialization(format!(
                "unsupported artifact format version {}",
                artifact.format_version
            )));
        }
        if artifact.mean_model.link != Link::Identity || artifact.variance_model.link != Link::Log {
            return Err(GamError::Serialization("unexpected link functions".into()));
        }
        for term in artifact.mean_model.terms.iter().chain(&artifact.variance_model.terms) {
            if term.coefficients.len() != term.dim() {
                return Err(GamError::Serialization(format!(
                    "term `{}` has {} coefficients, basis has {}",
                    term.label(),
                    term.coefficients.len(),
                    term.dim()
                )));
            }
        }
        Ok(artifact)
    }

    /// Features scoring needs.
    pub fn required_features(&self) -> Vec<String> {
        let mut out = self.mean_model.features();
        for f in self.variance_model.features() {
            if !out.contains(&f) {
                out.push(f);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastOutput {
    pub timestamps: Vec<i64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub horizon_secs: i64,
    /// Rows where an input was clamped to the training domain or a level
    /// was never seen in training.
    pub out_of_domain: Vec<bool>,
}

fn select(
    frame: &FeatureFrame,
    candidates: &[TermSpec],
    boosting: Option<&BoostConfig>,
    link: Link,
) -> Result<Vec<TermSpec>, GamError> {
    match boosting {
        Some(cfg) => boost_select(frame, candidates, cfg.steps, cfg.step_size, link),
        None => Ok(candidates.to_vec()),
    }
}

fn feature_names(terms: &[TermSpec]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in terms {
        for f in &t.features {
            if !out.contains(f) {
                out.push(f.clone());
            }
        }
    }
    out
}

/// Fits the mean model, then a LOG-link model of the squared in-sample
/// residuals `(y - mu_hat)^2`.
pub fn fit_gam2(frame: &FeatureFrame, config: &Gam2Config) -> Result<Gam2Artifact, GamError> {
    let target = frame.target().ok_or(GamError::MissingTarget)?;
    let y = target.values.clone();

    let mean_terms = select(frame, &config.mean_terms, config.boosting.as_ref(), Link::Identity)?;
    let mean_fit = fit_additive(frame, &mean_terms, &config.lambda, Link::Identity)?;

    let squared: Vec<f64> = y.iter().zip(&mean_fit.fitted).map(|(y, m)| (y - m).powi(2)).collect();
    let mut variance_frame = frame.clone();
    variance_frame
        .set_target(Some(MaskedSeries::new(squared)))
        .map_err(|e| GamError::InvalidSpec(e.to_string()))?;
    let variance_terms = select(&variance_frame, &config.variance_terms, config.boosting.as_ref(), Link::Log)?;
    let variance_fit = fit_additive(&variance_frame, &variance_terms, &config.lambda, Link::Log)?;

    let n = y.len();
    let residuals: Vec<f64> = y.iter().zip(&mean_fit.fitted).map(|(y, m)| y - m).collect();
    let rmse = (residuals.iter().map(|r| r * r).sum::<f64>() / n as f64).sqrt();
    let mae = residuals.iter().map(|r| r.abs()).sum::<f64>() / n as f64;
    let mean_y = y.iter().sum::<f64>() / n as f64;
    let sd = (y.iter().map(|v| (v - mean_y).powi(2)).sum::<f64>() / n as f64).sqrt();

    Ok(Gam2Artifact {
        format_version: ARTIFACT_FORMAT_VERSION,
        mean_model: mean_fit.model,
        variance_model: variance_fit.model,
        selected_features: SelectedFeatures {
            mean: feature_names(&mean_terms),
            variance: feature_names(&variance_terms),
        },
        train_metrics: TrainMetrics { rmse, mae, n },
        sigma_floor: (SIGMA_FLOOR_FRACTION * sd).max(f64::MIN_POSITIVE),
    })
}

/// Forecast mean and standard deviation for every row of `frame`.
pub fn score(artifact: &Gam2Artifact, frame: &FeatureFrame, horizon_secs: i64) -> Result<ForecastOutput, GamError> {
    for feature in artifact.required_features() {
        let col = frame.column(&feature).ok_or_else(|| GamError::MissingFeature(feature.clone()))?;
        if let Some(row) = col.missing.iter().position(|m| *m) {
            return Err(GamError::MissingFeatureValue { feature, row });
        }
    }
    let (mu, mean_flags) = artifact.mean_model.linear_predictor(frame)?;
    let (log_var, var_flags) = artifact.variance_model.linear_predictor(frame)?;
    let sigma = log_var
        .iter()
        .map(|v| (v.exp().sqrt()).max(artifact.sigma_floor))
        .collect();
    let out_of_domain = mean_flags
        .iter()
        .zip(&var_flags)
        .map(|(a, b)| a.clamped || a.unseen_level || b.clamped || b.unseen_level)
        .collect();
    Ok(ForecastOutput {
        timestamps: frame.timestamps().to_vec(),
        mu,
        sigma,
        horizon_secs,
        out_of_domain,
    })
}
