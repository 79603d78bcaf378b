//! Declarative pipeline specs: which series to load, how to clean them,
//! which additive model to fit and where forecasts go.

use std::collections::BTreeSet;

use castorette_analytics::gam2::Gam2Config;
use castorette_analytics::transform::{CleaningConfig, FeatureSpec};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::context::{ContextRef, ContextStore};
use crate::time::{self, IsoDuration, Timestamp, HOUR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Train,
    Score,
}

/// `{task, time, repeat, until}`: first run at `time`, then every `repeat`
/// (zero for a one-shot) while not after `until`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentConfig {
    pub task: TaskKind,
    #[serde(with = "time::rfc3339")]
    pub time: Timestamp,
    #[serde(default)]
    pub repeat: IsoDuration,
    #[serde(default, with = "time::rfc3339::option")]
    pub until: Option<Timestamp>,
}

impl DeploymentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.repeat.seconds() < 0 {
            return Err("repeat must not be negative".into());
        }
        if let Some(u) = self.until {
            if u < self.time {
                return Err(format!(
                    "until {} is before time {}",
                    time::format_timestamp(u),
                    time::format_timestamp(self.time)
                ));
            }
        }
        Ok(())
    }

    /// Occurrence `k` (`time + k * repeat`), if it exists.
    pub fn occurrence(&self, k: u64) -> Option<Timestamp> {
        if k > 0 && self.repeat.is_zero() {
            return None;
        }
        let due = self
            .time
            .checked_add(self.repeat.seconds().checked_mul(i64::try_from(k).ok()?)?)?;
        match self.until {
            Some(u) if due > u => None,
            _ => Some(due),
        }
    }

    /// Index of the first occurrence strictly after `t`.
    pub fn first_index_after(&self, t: Timestamp) -> u64 {
        if t < self.time {
            return 0;
        }
        if self.repeat.is_zero() {
            return 1;
        }
        ((t - self.time) / self.repeat.seconds()) as u64 + 1
    }

    /// Latest occurrence at or before `t`.
    pub fn last_at_or_before(&self, t: Timestamp) -> Option<Timestamp> {
        let k = self.first_index_after(t).checked_sub(1)?;
        let limit = match self.until {
            Some(u) if !self.repeat.is_zero() && u >= self.time => (u - self.time) / self.repeat.seconds(),
            _ => i64::MAX,
        } as u64;
        self.occurrence(k.min(limit))
    }
}

/// A covariate series and the feature name it is known by.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSpec {
    #[serde(flatten)]
    pub context: ContextRef,
    /// Feature name; defaults to the signal name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl CovariateSpec {
    pub fn feature_name(&self) -> &str {
        self.name.as_deref().unwrap_or(&self.context.signal)
    }
}

fn default_horizon() -> IsoDuration {
    IsoDuration::hours(24)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadSpec {
    /// Defaults to the model's target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<ContextRef>,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
    pub train_window: IsoDuration,
    #[serde(default = "default_horizon")]
    pub score_horizon: IsoDuration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum TransformStep {
    /// Static plausibility rules (negative values, constant runs).
    Outliers(CleaningConfig),
    /// Change-point segmentation with iterative removal of the most
    /// deviant segment.
    Pelt(CleaningConfig),
    /// Re-aligns the data before the last change point to the regime after
    /// it.
    Transfer(CleaningConfig),
    Features {
        /// Defaults to every feature used by the model terms.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        features: Vec<String>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        holidays: Vec<NaiveDate>,
    },
}

impl TransformStep {
    pub fn name(&self) -> &'static str {
        match self {
            TransformStep::Outliers(_) => "outliers",
            TransformStep::Pelt(_) => "pelt",
            TransformStep::Transfer(_) => "transfer",
            TransformStep::Features { .. } => "features",
        }
    }
}

/// Score schedule given to every version trained from the pipeline:
/// first run `offset` after the training due time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreTemplate {
    #[serde(default)]
    pub offset: IsoDuration,
    pub repeat: IsoDuration,
    #[serde(default, with = "time::rfc3339::option")]
    pub until: Option<Timestamp>,
}

impl ScoreTemplate {
    pub fn instantiate(&self, trained_due: Timestamp) -> DeploymentConfig {
        DeploymentConfig {
            task: TaskKind::Score,
            time: trained_due + self.offset.seconds(),
            repeat: self.repeat,
            until: self.until,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreSpec {
    /// Signal the forecasts are written to; defaults to the target signal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_signal: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScoreTemplate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub load: LoadSpec,
    #[serde(default)]
    pub transform: Vec<TransformStep>,
    #[serde(default)]
    pub train: Gam2Config,
    #[serde(default)]
    pub score: ScoreSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub step: String,
    pub message: String,
}

impl Diagnostic {
    fn new(step: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            step: step.into(),
            message: message.into(),
        }
    }
}

impl PipelineSpec {
    /// Feature spec used by the features step (or implied by the terms).
    pub fn feature_spec(&self) -> FeatureSpec {
        let explicit = self.transform.iter().find_map(|s| match s {
            TransformStep::Features { features, holidays } => Some((features.clone(), holidays.clone())),
            _ => None,
        });
        let (mut features, holidays) = explicit.unwrap_or_default();
        if features.is_empty() {
            features = self.train.features();
        }
        FeatureSpec { features, holidays }
    }

    pub fn target<'a>(&'a self, model_target: &'a ContextRef) -> &'a ContextRef {
        self.load.target.as_ref().unwrap_or(model_target)
    }

    /// Extra history needed before a window for lag features, rounded up
    /// to whole days so daily statistics see complete days.
    pub fn history_needed(&self) -> i64 {
        i64::from(self.feature_spec().max_lag_hours()) * HOUR
    }

    /// Step-level problems; empty when the spec is usable.
    pub fn validate(&self, model_target: &ContextRef, context: &ContextStore) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let target = self.target(model_target);
        if target != model_target {
            out.push(Diagnostic::new(
                "load.target",
                format!(
                    "pipeline target {}/{} differs from the model target {}/{}",
                    target.entity, target.signal, model_target.entity, model_target.signal
                ),
            ));
        }
        if let Err(e) = context.resolve(target) {
            out.push(Diagnostic::new("load.target", e.to_string()));
        }
        let mut names = BTreeSet::new();
        for (i, c) in self.load.covariates.iter().enumerate() {
            if let Err(e) = context.resolve(&c.context) {
                out.push(Diagnostic::new(format!("load.covariates[{i}]"), e.to_string()));
            }
            if !names.insert(c.feature_name().to_string()) {
                out.push(Diagnostic::new(
                    format!("load.covariates[{i}]"),
                    format!("duplicate covariate name `{}`", c.feature_name()),
                ));
            }
        }
        if self.load.train_window.seconds() <= 0 {
            out.push(Diagnostic::new("load.train_window", "must be positive"));
        }
        if self.load.score_horizon.seconds() <= 0 {
            out.push(Diagnostic::new("load.score_horizon", "must be positive"));
        }
        for (i, step) in self.transform.iter().enumerate() {
            let label = format!("transform[{i}].{}", step.name());
            match step {
                TransformStep::Outliers(c) | TransformStep::Pelt(c) | TransformStep::Transfer(c) => {
                    if let Err(e) = c.validate() {
                        out.push(Diagnostic::new(label, e.to_string()));
                    }
                }
                TransformStep::Features { .. } => {}
            }
        }
        if self.transform.iter().filter(|s| matches!(s, TransformStep::Features { .. })).count() > 1 {
            out.push(Diagnostic::new("transform", "at most one features step"));
        }

        let spec = self.feature_spec();
        for cov in spec.covariates() {
            if !names.contains(&cov) {
                out.push(Diagnostic::new(
                    "transform.features",
                    format!("feature needs covariate `{cov}`, which the load step does not provide"),
                ));
            }
        }
        if names.is_empty() && spec.max_lag_hours() == 0 {
            out.push(Diagnostic::new(
                "load.covariates",
                "pipeline needs at least one covariate or lag feature",
            ));
        }
        if self.train.mean_terms.is_empty() || self.train.variance_terms.is_empty() {
            out.push(Diagnostic::new("train", "both stages need at least one term"));
        }
        for (stage, terms) in [("mean", &self.train.mean_terms), ("variance", &self.train.variance_terms)] {
            for t in terms.iter() {
                if t.features.is_empty() || t.features.len() > 2 {
                    out.push(Diagnostic::new(
                        format!("train.{stage}_terms"),
                        format!("term `{}` needs one or two features", t.label()),
                    ));
                }
                for f in &t.features {
                    if !spec.features.contains(f) {
                        out.push(Diagnostic::new(
                            format!("train.{stage}_terms"),
                            format!("feature `{f}` is not produced by the features step"),
                        ));
                    }
                }
            }
        }
        if let Some(sig) = &self.score.output_signal {
            let out_ref = ContextRef {
                signal: sig.clone(),
                signal_type: None,
                ..target.clone()
            };
            if let Err(e) = context.resolve(&out_ref) {
                out.push(Diagnostic::new("score.output_signal", e.to_string()));
            }
        }
        if let Some(t) = &self.score.schedule {
            if t.repeat.seconds() < 0 || t.offset.seconds() < 0 {
                out.push(Diagnostic::new("score.schedule", "offset and repeat must not be negative"));
            }
        }
        out
    }
}
