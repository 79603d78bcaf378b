//! Registry of models (pipeline spec plus training schedule) and their
//! versions (fitted parameters plus scoring schedule).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use castorette_analytics::gam2::Gam2Artifact;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ContextError, ContextKey, ContextRef, ContextStore, EntityId, ModelLink, SignalId};
use crate::journal::{Journal, JournalError};
use crate::pipeline::{DeploymentConfig, Diagnostic, PipelineSpec, TaskKind};
use crate::time::{self, Timestamp};
use crate::timeseries::VersionId;

pub type ModelId = u64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model: {}", format_diagnostics(.0))]
    Validation(Vec<Diagnostic>),
    #[error("unknown model {0}")]
    UnknownModel(ModelId),
    #[error("unknown model version {0}")]
    UnknownVersion(VersionId),
    #[error("version {version} does not belong to model {model}")]
    VersionMismatch { model: ModelId, version: VersionId },
    #[error("corrupt params: {0}")]
    CorruptParams(String),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Storage(#[from] JournalError),
}

fn format_diagnostics(d: &[Diagnostic]) -> String {
    d.iter().map(|d| format!("{}: {}", d.step, d.message)).collect::<Vec<_>>().join("; ")
}

/// Body of a model definition as submitted by clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInput {
    /// Replaces the definition of an existing model when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<ModelId>,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub target: ContextRef,
    pub pipeline: PipelineSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_schedule: Option<DeploymentConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub id: ModelId,
    pub name: String,
    pub description: String,
    pub target: ContextRef,
    pub target_key: ContextKey,
    pub pipeline: PipelineSpec,
    #[serde(default)]
    pub train_schedule: Option<DeploymentConfig>,
    #[serde(with = "time::rfc3339")]
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub id: VersionId,
    pub model: ModelId,
    #[serde(with = "time::rfc3339")]
    pub trained_at: Timestamp,
    /// Due time of the training job that produced the version.
    #[serde(default, with = "time::rfc3339::option")]
    pub due: Option<Timestamp>,
    /// Serialized [`Gam2Artifact`], kept byte for byte as submitted.
    pub params: String,
    #[serde(default)]
    pub score_schedule: Option<DeploymentConfig>,
    /// Whether the schedule was derived from the pipeline's score template
    /// (and may therefore be cut short by a newer version).
    #[serde(default)]
    pub from_template: bool,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

/// Version without its parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionSummary {
    pub id: VersionId,
    pub model: ModelId,
    #[serde(with = "time::rfc3339")]
    pub trained_at: Timestamp,
    #[serde(default, with = "time::rfc3339::option")]
    pub due: Option<Timestamp>,
    pub score_schedule: Option<DeploymentConfig>,
    pub metrics: BTreeMap<String, f64>,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NewVersion {
    pub params: String,
    pub trained_at: Timestamp,
    pub due: Option<Timestamp>,
    pub score_schedule: Option<DeploymentConfig>,
    pub metrics: BTreeMap<String, f64>,
    /// Marks the schedule as template-derived and ends the template-derived
    /// schedules of older versions where this one starts.
    pub supersede: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyNode {
    pub model: ModelSummary,
    pub versions: Vec<VersionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub id: ModelId,
    pub name: String,
    pub description: String,
    pub target: ContextRef,
    pub train_schedule: Option<DeploymentConfig>,
    pub active_version: Option<VersionId>,
    pub latest_version: Option<VersionId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Model(Model),
    Version(ModelVersion),
    Schedule {
        version: VersionId,
        schedule: Option<DeploymentConfig>,
    },
    Active {
        model: ModelId,
        version: Option<VersionId>,
    },
}

#[derive(Default)]
struct State {
    next_model: ModelId,
    next_version: VersionId,
    models: BTreeMap<ModelId, Model>,
    versions: BTreeMap<VersionId, ModelVersion>,
    by_model: BTreeMap<ModelId, Vec<VersionId>>,
    active: BTreeMap<ModelId, VersionId>,
}

impl State {
    fn apply(&mut self, record: Record) {
        match record {
            Record::Model(m) => {
                self.next_model = self.next_model.max(m.id + 1);
                self.by_model.entry(m.id).or_default();
                self.models.insert(m.id, m);
            }
            Record::Version(v) => {
                self.next_version = self.next_version.max(v.id + 1);
                self.by_model.entry(v.model).or_default().push(v.id);
                self.versions.insert(v.id, v);
            }
            Record::Schedule { version, schedule } => {
                if let Some(v) = self.versions.get_mut(&version) {
                    v.score_schedule = schedule;
                }
            }
            Record::Active { model, version } => match version {
                Some(v) => {
                    self.active.insert(model, v);
                }
                None => {
                    self.active.remove(&model);
                }
            },
        }
    }

    fn latest(&self, model: ModelId) -> Option<&ModelVersion> {
        self.by_model.get(&model)?.last().and_then(|id| self.versions.get(id))
    }

    fn summary(&self, v: &ModelVersion) -> VersionSummary {
        VersionSummary {
            id: v.id,
            model: v.model,
            trained_at: v.trained_at,
            due: v.due,
            score_schedule: v.score_schedule,
            metrics: v.metrics.clone(),
            active: self.active.get(&v.model) == Some(&v.id),
        }
    }

    fn model_summary(&self, m: &Model) -> ModelSummary {
        ModelSummary {
            id: m.id,
            name: m.name.clone(),
            description: m.description.clone(),
            target: m.target.clone(),
            train_schedule: m.train_schedule,
            active_version: self.active.get(&m.id).copied(),
            latest_version: self.latest(m.id).map(|v| v.id),
        }
    }
}

pub struct ModelStore {
    context: Arc<ContextStore>,
    state: RwLock<State>,
    journal: Option<Journal>,
}

impl ModelStore {
    pub fn in_memory(context: Arc<ContextStore>) -> Self {
        Self {
            context,
            state: RwLock::new(State::default()),
            journal: None,
        }
    }

    pub fn open(dir: &Path, context: Arc<ContextStore>, sync: bool) -> Result<Self, ModelError> {
        let (journal, records) = Journal::open::<Record>(&dir.join("models.jsonl"), sync)?;
        let mut state = State::default();
        for r in records {
            state.apply(r);
        }
        Ok(Self {
            context,
            state: RwLock::new(state),
            journal: Some(journal),
        })
    }

    fn commit(&self, state: &mut State, records: Vec<Record>) -> Result<(), ModelError> {
        if let Some(j) = &self.journal {
            j.append_all(&records)?;
        }
        for r in records {
            state.apply(r);
        }
        Ok(())
    }

    /// Step-level problems with `input`; empty when it can be stored.
    pub fn validate(&self, input: &ModelInput) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        if input.name.trim().is_empty() {
            out.push(Diagnostic {
                step: "name".into(),
                message: "must not be empty".into(),
            });
        }
        if let Err(e) = self.context.resolve(&input.target) {
            out.push(Diagnostic {
                step: "target".into(),
                message: e.to_string(),
            });
        }
        out.extend(input.pipeline.validate(&input.target, &self.context));
        if let Some(s) = &input.train_schedule {
            if s.task != TaskKind::Train {
                out.push(Diagnostic {
                    step: "train_schedule".into(),
                    message: "task must be `train`".into(),
                });
            }
            if let Err(e) = s.validate() {
                out.push(Diagnostic {
                    step: "train_schedule".into(),
                    message: e,
                });
            }
        }
        out
    }

    /// Validates and stores a model, links it into the context graph and
    /// registers the `#sigma` signal its forecasts need.
    pub fn store_model(&self, input: ModelInput) -> Result<Model, ModelError> {
        let diagnostics = self.validate(&input);
        if !diagnostics.is_empty() {
            return Err(ModelError::Validation(diagnostics));
        }
        let target_key = self.context.resolve(&input.target)?;
        let output = match &input.pipeline.score.output_signal {
            Some(sig) => self.context.resolve(&ContextRef {
                signal: sig.clone(),
                signal_type: None,
                ..input.target.clone()
            })?,
            None => target_key,
        };
        self.context.sigma_signal(output.signal)?;

        let mut st = self.state.write();
        let (id, created_at) = match input.id {
            Some(id) => {
                let existing = st.models.get(&id).ok_or(ModelError::UnknownModel(id))?;
                (id, existing.created_at)
            }
            None => (st.next_model.max(1), time::now()),
        };
        let model = Model {
            id,
            name: input.name,
            description: input.description,
            target: input.target,
            target_key,
            pipeline: input.pipeline,
            train_schedule: input.train_schedule,
            created_at,
        };
        self.commit(&mut st, vec![Record::Model(model.clone())])?;
        drop(st);
        self.context.link_model(ModelLink {
            model: model.id,
            name: model.name.clone(),
            target: target_key,
        })?;
        Ok(model)
    }

    /// Appends a version. A second version for the same `(model, due)`
    /// returns the first one unchanged.
    pub fn store_version(&self, model: ModelId, new: NewVersion) -> Result<ModelVersion, ModelError> {
        Gam2Artifact::from_json(&new.params).map_err(|e| ModelError::CorruptParams(e.to_string()))?;
        if let Some(s) = &new.score_schedule {
            s.validate().map_err(|e| {
                ModelError::Validation(vec![Diagnostic {
                    step: "score_schedule".into(),
                    message: e,
                }])
            })?;
        }
        let mut st = self.state.write();
        if !st.models.contains_key(&model) {
            return Err(ModelError::UnknownModel(model));
        }
        if let Some(due) = new.due {
            let dup = st.by_model[&model].iter().map(|id| &st.versions[id]).find(|v| v.due == Some(due));
            if let Some(v) = dup {
                return Ok(v.clone());
            }
        }
        let trained_at = st.latest(model).map_or(new.trained_at, |l| l.trained_at.max(new.trained_at));
        let version = ModelVersion {
            id: st.next_version.max(1),
            model,
            trained_at,
            due: new.due,
            params: new.params,
            score_schedule: new.score_schedule,
            from_template: new.supersede,
            metrics: new.metrics,
        };
        let mut records = Vec::new();
        if let (true, Some(start)) = (new.supersede, new.score_schedule.map(|s| s.time)) {
            for id in &st.by_model[&model] {
                let old = &st.versions[id];
                let Some(s) = old.score_schedule.filter(|_| old.from_template) else {
                    continue;
                };
                let cut = if start <= s.time {
                    None
                } else {
                    Some(DeploymentConfig {
                        until: Some(s.until.map_or(start - 1, |u| u.min(start - 1))),
                        ..s
                    })
                };
                if cut != old.score_schedule {
                    records.push(Record::Schedule {
                        version: old.id,
                        schedule: cut,
                    });
                }
            }
        }
        records.push(Record::Version(version.clone()));
        self.commit(&mut st, records)?;
        Ok(version)
    }

    pub fn set_score_schedule(
        &self,
        version: VersionId,
        schedule: Option<DeploymentConfig>,
    ) -> Result<ModelVersion, ModelError> {
        if let Some(s) = &schedule {
            let mut problems = Vec::new();
            if s.task != TaskKind::Score {
                problems.push("task must be `score`".to_string());
            }
            if let Err(e) = s.validate() {
                problems.push(e);
            }
            if !problems.is_empty() {
                return Err(ModelError::Validation(
                    problems
                        .into_iter()
                        .map(|message| Diagnostic {
                            step: "score_schedule".into(),
                            message,
                        })
                        .collect(),
                ));
            }
        }
        let mut st = self.state.write();
        if !st.versions.contains_key(&version) {
            return Err(ModelError::UnknownVersion(version));
        }
        self.commit(&mut st, vec![Record::Schedule { version, schedule }])?;
        Ok(st.versions[&version].clone())
    }

    pub fn set_train_schedule(&self, model: ModelId, schedule: Option<DeploymentConfig>) -> Result<Model, ModelError> {
        if let Some(s) = &schedule {
            if s.task != TaskKind::Train || s.validate().is_err() {
                return Err(ModelError::Validation(vec![Diagnostic {
                    step: "train_schedule".into(),
                    message: s.validate().err().unwrap_or_else(|| "task must be `train`".into()),
                }]));
            }
        }
        let mut st = self.state.write();
        let mut m = st.models.get(&model).cloned().ok_or(ModelError::UnknownModel(model))?;
        m.train_schedule = schedule;
        self.commit(&mut st, vec![Record::Model(m.clone())])?;
        Ok(m)
    }

    /// Pins the version used for "latest" forecast queries; `None` restores
    /// latest-version-wins.
    pub fn set_active_version(&self, model: ModelId, version: Option<VersionId>) -> Result<(), ModelError> {
        let mut st = self.state.write();
        if !st.models.contains_key(&model) {
            return Err(ModelError::UnknownModel(model));
        }
        if let Some(v) = version {
            let owner = st.versions.get(&v).ok_or(ModelError::UnknownVersion(v))?.model;
            if owner != model {
                return Err(ModelError::VersionMismatch { model, version: v });
            }
        }
        self.commit(&mut st, vec![Record::Active { model, version }])
    }

    pub fn model(&self, id: ModelId) -> Option<Model> {
        self.state.read().models.get(&id).cloned()
    }

    pub fn models(&self) -> Vec<Model> {
        self.state.read().models.values().cloned().collect()
    }

    pub fn version(&self, id: VersionId) -> Option<ModelVersion> {
        self.state.read().versions.get(&id).cloned()
    }

    /// Versions of `model` in storage order.
    pub fn versions(&self, model: ModelId) -> Result<Vec<ModelVersion>, ModelError> {
        let st = self.state.read();
        let ids = st.by_model.get(&model).ok_or(ModelError::UnknownModel(model))?;
        Ok(ids.iter().map(|id| st.versions[id].clone()).collect())
    }

    pub fn version_summaries(&self, model: ModelId) -> Result<Vec<VersionSummary>, ModelError> {
        let st = self.state.read();
        let ids = st.by_model.get(&model).ok_or(ModelError::UnknownModel(model))?;
        Ok(ids.iter().map(|id| st.summary(&st.versions[id])).collect())
    }

    pub fn all_versions(&self) -> Vec<ModelVersion> {
        self.state.read().versions.values().cloned().collect()
    }

    pub fn latest_version(&self, model: ModelId) -> Option<ModelVersion> {
        self.state.read().latest(model).cloned()
    }

    pub fn active_version(&self, model: ModelId) -> Option<VersionId> {
        self.state.read().active.get(&model).copied()
    }

    pub fn summary(&self, model: ModelId) -> Option<ModelSummary> {
        let st = self.state.read();
        st.models.get(&model).map(|m| st.model_summary(m))
    }

    /// Whether forecasts of `version` take part in "latest" resolution: all
    /// versions do unless their model has a pinned active version.
    pub fn is_eligible(&self, version: VersionId) -> bool {
        let st = self.state.read();
        match st.versions.get(&version) {
            Some(v) => st.active.get(&v.model).is_none_or(|a| *a == version),
            None => true,
        }
    }

    /// Models whose target matches the filters. With `include_related`,
    /// also models on entities related to a matching entity whose target
    /// signal has the same signal type.
    pub fn list_models_for_context(
        &self,
        entity: Option<EntityId>,
        signal: Option<SignalId>,
        include_related: bool,
    ) -> Vec<ModelSummary> {
        let st = self.state.read();
        let signal_type = |id: SignalId| self.context.signal(id).map(|s| s.type_id);
        let wanted_type = signal.and_then(signal_type);
        let related: BTreeSet<EntityId> = match (include_related, entity) {
            (true, Some(e)) => self.context.neighbours(e).into_iter().collect(),
            _ => BTreeSet::new(),
        };
        st.models
            .values()
            .filter(|m| {
                let k = m.target_key;
                let exact = entity.is_none_or(|e| e == k.entity) && signal.is_none_or(|s| s == k.signal);
                let near = related.contains(&k.entity)
                    && match signal {
                        Some(_) => wanted_type.is_some() && signal_type(k.signal) == wanted_type,
                        None => true,
                    };
                exact || near
            })
            .map(|m| st.model_summary(m))
            .collect()
    }

    /// Models (by name, then id) with their versions (by training time,
    /// then id), optionally restricted to one target.
    pub fn model_hierarchy(&self, target: Option<ContextKey>) -> Vec<HierarchyNode> {
        let st = self.state.read();
        let mut models: Vec<&Model> = st
            .models
            .values()
            .filter(|m| target.is_none_or(|t| m.target_key == t))
            .collect();
        models.sort_by(|a, b| a.name.cmp(&b.name).then(a.id.cmp(&b.id)));
        models
            .into_iter()
            .map(|m| {
                let mut versions: Vec<&ModelVersion> = st.by_model[&m.id].iter().map(|id| &st.versions[id]).collect();
                versions.sort_by_key(|v| (v.trained_at, v.id));
                HierarchyNode {
                    model: st.model_summary(m),
                    versions: versions.into_iter().map(|v| st.summary(v)).collect(),
                }
            })
            .collect()
    }
}
