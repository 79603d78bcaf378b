//! Message schemas of the bus queues. The HTTP service exposes the same
//! documents, so these types are the external JSON contract as well.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bus::BusError;
use crate::context::{ContextError, ContextRef, Entity, Geo, GraphDocument, Signal};
use crate::models::{HierarchyNode, Model, ModelError, ModelId, ModelSummary, ModelVersion, VersionSummary};
use crate::pipeline::{DeploymentConfig, Diagnostic};
use crate::scheduler::{ClockMode, JobResult, QueueState, Task};
use crate::time::{self, Timestamp};
use crate::timeseries::{ComparisonRow, LayerId, LayerKind, Producer, SeriesError, SeriesPoint, VersionId};

pub const SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    BadRequest,
    NotFound,
    Invalid,
    Conflict,
    Unavailable,
    Internal,
}

/// Error document returned by handlers (as the text of a handler error)
/// and by the HTTP service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub kind: ErrorKind,
    pub error: String,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<Diagnostic>,
}

impl ApiError {
    pub fn new(kind: ErrorKind, error: &str, detail: impl Into<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind,
            error: error.to_string(),
            detail: detail.into(),
            diagnostics: Vec::new(),
        }
    }

    pub fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(ErrorKind::BadRequest, "BadRequest", detail)
    }

    pub fn not_found(detail: impl Into<String>) -> Self {
        Self::new(ErrorKind::NotFound, "NotFound", detail)
    }

    pub fn internal(detail: impl Into<String>) -> Self {
        Self::new(ErrorKind::Internal, "Internal", detail)
    }

    /// Encoding used as a bus handler error.
    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("error serializes")
    }

    pub fn from_bus(err: BusError) -> Self {
        match err {
            BusError::Handler(text) => {
                serde_json::from_str(&text).unwrap_or_else(|_| ApiError::internal(text))
            }
            BusError::NoHandler(q) => ApiError::new(ErrorKind::Unavailable, "NoHandler", q),
            BusError::Timeout { queue, after } => {
                ApiError::new(ErrorKind::Unavailable, "Timeout", format!("{queue} after {after:?}"))
            }
            BusError::Payload(p) => ApiError::internal(p),
            BusError::Closed => ApiError::new(ErrorKind::Unavailable, "Closed", "bus is shut down"),
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.error, self.detail)
    }
}

impl std::error::Error for ApiError {}

impl From<ContextError> for ApiError {
    fn from(e: ContextError) -> Self {
        let (kind, name) = match &e {
            ContextError::NotFound { .. } | ContextError::UnknownEntityType(_) | ContextError::UnknownSignalType(_) => {
                (ErrorKind::NotFound, "UnknownContext")
            }
            ContextError::Ambiguous { .. } => (ErrorKind::Invalid, "AmbiguousName"),
            ContextError::CycleError { .. } => (ErrorKind::Conflict, "CycleError"),
            ContextError::MultipleParents(_) => (ErrorKind::Conflict, "MultipleParents"),
            ContextError::SelfEdge(_) | ContextError::InvalidGeo { .. } | ContextError::InvalidName(_) => {
                (ErrorKind::Invalid, "ValidationError")
            }
            ContextError::Storage(_) => (ErrorKind::Internal, "StorageError"),
        };
        ApiError::new(kind, name, e.to_string())
    }
}

impl From<SeriesError> for ApiError {
    fn from(e: SeriesError) -> Self {
        match e {
            SeriesError::Context(c) => c.into(),
            SeriesError::UnknownContext(_) => ApiError::new(ErrorKind::NotFound, "UnknownContext", e.to_string()),
            SeriesError::UnsortedInput(_) => ApiError::new(ErrorKind::Invalid, "UnsortedInput", e.to_string()),
            SeriesError::NonFiniteValue(_) => ApiError::new(ErrorKind::Invalid, "NonFiniteValue", e.to_string()),
            SeriesError::InvalidRange { .. } => ApiError::new(ErrorKind::Invalid, "InvalidRange", e.to_string()),
            SeriesError::MissingProducer => ApiError::new(ErrorKind::Invalid, "MissingProducer", e.to_string()),
            SeriesError::Storage(_) => ApiError::new(ErrorKind::Internal, "StorageError", e.to_string()),
        }
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Validation(d) => {
                let mut err = ApiError::new(ErrorKind::Invalid, "ValidationError", ModelError::Validation(d.clone()).to_string());
                err.diagnostics = d;
                err
            }
            ModelError::UnknownModel(_) => ApiError::new(ErrorKind::NotFound, "UnknownModel", e.to_string()),
            ModelError::UnknownVersion(_) => ApiError::new(ErrorKind::NotFound, "UnknownVersion", e.to_string()),
            ModelError::VersionMismatch { .. } => ApiError::new(ErrorKind::Invalid, "VersionMismatch", e.to_string()),
            ModelError::CorruptParams(_) => ApiError::new(ErrorKind::Invalid, "CorruptParams", e.to_string()),
            ModelError::Context(c) => c.into(),
            ModelError::Storage(_) => ApiError::new(ErrorKind::Internal, "StorageError", e.to_string()),
        }
    }
}

// ---- time series ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesQuery {
    #[serde(flatten)]
    pub context: ContextRef,
    #[serde(with = "time::rfc3339")]
    pub from: Timestamp,
    #[serde(with = "time::rfc3339")]
    pub to: Timestamp,
    #[serde(default)]
    pub kind: LayerKind,
    #[serde(default)]
    pub producer: Producer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesResponse {
    pub schema_version: u32,
    pub entity: String,
    pub signal: String,
    pub kind: LayerKind,
    pub points: Vec<SeriesPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesBatch {
    #[serde(flatten)]
    pub context: ContextRef,
    pub points: Vec<SeriesPoint>,
}

/// Marks an ingest as the output of one scoring run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForecastMeta {
    pub producer: VersionId,
    #[serde(with = "time::rfc3339")]
    pub due: Timestamp,
    #[serde(default, with = "time::rfc3339::option")]
    pub created_at: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestRequest {
    pub series: Vec<SeriesBatch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forecast: Option<ForecastMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestResponse {
    pub schema_version: u32,
    pub stored: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareQuery {
    #[serde(flatten)]
    pub context: ContextRef,
    #[serde(with = "time::rfc3339")]
    pub from: Timestamp,
    #[serde(with = "time::rfc3339")]
    pub to: Timestamp,
    #[serde(default)]
    pub producer: Producer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareResponse {
    pub schema_version: u32,
    pub entity: String,
    pub signal: String,
    pub rows: Vec<ComparisonRow>,
    /// Accuracy over rows holding both an observation and a forecast.
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    pub n: usize,
}

/// RMSE and MAE over the rows with both values, accumulated in row order.
pub fn accuracy(rows: &[ComparisonRow]) -> (Option<f64>, Option<f64>, usize) {
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut n = 0usize;
    for r in rows {
        if let (Some(o), Some(f)) = (r.observed, r.forecast) {
            let e = o - f;
            sq += e * e;
            abs += e.abs();
            n += 1;
        }
    }
    if n == 0 {
        return (None, None, 0);
    }
    (Some((sq / n as f64).sqrt()), Some(abs / n as f64), n)
}

// ---- context ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GraphQuery {
    #[serde(default)]
    pub include_models: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphResponse {
    pub schema_version: u32,
    #[serde(flatten)]
    pub graph: GraphDocument,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityInput {
    pub name: String,
    pub entity_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo: Option<Geo>,
    /// Name of the PARENT_OF parent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub connected_to: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityResponse {
    pub schema_version: u32,
    pub entity: Entity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalInput {
    pub name: String,
    pub signal_type: String,
    #[serde(default)]
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalResponse {
    pub schema_version: u32,
    pub signal: Signal,
}

// ---- models ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModelGet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<VersionId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub schema_version: u32,
    pub model: Model,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<ModelVersion>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelListQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<String>,
    #[serde(default)]
    pub include_related: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelListResponse {
    pub schema_version: u32,
    pub models: Vec<ModelSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyResponse {
    pub schema_version: u32,
    pub models: Vec<HierarchyNode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionsQuery {
    pub model: ModelId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionsResponse {
    pub schema_version: u32,
    pub model: ModelId,
    pub versions: Vec<VersionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PutVersion {
    pub model: ModelId,
    pub params: String,
    #[serde(with = "time::rfc3339")]
    pub trained_at: Timestamp,
    #[serde(default, with = "time::rfc3339::option")]
    pub due: Option<Timestamp>,
    #[serde(default)]
    pub score_schedule: Option<DeploymentConfig>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub supersede: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionResponse {
    pub schema_version: u32,
    pub version: VersionSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivateRequest {
    pub model: ModelId,
    /// `null` returns the model to latest-version-wins.
    pub version: Option<VersionId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivateResponse {
    pub schema_version: u32,
    pub model: ModelSummary,
}

// ---- scheduler and jobs ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuesResponse {
    pub schema_version: u32,
    pub clock: ClockMode,
    #[serde(with = "time::rfc3339")]
    pub now: Timestamp,
    pub workers: usize,
    pub in_flight: usize,
    pub queues: QueueState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunNowRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<VersionId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunNowResponse {
    pub schema_version: u32,
    pub task: Task,
}

/// Payload of `job.completed` / `job.failed`, and one entry of the job log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job: Task,
    #[serde(flatten)]
    pub result: JobResult,
    #[serde(with = "time::rfc3339")]
    pub finished_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct JobsQuery {
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobsResponse {
    pub schema_version: u32,
    pub jobs: Vec<JobRecord>,
}
