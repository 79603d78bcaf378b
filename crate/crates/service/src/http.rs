//! JSON-over-HTTP adapter. Each route turns its path, query and body into
//! a bus request and returns the handler's reply document unchanged.

use std::collections::BTreeMap;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use castorette_core::api::{ApiError, ErrorKind, SCHEMA_VERSION};
use castorette_core::bus::{queues, Bus, DEFAULT_TIMEOUT};
use serde_json::{json, Map, Value};

use crate::ingest::{ingest_csv, CsvError, IngestOptions};

#[derive(Clone)]
struct AppState {
    bus: Bus,
    timeout: Duration,
    ingest: IngestOptions,
}

pub struct ApiResponse(Result<Value, ApiError>);

pub fn status_of(kind: ErrorKind) -> StatusCode {
    match kind {
        ErrorKind::BadRequest => StatusCode::BAD_REQUEST,
        ErrorKind::NotFound => StatusCode::NOT_FOUND,
        ErrorKind::Invalid => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorKind::Conflict => StatusCode::CONFLICT,
        ErrorKind::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
        ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn json_response(status: StatusCode, body: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

impl IntoResponse for ApiResponse {
    fn into_response(self) -> Response {
        match self.0 {
            Ok(v) => json_response(StatusCode::OK, serde_json::to_vec(&v).expect("reply serializes")),
            Err(e) => json_response(status_of(e.kind), serde_json::to_vec(&e).expect("error serializes")),
        }
    }
}

async fn call(state: &AppState, queue: &'static str, payload: Result<Value, ApiError>) -> ApiResponse {
    let payload = match payload {
        Ok(p) => p,
        Err(e) => return ApiResponse(Err(e)),
    };
    let (bus, timeout) = (state.bus.clone(), state.timeout);
    let joined = tokio::task::spawn_blocking(move || bus.request(queue, payload, timeout)).await;
    ApiResponse(match joined {
        Ok(r) => r.map_err(ApiError::from_bus),
        Err(e) => Err(ApiError::internal(e.to_string())),
    })
}

fn body_json(body: &Bytes) -> Result<Value, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(json!({}));
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("request body: {e}")))
}

/// Query parameters as a JSON object; the listed keys are booleans or
/// integers, everything else stays a string.
fn params(q: BTreeMap<String, String>, bools: &[&str], ints: &[&str]) -> Result<Value, ApiError> {
    let mut out = Map::new();
    for (k, v) in q {
        let value = if bools.contains(&k.as_str()) {
            match v.as_str() {
                "" | "true" | "1" => Value::Bool(true),
                "false" | "0" => Value::Bool(false),
                _ => return Err(ApiError::bad_request(format!("`{k}` must be true or false, got `{v}`"))),
            }
        } else if ints.contains(&k.as_str()) {
            let n: u64 = v
                .parse()
                .map_err(|_| ApiError::bad_request(format!("`{k}` must be a non-negative integer, got `{v}`")))?;
            Value::from(n)
        } else {
            Value::String(v)
        };
        out.insert(k, value);
    }
    Ok(Value::Object(out))
}

fn with(mut v: Value, key: &str, value: Value) -> Result<Value, ApiError> {
    match v.as_object_mut() {
        Some(o) => {
            o.insert(key.to_string(), value);
            Ok(v)
        }
        None => Err(ApiError::bad_request("request body must be a JSON object")),
    }
}

type Q = Query<BTreeMap<String, String>>;

async fn health() -> ApiResponse {
    ApiResponse(Ok(json!({"schema_version": SCHEMA_VERSION, "status": "ok"})))
}

async fn context_graph(State(s): State<AppState>, Query(q): Q) -> ApiResponse {
    call(&s, queues::CONTEXT_GRAPH, params(q, &["include_models"], &[])).await
}

async fn put_entity(State(s): State<AppState>, body: Bytes) -> ApiResponse {
    call(&s, queues::CONTEXT_ENTITY, body_json(&body)).await
}

async fn put_signal(State(s): State<AppState>, body: Bytes) -> ApiResponse {
    call(&s, queues::CONTEXT_SIGNAL, body_json(&body)).await
}

async fn get_series(State(s): State<AppState>, Query(q): Q) -> ApiResponse {
    call(&s, queues::TS_QUERY, params(q, &[], &[])).await
}

async fn put_series(State(s): State<AppState>, body: Bytes) -> ApiResponse {
    call(&s, queues::TS_INGEST, body_json(&body)).await
}

async fn compare(State(s): State<AppState>, Query(q): Q) -> ApiResponse {
    call(&s, queues::TS_COMPARE, params(q, &[], &[])).await
}

async fn put_csv(State(s): State<AppState>, Query(q): Q, body: Bytes) -> ApiResponse {
    let mut opts = s.ingest.clone();
    if let Some(v) = q.get("strict") {
        opts.strict = matches!(v.as_str(), "" | "true" | "1");
    }
    for (key, slot) in [("entity_type", &mut opts.entity_type), ("signal_type", &mut opts.signal_type), ("unit", &mut opts.unit)] {
        if let Some(v) = q.get(key) {
            *slot = v.clone();
        }
    }
    let bus = s.bus.clone();
    let joined = tokio::task::spawn_blocking(move || ingest_csv(&bus, &body[..], &opts)).await;
    ApiResponse(match joined {
        Ok(Ok(report)) => Ok(serde_json::to_value(report).expect("report serializes")),
        Ok(Err(CsvError::Api(e))) => Err(e),
        Ok(Err(e)) => Err(ApiError::bad_request(e.to_string())),
        Err(e) => Err(ApiError::internal(e.to_string())),
    })
}

async fn list_models(State(s): State<AppState>, Query(q): Q) -> ApiResponse {
    call(&s, queues::MODEL_LIST, params(q, &["include_related"], &[])).await
}

async fn put_model(State(s): State<AppState>, body: Bytes) -> ApiResponse {
    call(&s, queues::MODEL_PUT, body_json(&body)).await
}

async fn replace_model(State(s): State<AppState>, Path(id): Path<u64>, body: Bytes) -> ApiResponse {
    call(&s, queues::MODEL_PUT, body_json(&body).and_then(|b| with(b, "id", id.into()))).await
}

async fn get_model(State(s): State<AppState>, Path(id): Path<u64>) -> ApiResponse {
    call(&s, queues::MODEL_GET, Ok(json!({"model": id}))).await
}

async fn hierarchy(State(s): State<AppState>, Query(q): Q) -> ApiResponse {
    call(&s, queues::MODEL_HIERARCHY, params(q, &[], &[])).await
}

async fn versions(State(s): State<AppState>, Path(id): Path<u64>) -> ApiResponse {
    call(&s, queues::MODEL_VERSIONS, Ok(json!({"model": id}))).await
}

async fn get_version(State(s): State<AppState>, Path((id, version)): Path<(u64, u64)>) -> ApiResponse {
    call(&s, queues::MODEL_GET, Ok(json!({"model": id, "version": version}))).await
}

async fn activate(State(s): State<AppState>, Path(id): Path<u64>, body: Bytes) -> ApiResponse {
    call(&s, queues::MODEL_ACTIVATE, body_json(&body).and_then(|b| with(b, "model", id.into()))).await
}

async fn sched_queues(State(s): State<AppState>) -> ApiResponse {
    call(&s, queues::SCHED_QUEUES, Ok(json!({}))).await
}

async fn run_now(State(s): State<AppState>, body: Bytes) -> ApiResponse {
    call(&s, queues::SCHED_RUN_NOW, body_json(&body)).await
}

async fn jobs(State(s): State<AppState>, Query(q): Q) -> ApiResponse {
    call(&s, queues::JOBS_RECENT, params(q, &[], &["limit"])).await
}

async fn fallback() -> ApiResponse {
    ApiResponse(Err(ApiError::not_found("no such endpoint")))
}

pub fn router(bus: Bus, ingest: IngestOptions) -> Router {
    let state = AppState {
        bus,
        timeout: DEFAULT_TIMEOUT,
        ingest,
    };
    Router::new()
        .route("/health", get(health))
        .route("/context/graph", get(context_graph))
        .route("/context/entities", post(put_entity).put(put_entity))
        .route("/context/signals", post(put_signal).put(put_signal))
        .route("/timeseries", get(get_series).post(put_series).put(put_series))
        .route("/timeseries/csv", post(put_csv).put(put_csv))
        .route("/timeseries/compare", get(compare))
        .route("/models", get(list_models).put(put_model).post(put_model))
        .route("/models/hierarchy", get(hierarchy))
        .route("/models/{id}", get(get_model).put(replace_model))
        .route("/models/{id}/versions", get(versions))
        .route("/models/{id}/versions/{version}", get(get_version))
        .route("/models/{id}/activate-version", post(activate).put(activate))
        .route("/scheduler/queues", get(sched_queues))
        .route("/scheduler/run-now", post(run_now))
        .route("/jobs/recent", get(jobs))
        .fallback(fallback)
        .with_state(state)
}

/// Serves `router` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    router: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router).with_graceful_shutdown(shutdown).await
}
