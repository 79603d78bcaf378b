//! CSV ingestion: `ts,entity,signal,value` rows, grouped by context and
//! stored through the bus.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use castorette_core::api::{
    ApiError, EntityInput, EntityResponse, ErrorKind, GraphQuery, GraphResponse, IngestRequest, IngestResponse,
    SeriesBatch, SignalInput, SignalResponse, SCHEMA_VERSION,
};
use castorette_core::bus::{queues, Bus};
use castorette_core::context::{ContextRef, NodeKind};
use castorette_core::time::{parse_timestamp, Timestamp};
use castorette_core::timeseries::SeriesPoint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HEADER: [&str; 4] = ["ts", "entity", "signal", "value"];

/// Points per ingest request.
const CHUNK: usize = 50_000;

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("expected header `ts,entity,signal,value`, found `{0}`")]
    Header(String),
    #[error("reading CSV: {0}")]
    Read(#[from] csv::Error),
    #[error(transparent)]
    Api(#[from] ApiError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Reject rows of unknown entities or signals instead of creating them.
    pub strict: bool,
    pub entity_type: String,
    pub signal_type: String,
    pub unit: String,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            strict: false,
            entity_type: "default".into(),
            signal_type: "default".into(),
            unit: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    /// Line in the input, the header being line 1.
    pub line: u64,
    pub error: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub schema_version: u32,
    /// Data rows read.
    pub rows: usize,
    /// Points stored.
    pub stored: usize,
    pub contexts: usize,
    pub created_entities: Vec<String>,
    pub created_signals: Vec<String>,
    pub errors: Vec<RowError>,
}

type Group = BTreeMap<Timestamp, (f64, u64)>;

fn row_error(line: u64, error: &str, detail: impl Into<String>) -> RowError {
    RowError {
        line,
        error: error.into(),
        detail: detail.into(),
    }
}

fn parse_row(rec: &csv::StringRecord) -> Result<(Timestamp, String, String, f64), String> {
    if rec.len() != 4 {
        return Err(format!("expected 4 fields, found {}", rec.len()));
    }
    let ts = parse_timestamp(&rec[0]).map_err(|e| format!("ts `{}`: {e}", &rec[0]))?;
    if rec[1].is_empty() || rec[2].is_empty() {
        return Err("entity and signal must not be empty".into());
    }
    let value: f64 = rec[3].parse().map_err(|_| format!("value `{}` is not a number", &rec[3]))?;
    if !value.is_finite() {
        return Err(format!("value `{}` is not finite", &rec[3]));
    }
    Ok((ts, rec[1].to_string(), rec[2].to_string(), value))
}

/// Reads every row, reports malformed ones and stores the rest. Within one
/// input, a later row for the same context and timestamp wins.
pub fn ingest_csv<R: Read>(bus: &Bus, input: R, opts: &IngestOptions) -> Result<IngestReport, CsvError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    let header = reader.headers()?.clone();
    if header.iter().ne(HEADER) {
        return Err(CsvError::Header(header.iter().collect::<Vec<_>>().join(",")));
    }

    let mut report = IngestReport {
        schema_version: SCHEMA_VERSION,
        ..IngestReport::default()
    };
    let mut groups: BTreeMap<(String, String), Group> = BTreeMap::new();
    let mut rec = csv::StringRecord::new();
    loop {
        let line = reader.position().line();
        match reader.read_record(&mut rec) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) if matches!(e.kind(), csv::ErrorKind::Utf8 { .. }) => {
                report.rows += 1;
                report.errors.push(row_error(line, "MalformedRow", e.to_string()));
                continue;
            }
            Err(e) => return Err(e.into()),
        }
        report.rows += 1;
        let line = rec.position().map_or(line, |p| p.line());
        match parse_row(&rec) {
            Ok((ts, entity, signal, value)) => {
                groups.entry((entity, signal)).or_default().insert(ts, (value, line));
            }
            Err(detail) => report.errors.push(row_error(line, "MalformedRow", detail)),
        }
    }

    let graph: GraphResponse = bus.call(queues::CONTEXT_GRAPH, &GraphQuery { include_models: false }).map_err(ApiError::from_bus)?;
    let mut entities: BTreeSet<String> = BTreeSet::new();
    let mut signals: BTreeSet<String> = BTreeSet::new();
    for n in graph.graph.nodes {
        match n.kind {
            NodeKind::Entity => {
                entities.insert(n.label);
            }
            NodeKind::Signal => {
                signals.insert(n.label);
            }
            _ => {}
        }
    }

    for ((entity, signal), points) in groups {
        let reject = |report: &mut IngestReport, error: &str, detail: &str| {
            for (_, line) in points.values() {
                report.errors.push(row_error(*line, error, detail));
            }
        };
        let missing: Vec<String> = [
            (!entities.contains(&entity)).then(|| format!("entity `{entity}`")),
            (!signals.contains(&signal)).then(|| format!("signal `{signal}`")),
        ]
        .into_iter()
        .flatten()
        .collect();
        if !missing.is_empty() && opts.strict {
            reject(&mut report, "UnknownContext", &format!("unknown {}", missing.join(" and ")));
            continue;
        }
        if !entities.contains(&entity) {
            let _: EntityResponse = bus
                .call(
                    queues::CONTEXT_ENTITY,
                    &EntityInput {
                        name: entity.clone(),
                        entity_type: opts.entity_type.clone(),
                        geo: None,
                        parent: None,
                        connected_to: Vec::new(),
                    },
                )
                .map_err(ApiError::from_bus)?;
            entities.insert(entity.clone());
            report.created_entities.push(entity.clone());
        }
        if !signals.contains(&signal) {
            let _: SignalResponse = bus
                .call(
                    queues::CONTEXT_SIGNAL,
                    &SignalInput {
                        name: signal.clone(),
                        signal_type: opts.signal_type.clone(),
                        unit: opts.unit.clone(),
                    },
                )
                .map_err(ApiError::from_bus)?;
            signals.insert(signal.clone());
            report.created_signals.push(signal.clone());
        }

        let all: Vec<SeriesPoint> = points.iter().map(|(ts, (v, _))| SeriesPoint::new(*ts, *v)).collect();
        let mut stored = 0;
        for chunk in all.chunks(CHUNK) {
            let resp: Result<IngestResponse, _> = bus.call(
                queues::TS_INGEST,
                &IngestRequest {
                    series: vec![SeriesBatch {
                        context: ContextRef::new(entity.clone(), signal.clone()),
                        points: chunk.to_vec(),
                    }],
                    forecast: None,
                },
            );
            match resp.map_err(ApiError::from_bus) {
                Ok(r) => stored += r.stored,
                Err(e) if matches!(e.kind, ErrorKind::Internal | ErrorKind::Unavailable) => return Err(e.into()),
                Err(e) => {
                    let lines: BTreeSet<Timestamp> = chunk.iter().map(|p| p.ts).collect();
                    for (ts, (_, line)) in &points {
                        if lines.contains(ts) {
                            report.errors.push(row_error(*line, &e.error, &e.detail));
                        }
                    }
                }
            }
        }
        if stored > 0 {
            report.contexts += 1;
            report.stored += stored;
        }
    }
    report.errors.sort_by_key(|e| e.line);
    Ok(report)
}
