//! Append-only storage of observed series and forecast layers.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::context::{ContextError, ContextKey, ContextStore};
use crate::journal::{Journal, JournalError};
use crate::time::{self, Timestamp};

pub type LayerId = u64;
pub type VersionId = u64;

/// Layer journals are compacted once they hold this many records.
const COMPACT_AFTER: usize = 64;

#[derive(Debug, Error)]
pub enum SeriesError {
    #[error("unknown context (entity {}, signal {})", .0.entity, .0.signal)]
    UnknownContext(ContextKey),
    #[error("points are not sorted by timestamp (index {0})")]
    UnsortedInput(usize),
    #[error("non-finite value at index {0}")]
    NonFiniteValue(usize),
    #[error("invalid range: from {from} is not before to {to}")]
    InvalidRange { from: Timestamp, to: Timestamp },
    #[error("forecast layers need a producing model version")]
    MissingProducer,
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Storage(#[from] JournalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    #[default]
    Observed,
    Forecast,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: LayerId,
    pub key: ContextKey,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub producer: Option<VersionId>,
    /// Due time of the scoring run that produced a forecast layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub due: Option<Timestamp>,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    #[serde(with = "time::rfc3339")]
    pub ts: Timestamp,
    pub value: f64,
    /// Model version that produced a forecast point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub producer: Option<VersionId>,
}

impl SeriesPoint {
    pub fn new(ts: Timestamp, value: f64) -> Self {
        Self {
            ts,
            value,
            producer: None,
        }
    }
}

/// Which forecast layers a query reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Producer {
    /// For every timestamp, the most recently created layer holding it.
    #[default]
    Latest,
    Version(VersionId),
}

impl Serialize for Producer {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Producer::Latest => s.serialize_str("latest"),
            Producer::Version(v) => s.serialize_u64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Producer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Id(v) => Ok(Producer::Version(v)),
            Raw::Text(t) if t == "latest" => Ok(Producer::Latest),
            Raw::Text(t) => t
                .parse()
                .map(Producer::Version)
                .map_err(|_| serde::de::Error::custom(format!("expected \"latest\" or a version id, got `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeQuery {
    pub key: ContextKey,
    pub from: Timestamp,
    pub to: Timestamp,
    pub kind: LayerKind,
    pub producer: Producer,
}

/// One row of the forecast-versus-observed join.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    #[serde(with = "time::rfc3339")]
    pub ts: Timestamp,
    pub observed: Option<f64>,
    pub forecast: Option<f64>,
    pub sigma: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub producer: Option<VersionId>,
}

/// Half-width factor of the reported uncertainty band.
pub const BAND_Z: f64 = 1.96;

#[derive(Debug, Serialize, Deserialize)]
struct Batch {
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    replace: bool,
    points: Vec<(Timestamp, f64)>,
}

struct Layer {
    info: LayerInfo,
    points: RwLock<BTreeMap<Timestamp, f64>>,
    journal: Option<Journal>,
}

impl Layer {
    fn write(&self, points: &[(Timestamp, f64)], replace: bool) -> Result<(), SeriesError> {
        let mut map = self.points.write();
        if let Some(j) = &self.journal {
            j.append(&Batch {
                replace,
                points: points.to_vec(),
            })?;
        }
        if replace {
            map.clear();
        }
        map.extend(points.iter().copied());
        if let Some(j) = &self.journal {
            if j.len() > COMPACT_AFTER {
                let all: Vec<(Timestamp, f64)> = map.iter().map(|(t, v)| (*t, *v)).collect();
                j.compact(&[Batch {
                    replace: true,
                    points: all,
                }])?;
            }
        }
        Ok(())
    }
}

#[derive(Default)]
struct Index {
    next_id: LayerId,
    layers: BTreeMap<LayerId, Arc<Layer>>,
    observed: HashMap<ContextKey, LayerId>,
    forecasts: HashMap<(ContextKey, VersionId, Timestamp), LayerId>,
}

impl Index {
    fn insert(&mut self, layer: Arc<Layer>) {
        let info = &layer.info;
        self.next_id = self.next_id.max(info.id + 1);
        match info.kind {
            LayerKind::Observed => {
                self.observed.insert(info.key, info.id);
            }
            LayerKind::Forecast => {
                self.forecasts
                    .insert((info.key, info.producer.unwrap_or(0), info.due.unwrap_or(0)), info.id);
            }
        }
        self.layers.insert(info.id, layer);
    }
}

pub struct TimeseriesStore {
    context: Arc<ContextStore>,
    index: RwLock<Index>,
    dir: Option<PathBuf>,
    catalog: Option<Journal>,
    sync: bool,
}

fn validate(points: &[SeriesPoint]) -> Result<Vec<(Timestamp, f64)>, SeriesError> {
    for (i, p) in points.iter().enumerate() {
        if !p.value.is_finite() {
            return Err(SeriesError::NonFiniteValue(i));
        }
        if i > 0 && p.ts < points[i - 1].ts {
            return Err(SeriesError::UnsortedInput(i));
        }
    }
    Ok(points.iter().map(|p| (p.ts, p.value)).collect())
}

impl TimeseriesStore {
    pub fn in_memory(context: Arc<ContextStore>) -> Self {
        Self {
            context,
            index: RwLock::new(Index::default()),
            dir: None,
            catalog: None,
            sync: false,
        }
    }

    pub fn open(dir: &Path, context: Arc<ContextStore>, sync: bool) -> Result<Self, SeriesError> {
        let dir = dir.join("series");
        let (catalog, infos) = Journal::open::<LayerInfo>(&dir.join("layers.jsonl"), sync)?;
        let mut index = Index::default();
        for info in infos {
            let (journal, batches) = Journal::open::<Batch>(&Self::layer_path(&dir, info.id), sync)?;
            let mut points = BTreeMap::new();
            for b in batches {
                if b.replace {
                    points.clear();
                }
                points.extend(b.points);
            }
            index.insert(Arc::new(Layer {
                info,
                points: RwLock::new(points),
                journal: Some(journal),
            }));
        }
        Ok(Self {
            context,
            index: RwLock::new(index),
            dir: Some(dir),
            catalog: Some(catalog),
            sync,
        })
    }

    fn layer_path(dir: &Path, id: LayerId) -> PathBuf {
        dir.join(format!("layer-{id}.jsonl"))
    }

    pub fn context(&self) -> &Arc<ContextStore> {
        &self.context
    }

    fn check_key(&self, key: ContextKey) -> Result<(), SeriesError> {
        if !self.context.contains(key) {
            return Err(SeriesError::UnknownContext(key));
        }
        Ok(())
    }

    /// Returns the layer, creating (and durably registering) it if needed.
    fn layer(
        &self,
        key: ContextKey,
        kind: LayerKind,
        producer: Option<VersionId>,
        due: Option<Timestamp>,
        created_at: Timestamp,
    ) -> Result<Arc<Layer>, SeriesError> {
        let lookup = |idx: &Index| -> Option<Arc<Layer>> {
            let id = match kind {
                LayerKind::Observed => idx.observed.get(&key)?,
                LayerKind::Forecast => idx.forecasts.get(&(key, producer?, due?))?,
            };
            idx.layers.get(id).cloned()
        };
        if let Some(l) = lookup(&self.index.read()) {
            return Ok(l);
        }
        let mut idx = self.index.write();
        if let Some(l) = lookup(&idx) {
            return Ok(l);
        }
        let info = LayerInfo {
            id: idx.next_id.max(1),
            key,
            kind,
            producer,
            due,
            created_at,
        };
        let journal = match &self.dir {
            Some(dir) => Some(Journal::open::<Batch>(&Self::layer_path(dir, info.id), self.sync)?.0),
            None => None,
        };
        if let Some(c) = &self.catalog {
            c.append(&info)?;
        }
        self.context.bind(key)?;
        let layer = Arc::new(Layer {
            info,
            points: RwLock::new(BTreeMap::new()),
            journal,
        });
        idx.insert(layer.clone());
        Ok(layer)
    }

    /// Appends observations to the key's observed layer; points with an
    /// already stored timestamp overwrite it.
    pub fn ingest(&self, key: ContextKey, points: &[SeriesPoint]) -> Result<usize, SeriesError> {
        self.check_key(key)?;
        let pts = validate(points)?;
        if pts.is_empty() {
            return Ok(0);
        }
        let layer = self.layer(key, LayerKind::Observed, None, None, time::now())?;
        layer.write(&pts, false)?;
        Ok(pts.len())
    }

    /// Stores the output of one scoring run: one forecast layer per key,
    /// identified by `(key, producer, due)`. Re-running the same scoring job
    /// replaces the earlier output instead of adding a layer.
    pub fn ingest_forecast(
        &self,
        series: &[(ContextKey, Vec<SeriesPoint>)],
        producer: VersionId,
        due: Timestamp,
        created_at: Timestamp,
    ) -> Result<Vec<LayerId>, SeriesError> {
        let mut staged = Vec::with_capacity(series.len());
        for (key, points) in series {
            self.check_key(*key)?;
            staged.push((*key, validate(points)?));
        }
        let mut ids = Vec::with_capacity(staged.len());
        for (key, pts) in staged {
            let layer = self.layer(key, LayerKind::Forecast, Some(producer), Some(due), created_at)?;
            layer.write(&pts, true)?;
            ids.push(layer.info.id);
        }
        Ok(ids)
    }

    pub fn layers(&self, key: ContextKey) -> Vec<LayerInfo> {
        self.index
            .read()
            .layers
            .values()
            .filter(|l| l.info.key == key)
            .map(|l| l.info.clone())
            .collect()
    }

    pub fn layer_info(&self, id: LayerId) -> Option<LayerInfo> {
        self.index.read().layers.get(&id).map(|l| l.info.clone())
    }

    pub fn forecast_layer(&self, key: ContextKey, producer: VersionId, due: Timestamp) -> Option<LayerInfo> {
        let idx = self.index.read();
        let id = idx.forecasts.get(&(key, producer, due))?;
        idx.layers.get(id).map(|l| l.info.clone())
    }

    /// All forecast layers, in creation order.
    pub fn forecast_layers(&self) -> Vec<LayerInfo> {
        self.index
            .read()
            .layers
            .values()
            .filter(|l| l.info.kind == LayerKind::Forecast)
            .map(|l| l.info.clone())
            .collect()
    }

    pub fn layer_points(&self, id: LayerId) -> Vec<SeriesPoint> {
        let idx = self.index.read();
        let Some(layer) = idx.layers.get(&id) else {
            return Vec::new();
        };
        let producer = layer.info.producer;
        let points = layer.points.read();
        points
            .iter()
            .map(|(ts, v)| SeriesPoint {
                ts: *ts,
                value: *v,
                producer,
            })
            .collect()
    }

    pub fn query(&self, q: &RangeQuery) -> Result<Vec<SeriesPoint>, SeriesError> {
        self.query_filtered(q, |_| true)
    }

    /// Like [`query`](Self::query); forecast layers rejected by `eligible`
    /// are ignored when resolving [`Producer::Latest`].
    pub fn query_filtered(
        &self,
        q: &RangeQuery,
        eligible: impl Fn(&LayerInfo) -> bool,
    ) -> Result<Vec<SeriesPoint>, SeriesError> {
        Ok(self
            .resolve(q, eligible)?
            .into_iter()
            .map(|(ts, value, layer)| SeriesPoint {
                ts,
                value,
                producer: layer.producer,
            })
            .collect())
    }

    fn resolve(
        &self,
        q: &RangeQuery,
        eligible: impl Fn(&LayerInfo) -> bool,
    ) -> Result<Vec<(Timestamp, f64, LayerInfo)>, SeriesError> {
        self.check_key(q.key)?;
        if q.from >= q.to {
            return Err(SeriesError::InvalidRange { from: q.from, to: q.to });
        }
        let idx = self.index.read();
        let mut layers: Vec<&Arc<Layer>> = match q.kind {
            LayerKind::Observed => idx.observed.get(&q.key).and_then(|id| idx.layers.get(id)).into_iter().collect(),
            LayerKind::Forecast => idx
                .layers
                .values()
                .filter(|l| l.info.key == q.key && l.info.kind == LayerKind::Forecast)
                .filter(|l| match q.producer {
                    Producer::Latest => eligible(&l.info),
                    Producer::Version(v) => l.info.producer == Some(v),
                })
                .collect(),
        };
        layers.sort_by_key(|l| std::cmp::Reverse((l.info.created_at, l.info.id)));
        let mut out: BTreeMap<Timestamp, (f64, LayerInfo)> = BTreeMap::new();
        for layer in layers {
            let points = layer.points.read();
            for (ts, v) in points.range(q.from..q.to) {
                out.entry(*ts).or_insert_with(|| (*v, layer.info.clone()));
            }
        }
        Ok(out.into_iter().map(|(ts, (v, info))| (ts, v, info)).collect())
    }

    /// Outer join of observations and forecasts on timestamp. The band is
    /// `forecast +- 1.96 sigma`, with sigma read from the sibling layer of
    /// `sigma_key` written by the same scoring run.
    pub fn forecast_vs_observed(
        &self,
        key: ContextKey,
        sigma_key: Option<ContextKey>,
        from: Timestamp,
        to: Timestamp,
        producer: Producer,
        eligible: impl Fn(&LayerInfo) -> bool,
    ) -> Result<Vec<ComparisonRow>, SeriesError> {
        let observed = self.resolve(
            &RangeQuery {
                key,
                from,
                to,
                kind: LayerKind::Observed,
                producer,
            },
            |_| true,
        )?;
        let forecast = self.resolve(
            &RangeQuery {
                key,
                from,
                to,
                kind: LayerKind::Forecast,
                producer,
            },
            eligible,
        )?;
        let mut rows: BTreeMap<Timestamp, ComparisonRow> = BTreeMap::new();
        let blank = |ts| ComparisonRow {
            ts,
            observed: None,
            forecast: None,
            sigma: None,
            lower: None,
            upper: None,
            producer: None,
        };
        for (ts, v, _) in observed {
            rows.entry(ts).or_insert_with(|| blank(ts)).observed = Some(v);
        }
        let idx = self.index.read();
        for (ts, v, info) in forecast {
            let sigma = sigma_key.and_then(|sk| {
                let id = idx.forecasts.get(&(sk, info.producer?, info.due?))?;
                idx.layers.get(id)?.points.read().get(&ts).copied()
            });
            let row = rows.entry(ts).or_insert_with(|| blank(ts));
            row.forecast = Some(v);
            row.producer = info.producer;
            row.sigma = sigma;
            row.lower = sigma.map(|s| v - BAND_Z * s);
            row.upper = sigma.map(|s| v + BAND_Z * s);
        }
        Ok(rows.into_values().collect())
    }
}
