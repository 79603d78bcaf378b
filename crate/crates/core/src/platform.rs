//! Wires the stores, the bus handlers, the job log, the runner and the
//! scheduler into one process.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions, TryLockError};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Weak};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use chrono::NaiveDate;
use parking_lot::RwLock;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::api::*;
use crate::bus::{queues, Bus};
use crate::context::{ContextError, ContextStore, RelationKind};
use crate::journal::{Journal, JournalError};
use crate::models::{ModelError, ModelInput, ModelStore, NewVersion};
use crate::runner::Runner;
use crate::scheduler::{Clock, JobExecutor, JobResult, ScheduleEntry, ScheduleSource, Scheduler, Subject, Task};
use crate::time::Timestamp;
use crate::timeseries::{LayerKind, Producer, RangeQuery, SeriesError, TimeseriesStore};

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("data directory {0} is in use by another process")]
    Locked(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone)]
pub struct PlatformConfig {
    /// Persistent storage; `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    /// `fdatasync` after every committed write.
    pub sync: bool,
    /// Job worker pool size.
    pub workers: usize,
    /// Bus handler threads.
    pub bus_workers: usize,
    pub clock: Arc<Clock>,
    pub holidays: Vec<NaiveDate>,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            sync: false,
            workers: 4,
            bus_workers: 8,
            clock: Arc::new(Clock::wall()),
            holidays: Vec::new(),
        }
    }
}

/// Durable record of finished jobs.
pub struct JobLog {
    records: RwLock<Vec<JobRecord>>,
    journal: Option<Journal>,
}

impl JobLog {
    fn open(dir: Option<&Path>, sync: bool) -> Result<Self, JournalError> {
        match dir {
            Some(d) => {
                let (journal, records) = Journal::open::<JobRecord>(&d.join("jobs.jsonl"), sync)?;
                Ok(Self {
                    records: RwLock::new(records),
                    journal: Some(journal),
                })
            }
            None => Ok(Self {
                records: RwLock::new(Vec::new()),
                journal: None,
            }),
        }
    }

    pub fn append(&self, record: JobRecord) -> Result<(), JournalError> {
        let mut recs = self.records.write();
        if let Some(j) = &self.journal {
            j.append(&record)?;
        }
        recs.push(record);
        Ok(())
    }

    /// Newest first.
    pub fn recent(&self, limit: usize) -> Vec<JobRecord> {
        self.records.read().iter().rev().take(limit).cloned().collect()
    }

    pub fn all(&self) -> Vec<JobRecord> {
        self.records.read().clone()
    }

    fn last_runs(&self) -> BTreeMap<Subject, Timestamp> {
        let mut out: BTreeMap<Subject, Timestamp> = BTreeMap::new();
        for r in self.records.read().iter() {
            let e = out.entry(r.job.subject).or_insert(r.job.due);
            *e = (*e).max(r.job.due);
        }
        out
    }
}

/// Schedules from the model store; a subject's last run is its latest
/// finished job, or the latest version / forecast layer it produced.
struct StoreSchedules {
    models: Arc<ModelStore>,
    timeseries: Arc<TimeseriesStore>,
    jobs: Arc<JobLog>,
}

impl ScheduleSource for StoreSchedules {
    fn schedules(&self) -> Result<Vec<ScheduleEntry>, String> {
        let mut last = self.jobs.last_runs();
        let mut bump = |s: Subject, t: Timestamp| {
            let e = last.entry(s).or_insert(t);
            *e = (*e).max(t);
        };
        let versions = self.models.all_versions();
        for v in &versions {
            if let Some(d) = v.due {
                bump(Subject::Model(v.model), d);
            }
        }
        for l in self.timeseries.forecast_layers() {
            if let (Some(p), Some(d)) = (l.producer, l.due) {
                bump(Subject::Version(p), d);
            }
        }
        let mut out = Vec::new();
        for m in self.models.models() {
            if let Some(config) = m.train_schedule {
                let subject = Subject::Model(m.id);
                out.push(ScheduleEntry {
                    subject,
                    config,
                    last_run: last.get(&subject).copied(),
                });
            }
        }
        for v in versions {
            if let Some(config) = v.score_schedule {
                let subject = Subject::Version(v.id);
                out.push(ScheduleEntry {
                    subject,
                    config,
                    last_run: last.get(&subject).copied(),
                });
            }
        }
        Ok(out)
    }
}

struct LoggingExecutor {
    runner: Arc<Runner>,
    jobs: Arc<JobLog>,
}

impl JobExecutor for LoggingExecutor {
    fn execute(&self, task: &Task) -> JobResult {
        let record = self.runner.run(task);
        if let Err(e) = self.jobs.append(record.clone()) {
            log::error!("job log write failed: {e}");
        }
        record.result
    }
}

pub struct Platform {
    pub context: Arc<ContextStore>,
    pub timeseries: Arc<TimeseriesStore>,
    pub models: Arc<ModelStore>,
    pub jobs: Arc<JobLog>,
    pub bus: Bus,
    pub scheduler: Arc<Scheduler>,
    pub runner: Arc<Runner>,
    pub clock: Arc<Clock>,
    _lock: Option<File>,
}

/// Exclusive advisory lock on `dir/LOCK`, released when the file closes
/// (including when the process dies).
fn lock_dir(dir: &Path) -> Result<File, PlatformError> {
    let path = dir.join("LOCK");
    let io = |source| PlatformError::Io {
        path: path.clone(),
        source,
    };
    fs::create_dir_all(dir).map_err(io)?;
    let file = OpenOptions::new().create(true).truncate(false).write(true).open(&path).map_err(io)?;
    match file.try_lock() {
        Ok(()) => Ok(file),
        Err(TryLockError::WouldBlock) => Err(PlatformError::Locked(dir.to_path_buf())),
        Err(TryLockError::Error(e)) => Err(io(e)),
    }
}

fn respond<Req, Resp, F>(bus: &Bus, queue: &str, f: F)
where
    Req: DeserializeOwned,
    Resp: Serialize,
    F: Fn(Req) -> Result<Resp, ApiError> + Send + Sync + 'static,
{
    bus.register(queue, move |payload| {
        let req: Req = serde_json::from_value(payload).map_err(|e| ApiError::bad_request(e.to_string()).encode())?;
        let resp = f(req).map_err(|e| e.encode())?;
        serde_json::to_value(resp).map_err(|e| ApiError::internal(e.to_string()).encode())
    });
}

impl Platform {
    pub fn open(config: PlatformConfig) -> Result<Self, PlatformError> {
        let dir = config.data_dir.as_deref();
        let lock = dir.map(lock_dir).transpose()?;
        let context = Arc::new(match dir {
            Some(d) => ContextStore::open(d, config.sync)?,
            None => ContextStore::in_memory(),
        });
        let timeseries = Arc::new(match dir {
            Some(d) => TimeseriesStore::open(d, context.clone(), config.sync)?,
            None => TimeseriesStore::in_memory(context.clone()),
        });
        let models = Arc::new(match dir {
            Some(d) => ModelStore::open(d, context.clone(), config.sync)?,
            None => ModelStore::in_memory(context.clone()),
        });
        let jobs = Arc::new(JobLog::open(dir, config.sync)?);
        let bus = Bus::new(config.bus_workers);
        let clock = config.clock.clone();
        let runner = Arc::new(Runner::new(bus.clone(), clock.clone(), config.holidays.clone()));
        let scheduler = Arc::new(Scheduler::new(
            Arc::new(StoreSchedules {
                models: models.clone(),
                timeseries: timeseries.clone(),
                jobs: jobs.clone(),
            }),
            Arc::new(LoggingExecutor {
                runner: runner.clone(),
                jobs: jobs.clone(),
            }),
            clock.clone(),
            config.workers,
        ));
        let platform = Self {
            context,
            timeseries,
            models,
            jobs,
            bus,
            scheduler,
            runner,
            clock,
            _lock: lock,
        };
        platform.register_handlers();
        Ok(platform)
    }

    fn register_handlers(&self) {
        let bus = &self.bus;

        let (ctx, ts, models) = (self.context.clone(), self.timeseries.clone(), self.models.clone());
        respond(bus, queues::TS_QUERY, move |q: SeriesQuery| {
            let key = ctx.resolve(&q.context)?;
            let range = RangeQuery {
                key,
                from: q.from,
                to: q.to,
                kind: q.kind,
                producer: q.producer,
            };
            let points = if q.from >= q.to {
                Vec::new()
            } else {
                ts.query_filtered(&range, |l| l.producer.is_none_or(|p| models.is_eligible(p)))?
            };
            Ok(SeriesResponse {
                schema_version: SCHEMA_VERSION,
                entity: q.context.entity,
                signal: q.context.signal,
                kind: q.kind,
                points,
            })
        });

        let (ctx, ts, models, clock) = (
            self.context.clone(),
            self.timeseries.clone(),
            self.models.clone(),
            self.clock.clone(),
        );
        respond(bus, queues::TS_INGEST, move |req: IngestRequest| {
            let mut batches = Vec::with_capacity(req.series.len());
            for b in req.series {
                batches.push((ctx.resolve(&b.context)?, b.points));
            }
            let stored = batches.iter().map(|(_, p)| p.len()).sum();
            let layers = match req.forecast {
                Some(meta) => {
                    if models.version(meta.producer).is_none() {
                        return Err(ModelError::UnknownVersion(meta.producer).into());
                    }
                    ts.ingest_forecast(&batches, meta.producer, meta.due, meta.created_at.unwrap_or_else(|| clock.now()))?
                }
                None => {
                    for (key, points) in &batches {
                        ts.ingest(*key, points)?;
                    }
                    Vec::new()
                }
            };
            Ok(IngestResponse {
                schema_version: SCHEMA_VERSION,
                stored,
                layers,
            })
        });

        let (ctx, ts, models) = (self.context.clone(), self.timeseries.clone(), self.models.clone());
        respond(bus, queues::TS_COMPARE, move |q: CompareQuery| {
            let key = ctx.resolve(&q.context)?;
            let sigma = ctx.resolve(&q.context.sigma()).ok();
            let rows = if q.from >= q.to {
                Vec::new()
            } else {
                ts.forecast_vs_observed(key, sigma, q.from, q.to, q.producer, |l| {
                    l.producer.is_none_or(|p| models.is_eligible(p))
                })?
            };
            let (rmse, mae, n) = accuracy(&rows);
            Ok(CompareResponse {
                schema_version: SCHEMA_VERSION,
                entity: q.context.entity,
                signal: q.context.signal,
                rows,
                rmse,
                mae,
                n,
            })
        });

        let models = self.models.clone();
        respond(bus, queues::MODEL_GET, move |q: ModelGet| {
            let version = match q.version {
                Some(v) => Some(models.version(v).ok_or(ModelError::UnknownVersion(v))?),
                None => None,
            };
            let id = match (&version, q.model) {
                (Some(v), Some(m)) if v.model != m => {
                    return Err(ModelError::VersionMismatch { model: m, version: v.id }.into())
                }
                (Some(v), _) => v.model,
                (None, Some(m)) => m,
                (None, None) => return Err(ApiError::bad_request("either model or version is required")),
            };
            let model = models.model(id).ok_or(ModelError::UnknownModel(id))?;
            Ok(ModelResponse {
                schema_version: SCHEMA_VERSION,
                model,
                version,
            })
        });

        let models = self.models.clone();
        respond(bus, queues::MODEL_PUT, move |input: ModelInput| {
            let model = models.store_model(input)?;
            Ok(ModelResponse {
                schema_version: SCHEMA_VERSION,
                model,
                version: None,
            })
        });

        let (ctx, models) = (self.context.clone(), self.models.clone());
        respond(bus, queues::MODEL_LIST, move |q: ModelListQuery| {
            let entity = match &q.entity {
                Some(name) => Some(ctx.entity_by_name(name, None)?.id),
                None => None,
            };
            let signal = match &q.signal {
                Some(name) => Some(ctx.signal_by_name(name, None)?.id),
                None => None,
            };
            Ok(ModelListResponse {
                schema_version: SCHEMA_VERSION,
                models: models.list_models_for_context(entity, signal, q.include_related),
            })
        });

        let models = self.models.clone();
        respond(bus, queues::MODEL_HIERARCHY, move |q: ModelListQuery| {
            let mut tree = models.model_hierarchy(None);
            tree.retain(|n| {
                q.entity.as_ref().is_none_or(|e| *e == n.model.target.entity)
                    && q.signal.as_ref().is_none_or(|s| *s == n.model.target.signal)
            });
            Ok(HierarchyResponse {
                schema_version: SCHEMA_VERSION,
                models: tree,
            })
        });

        let models = self.models.clone();
        respond(bus, queues::MODEL_VERSIONS, move |q: VersionsQuery| {
            Ok(VersionsResponse {
                schema_version: SCHEMA_VERSION,
                model: q.model,
                versions: models.version_summaries(q.model)?,
            })
        });

        let models = self.models.clone();
        respond(bus, queues::MODEL_PUT_VERSION, move |req: PutVersion| {
            let v = models.store_version(
                req.model,
                NewVersion {
                    params: req.params,
                    trained_at: req.trained_at,
                    due: req.due,
                    score_schedule: req.score_schedule,
                    metrics: req.metrics,
                    supersede: req.supersede,
                },
            )?;
            let summary = models
                .version_summaries(req.model)?
                .into_iter()
                .find(|s| s.id == v.id)
                .ok_or(ModelError::UnknownVersion(v.id))?;
            Ok(VersionResponse {
                schema_version: SCHEMA_VERSION,
                version: summary,
            })
        });

        let models = self.models.clone();
        respond(bus, queues::MODEL_ACTIVATE, move |req: ActivateRequest| {
            models.set_active_version(req.model, req.version)?;
            Ok(ActivateResponse {
                schema_version: SCHEMA_VERSION,
                model: models.summary(req.model).ok_or(ModelError::UnknownModel(req.model))?,
            })
        });

        let ctx = self.context.clone();
        respond(bus, queues::CONTEXT_GRAPH, move |q: GraphQuery| {
            Ok(GraphResponse {
                schema_version: SCHEMA_VERSION,
                graph: ctx.export_context_graph(q.include_models),
            })
        });

        let ctx = self.context.clone();
        respond(bus, queues::CONTEXT_ENTITY, move |e: EntityInput| {
            ctx.upsert_entity_type(&e.entity_type)?;
            let entity = ctx.upsert_entity(&e.name, &e.entity_type, e.geo)?;
            if let Some(parent) = &e.parent {
                let p = ctx.entity_by_name(parent, None)?;
                ctx.add_relation(RelationKind::ParentOf, p.id, entity.id)?;
            }
            for other in &e.connected_to {
                let o = ctx.entity_by_name(other, None)?;
                ctx.add_relation(RelationKind::ConnectedTo, entity.id, o.id)?;
            }
            Ok(EntityResponse {
                schema_version: SCHEMA_VERSION,
                entity,
            })
        });

        let ctx = self.context.clone();
        respond(bus, queues::CONTEXT_SIGNAL, move |s: SignalInput| {
            ctx.upsert_signal_type(&s.signal_type)?;
            Ok(SignalResponse {
                schema_version: SCHEMA_VERSION,
                signal: ctx.upsert_signal(&s.name, &s.signal_type, &s.unit)?,
            })
        });

        let sched: Weak<Scheduler> = Arc::downgrade(&self.scheduler);
        let clock = self.clock.clone();
        respond(bus, queues::SCHED_QUEUES, move |_: serde_json::Value| {
            let s = sched.upgrade().ok_or_else(|| ApiError::internal("scheduler stopped"))?;
            Ok(QueuesResponse {
                schema_version: SCHEMA_VERSION,
                clock: clock.mode(),
                now: clock.now(),
                workers: s.workers(),
                in_flight: s.in_flight(),
                queues: s.queues(),
            })
        });

        let sched: Weak<Scheduler> = Arc::downgrade(&self.scheduler);
        let models = self.models.clone();
        respond(bus, queues::SCHED_RUN_NOW, move |r: RunNowRequest| {
            let s = sched.upgrade().ok_or_else(|| ApiError::internal("scheduler stopped"))?;
            let subject = match (r.model, r.version) {
                (Some(m), None) => {
                    models.model(m).ok_or(ModelError::UnknownModel(m))?;
                    Subject::Model(m)
                }
                (None, Some(v)) => {
                    models.version(v).ok_or(ModelError::UnknownVersion(v))?;
                    Subject::Version(v)
                }
                _ => return Err(ApiError::bad_request("exactly one of model or version is required")),
            };
            Ok(RunNowResponse {
                schema_version: SCHEMA_VERSION,
                task: s.run_now(subject),
            })
        });

        let jobs = self.jobs.clone();
        respond(bus, queues::JOBS_RECENT, move |q: JobsQuery| {
            Ok(JobsResponse {
                schema_version: SCHEMA_VERSION,
                jobs: jobs.recent(q.limit.unwrap_or(50)),
            })
        });
    }

    /// Observed points of a context, straight from the store.
    pub fn observed(&self, entity: &str, signal: &str, from: Timestamp, to: Timestamp) -> Result<usize, PlatformError> {
        let key = self.context.resolve_context(entity, signal)?;
        Ok(self
            .timeseries
            .query(&RangeQuery {
                key,
                from,
                to,
                kind: LayerKind::Observed,
                producer: Producer::Latest,
            })?
            .len())
    }

    /// Runs the scheduler loop on a background thread.
    pub fn spawn_scheduler(&self, poll_every: Duration, update_every: Duration) -> SchedulerHandle {
        let stop = Arc::new(AtomicBool::new(false));
        let sched = self.scheduler.clone();
        let flag = stop.clone();
        let join = thread::Builder::new()
            .name("scheduler".into())
            .spawn(move || sched.run_forever(poll_every, update_every, &flag))
            .expect("spawn scheduler");
        SchedulerHandle {
            stop,
            join: Some(join),
        }
    }
}

pub struct SchedulerHandle {
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl SchedulerHandle {
    /// Stops dispatching and waits for running jobs to finish.
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

impl Drop for SchedulerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}
