//! In-process message fabric: named request/reply queues served by a
//! bounded worker pool, and publish/subscribe topics.
//!
//! Handlers must not issue requests themselves; with every worker waiting
//! on a nested request the pool would stall.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam::channel::{self, Receiver, RecvTimeoutError, Sender, TrySendError};
use log::warn;
use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub mod queues {
    pub const TS_QUERY: &str = "ts.query";
    pub const TS_INGEST: &str = "ts.ingest";
    pub const TS_COMPARE: &str = "ts.compare";
    pub const MODEL_GET: &str = "model.get";
    pub const MODEL_PUT: &str = "model.put";
    pub const MODEL_LIST: &str = "model.list";
    pub const MODEL_HIERARCHY: &str = "model.hierarchy";
    pub const MODEL_VERSIONS: &str = "model.versions";
    pub const MODEL_PUT_VERSION: &str = "model.put_version";
    pub const MODEL_ACTIVATE: &str = "model.activate";
    pub const CONTEXT_GRAPH: &str = "context.graph";
    pub const CONTEXT_ENTITY: &str = "context.entity";
    pub const CONTEXT_SIGNAL: &str = "context.signal";
    pub const CONTEXT_RELATION: &str = "context.relation";
    pub const SCHED_QUEUES: &str = "scheduler.queues";
    pub const SCHED_RUN_NOW: &str = "scheduler.run_now";
    pub const JOBS_RECENT: &str = "jobs.recent";
    pub const JOB_COMPLETED: &str = "job.completed";
    pub const JOB_FAILED: &str = "job.failed";
}

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_SUBSCRIBER_BUFFER: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub queue: String,
    pub correlation_id: u64,
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply_to: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BusError {
    #[error("no handler registered for queue `{0}`")]
    NoHandler(String),
    #[error("request on `{queue}` timed out after {after:?}")]
    Timeout { queue: String, after: Duration },
    /// The handler rejected the request; the text is its error message.
    #[error("{0}")]
    Handler(String),
    #[error("payload: {0}")]
    Payload(String),
    #[error("bus is shut down")]
    Closed,
}

type Handler = Arc<dyn Fn(Value) -> Result<Value, String> + Send + Sync>;
type Reply = (u64, Result<Value, String>);

#[derive(Default)]
struct Registry {
    handlers: RwLock<HashMap<String, Handler>>,
    pending: Mutex<HashMap<u64, Sender<Reply>>>,
}

struct Subscriber {
    id: u64,
    tx: Sender<Envelope>,
    lagged: Arc<AtomicBool>,
}

struct Inner {
    registry: Arc<Registry>,
    work: Mutex<Option<Sender<Envelope>>>,
    workers: Mutex<Vec<JoinHandle<()>>>,
    topics: Mutex<HashMap<String, Vec<Subscriber>>>,
    next_id: AtomicU64,
}

impl Drop for Inner {
    fn drop(&mut self) {
        self.work.lock().take();
        for w in self.workers.lock().drain(..) {
            if w.thread().id() != thread::current().id() {
                let _ = w.join();
            }
        }
    }
}

#[derive(Clone)]
pub struct Bus {
    inner: Arc<Inner>,
}

/// Receiving end of a topic subscription. Dropping it unsubscribes.
pub struct Subscription {
    pub id: u64,
    rx: Receiver<Envelope>,
    lagged: Arc<AtomicBool>,
}

impl Subscription {
    pub fn recv(&self) -> Option<Envelope> {
        self.rx.recv().ok()
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<Envelope> {
        self.rx.recv_timeout(timeout).ok()
    }

    pub fn try_recv(&self) -> Option<Envelope> {
        self.rx.try_recv().ok()
    }

    /// Whether the bus dropped this subscriber for falling behind.
    pub fn lagged(&self) -> bool {
        self.lagged.load(Ordering::Relaxed)
    }
}

fn serve(registry: Arc<Registry>, rx: Receiver<Envelope>) {
    for env in rx.iter() {
        let handler = registry.handlers.read().get(&env.queue).cloned();
        let result = match handler {
            Some(h) => match catch_unwind(AssertUnwindSafe(|| h(env.payload))) {
                Ok(r) => r,
                Err(panic) => {
                    let msg = panic
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| panic.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "handler panicked".into());
                    Err(format!("handler for `{}` panicked: {msg}", env.queue))
                }
            },
            None => Err(format!("no handler registered for queue `{}`", env.queue)),
        };
        if let Some(tx) = registry.pending.lock().remove(&env.correlation_id) {
            let _ = tx.send((env.correlation_id, result));
        }
    }
}

impl Bus {
    /// Bus whose request handlers run on `workers` threads (at least one).
    pub fn new(workers: usize) -> Self {
        let registry = Arc::new(Registry::default());
        let (tx, rx) = channel::unbounded::<Envelope>();
        let handles = (0..workers.max(1))
            .map(|i| {
                let registry = registry.clone();
                let rx = rx.clone();
                thread::Builder::new()
                    .name(format!("bus-{i}"))
                    .spawn(move || serve(registry, rx))
                    .expect("spawn bus worker")
            })
            .collect();
        Self {
            inner: Arc::new(Inner {
                registry,
                work: Mutex::new(Some(tx)),
                workers: Mutex::new(handles),
                topics: Mutex::new(HashMap::new()),
                next_id: AtomicU64::new(1),
            }),
        }
    }

    fn fresh_id(&self) -> u64 {
        self.inner.next_id.fetch_add(1, Ordering::Relaxed)
    }

    /// Installs (or replaces) the handler serving `queue`.
    pub fn register<F>(&self, queue: &str, handler: F)
    where
        F: Fn(Value) -> Result<Value, String> + Send + Sync + 'static,
    {
        self.inner.registry.handlers.write().insert(queue.to_string(), Arc::new(handler));
    }

    /// Typed variant of [`register`](Self::register).
    pub fn register_typed<Req, Resp, F>(&self, queue: &str, handler: F)
    where
        Req: DeserializeOwned,
        Resp: Serialize,
        F: Fn(Req) -> Result<Resp, String> + Send + Sync + 'static,
    {
        self.register(queue, move |payload| {
            let req: Req = serde_json::from_value(payload).map_err(|e| format!("bad request: {e}"))?;
            let resp = handler(req)?;
            serde_json::to_value(resp).map_err(|e| e.to_string())
        });
    }

    pub fn has_handler(&self, queue: &str) -> bool {
        self.inner.registry.handlers.read().contains_key(queue)
    }

    pub fn request(&self, queue: &str, payload: Value, timeout: Duration) -> Result<Value, BusError> {
        if !self.has_handler(queue) {
            return Err(BusError::NoHandler(queue.to_string()));
        }
        let id = self.fresh_id();
        let (tx, rx) = channel::bounded::<Reply>(1);
        self.inner.registry.pending.lock().insert(id, tx);
        let env = Envelope {
            queue: queue.to_string(),
            correlation_id: id,
            payload,
            reply_to: Some(format!("reply.{id}")),
        };
        let sent = match &*self.inner.work.lock() {
            Some(work) => work.send(env).is_ok(),
            None => false,
        };
        if !sent {
            self.inner.registry.pending.lock().remove(&id);
            return Err(BusError::Closed);
        }
        match rx.recv_timeout(timeout) {
            Ok((cid, result)) => {
                debug_assert_eq!(cid, id);
                result.map_err(BusError::Handler)
            }
            Err(RecvTimeoutError::Timeout) => {
                self.inner.registry.pending.lock().remove(&id);
                Err(BusError::Timeout {
                    queue: queue.to_string(),
                    after: timeout,
                })
            }
            Err(RecvTimeoutError::Disconnected) => Err(BusError::Closed),
        }
    }

    /// Typed variant of [`request`](Self::request) with the default timeout.
    pub fn call<Req: Serialize, Resp: DeserializeOwned>(&self, queue: &str, req: &Req) -> Result<Resp, BusError> {
        let payload = serde_json::to_value(req).map_err(|e| BusError::Payload(e.to_string()))?;
        let reply = self.request(queue, payload, DEFAULT_TIMEOUT)?;
        serde_json::from_value(reply).map_err(|e| BusError::Payload(e.to_string()))
    }

    pub fn subscribe(&self, topic: &str) -> Subscription {
        self.subscribe_with_buffer(topic, DEFAULT_SUBSCRIBER_BUFFER)
    }

    /// Subscribes with a buffer of `capacity` messages. A subscriber whose
    /// buffer is full when a message arrives is dropped.
    pub fn subscribe_with_buffer(&self, topic: &str, capacity: usize) -> Subscription {
        let (tx, rx) = channel::bounded(capacity.max(1));
        let id = self.fresh_id();
        let lagged = Arc::new(AtomicBool::new(false));
        self.inner
            .topics
            .lock()
            .entry(topic.to_string())
            .or_default()
            .push(Subscriber {
                id,
                tx,
                lagged: lagged.clone(),
            });
        Subscription { id, rx, lagged }
    }

    pub fn subscriber_count(&self, topic: &str) -> usize {
        self.inner.topics.lock().get(topic).map_or(0, Vec::len)
    }

    /// Delivers `payload` to every current subscriber of `topic`; returns
    /// the number of deliveries. Never blocks.
    pub fn publish(&self, topic: &str, payload: Value) -> usize {
        let mut topics = self.inner.topics.lock();
        let Some(subs) = topics.get_mut(topic) else {
            return 0;
        };
        let env = Envelope {
            queue: topic.to_string(),
            correlation_id: self.fresh_id(),
            payload,
            reply_to: None,
        };
        let mut delivered = 0;
        subs.retain(|s| match s.tx.try_send(env.clone()) {
            Ok(()) => {
                delivered += 1;
                true
            }
            Err(TrySendError::Full(_)) => {
                warn!("subscriber {} of `{topic}` is lagging; dropping it", s.id);
                s.lagged.store(true, Ordering::Relaxed);
                false
            }
            Err(TrySendError::Disconnected(_)) => false,
        });
        delivered
    }
}

impl Default for Bus {
    fn default() -> Self {
        Self::new(4)
    }
}
