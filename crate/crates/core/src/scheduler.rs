//! Model scheduler: Init/Poll/Update actions over the four task queues
//! (train/score × now/later) and a bounded pool of job workers.
//!
//! Catch-up: every subject has at most one pending `now` task. Occurrences
//! that became due since the previous action collapse into one task at the
//! latest of them.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicI64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam::channel::{self, Sender};
use log::{error, info};
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::models::ModelId;
use crate::pipeline::{DeploymentConfig, TaskKind};
use crate::time::{self, Timestamp};
use crate::timeseries::VersionId;

/// Future occurrences kept in a `later` queue per subject.
pub const LATER_HORIZON: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Wall,
    Virtual,
}

/// Wall clock, or a virtual clock that only moves forward when told to.
#[derive(Debug)]
pub struct Clock {
    mode: ClockMode,
    now: AtomicI64,
}

impl Clock {
    pub fn wall() -> Self {
        Self {
            mode: ClockMode::Wall,
            now: AtomicI64::new(0),
        }
    }

    pub fn virtual_at(start: Timestamp) -> Self {
        Self {
            mode: ClockMode::Virtual,
            now: AtomicI64::new(start),
        }
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    pub fn now(&self) -> Timestamp {
        match self.mode {
            ClockMode::Wall => time::now(),
            ClockMode::Virtual => self.now.load(Ordering::SeqCst),
        }
    }

    /// Moves a virtual clock to `t`. Earlier times are ignored; returns the
    /// resulting time.
    pub fn set(&self, t: Timestamp) -> Timestamp {
        assert_eq!(self.mode, ClockMode::Virtual, "only a virtual clock can be set");
        self.now.fetch_max(t, Ordering::SeqCst).max(t)
    }

    pub fn advance(&self, secs: i64) -> Timestamp {
        assert!(secs >= 0, "clocks do not run backwards");
        assert_eq!(self.mode, ClockMode::Virtual, "only a virtual clock can be advanced");
        self.now.fetch_add(secs, Ordering::SeqCst) + secs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subject {
    Model(ModelId),
    Version(VersionId),
}

impl Subject {
    pub fn task(self) -> TaskKind {
        match self {
            Subject::Model(_) => TaskKind::Train,
            Subject::Version(_) => TaskKind::Score,
        }
    }
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Model(id) => write!(f, "model {id}"),
            Subject::Version(id) => write!(f, "version {id}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Task {
    pub subject: Subject,
    pub task: TaskKind,
    #[serde(with = "time::rfc3339")]
    pub due: Timestamp,
}

impl Task {
    pub fn new(subject: Subject, due: Timestamp) -> Self {
        Self {
            subject,
            task: subject.task(),
            due,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QueueState {
    pub train_now: Vec<Task>,
    pub train_later: Vec<Task>,
    pub score_now: Vec<Task>,
    pub score_later: Vec<Task>,
}

impl QueueState {
    fn now_mut(&mut self, kind: TaskKind) -> &mut Vec<Task> {
        match kind {
            TaskKind::Train => &mut self.train_now,
            TaskKind::Score => &mut self.score_now,
        }
    }

    fn later_mut(&mut self, kind: TaskKind) -> &mut Vec<Task> {
        match kind {
            TaskKind::Train => &mut self.train_later,
            TaskKind::Score => &mut self.score_later,
        }
    }

    pub fn len(&self) -> usize {
        self.train_now.len() + self.train_later.len() + self.score_now.len() + self.score_later.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A schedule known to the stores, with the due time of the subject's most
/// recent finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub subject: Subject,
    pub config: DeploymentConfig,
    #[serde(default, with = "time::rfc3339::option")]
    pub last_run: Option<Timestamp>,
}

pub trait ScheduleSource: Send + Sync {
    fn schedules(&self) -> Result<Vec<ScheduleEntry>, String>;
}

/// Fixed set of schedules.
#[derive(Debug, Clone, Default)]
pub struct StaticSchedules(pub Arc<Mutex<Vec<ScheduleEntry>>>);

impl StaticSchedules {
    pub fn new(entries: Vec<ScheduleEntry>) -> Self {
        Self(Arc::new(Mutex::new(entries)))
    }
}

impl ScheduleSource for StaticSchedules {
    fn schedules(&self) -> Result<Vec<ScheduleEntry>, String> {
        Ok(self.0.lock().clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub status: JobStatus,
    /// New model version (train) or forecast layer (score).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub produced: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_log: Option<String>,
    /// Seconds.
    pub duration: f64,
}

impl JobResult {
    pub fn ok(produced: u64, duration: f64) -> Self {
        Self {
            status: JobStatus::Ok,
            produced: Some(produced),
            error_log: None,
            duration,
        }
    }

    pub fn failed(error: impl Into<String>, duration: f64) -> Self {
        Self {
            status: JobStatus::Failed,
            produced: None,
            error_log: Some(error.into()),
            duration,
        }
    }
}

pub trait JobExecutor: Send + Sync {
    fn execute(&self, task: &Task) -> JobResult;
}

impl<F: Fn(&Task) -> JobResult + Send + Sync> JobExecutor for F {
    fn execute(&self, task: &Task) -> JobResult {
        self(task)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Init {
        #[serde(with = "time::rfc3339")]
        at: Timestamp,
        queues: QueueState,
    },
    Poll {
        #[serde(with = "time::rfc3339")]
        at: Timestamp,
        dispatched: Vec<Task>,
    },
    Update {
        #[serde(with = "time::rfc3339")]
        at: Timestamp,
        moved: usize,
    },
    Completed {
        task: Task,
        status: JobStatus,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Cursor {
    config: DeploymentConfig,
    next: u64,
}

#[derive(Default)]
struct State {
    queues: QueueState,
    cursors: BTreeMap<Subject, Cursor>,
    /// Latest due time ever placed in a `now` queue, per subject.
    high: BTreeMap<Subject, Timestamp>,
    dispatched: HashSet<Task>,
    in_flight: usize,
    completed: u64,
    trace: Vec<TraceEvent>,
    initialized: bool,
}

impl State {
    fn push_now(&mut self, task: Task) -> bool {
        if self.dispatched.contains(&task) || self.high.get(&task.subject).is_some_and(|h| *h >= task.due) {
            return false;
        }
        self.high.insert(task.subject, task.due);
        let queue = self.queues.now_mut(task.task);
        queue.retain(|t| t.subject != task.subject);
        let at = queue.partition_point(|t| (t.due, t.subject) <= (task.due, task.subject));
        queue.insert(at, task);
        true
    }

    fn push_later(&mut self, task: Task) {
        let queue = self.queues.later_mut(task.task);
        let at = queue.partition_point(|t| (t.due, t.subject) <= (task.due, task.subject));
        queue.insert(at, task);
    }

    fn drop_subject(&mut self, subject: Subject, pending_too: bool) {
        let kind = subject.task();
        self.queues.later_mut(kind).retain(|t| t.subject != subject);
        if pending_too {
            self.queues.now_mut(kind).retain(|t| t.subject != subject);
        }
    }

    fn replenish(&mut self) {
        let subjects: Vec<Subject> = self.cursors.keys().copied().collect();
        for s in subjects {
            let pending = self.queues.later_mut(s.task()).iter().filter(|t| t.subject == s).count();
            for _ in pending..LATER_HORIZON {
                let cursor = self.cursors.get_mut(&s).expect("cursor");
                let Some(due) = cursor.config.occurrence(cursor.next) else {
                    break;
                };
                cursor.next += 1;
                self.push_later(Task::new(s, due));
            }
        }
    }

    /// Reconciles queues with the current schedules at time `now`.
    fn refresh(&mut self, entries: Vec<ScheduleEntry>, now: Timestamp) {
        let mut seen = HashSet::new();
        for e in entries {
            if e.subject.task() != e.config.task || e.config.validate().is_err() {
                error!("ignoring invalid schedule of {}", e.subject);
                continue;
            }
            seen.insert(e.subject);
            if self.cursors.get(&e.subject).is_some_and(|c| c.config == e.config) {
                continue;
            }
            self.drop_subject(e.subject, false);
            if let Some(due) = e.config.last_at_or_before(now) {
                if e.last_run.is_none_or(|l| due > l) {
                    self.push_now(Task::new(e.subject, due));
                }
            }
            self.cursors.insert(
                e.subject,
                Cursor {
                    config: e.config,
                    next: e.config.first_index_after(now),
                },
            );
        }
        let gone: Vec<Subject> = self.cursors.keys().filter(|s| !seen.contains(s)).copied().collect();
        for s in gone {
            self.cursors.remove(&s);
            self.drop_subject(s, true);
        }
        self.replenish();
    }

    /// Moves every subject with an occurrence at or before `now` to its
    /// `now` queue, collapsed to the latest such occurrence.
    fn move_due(&mut self, now: Timestamp) -> usize {
        let mut due: BTreeSet<Subject> = BTreeSet::new();
        for kind in [TaskKind::Train, TaskKind::Score] {
            let later = self.queues.later_mut(kind);
            let split = later.partition_point(|t| t.due <= now);
            due.extend(later.drain(..split).map(|t| t.subject));
        }
        for (s, c) in &self.cursors {
            if c.config.occurrence(c.next).is_some_and(|t| t <= now) {
                due.insert(*s);
            }
        }
        let mut moved = 0;
        for s in due {
            let Some(cursor) = self.cursors.get_mut(&s) else {
                continue;
            };
            cursor.next = cursor.next.max(cursor.config.first_index_after(now));
            if let Some(latest) = cursor.config.last_at_or_before(now) {
                if self.push_now(Task::new(s, latest)) {
                    moved += 1;
                }
            }
        }
        self.replenish();
        moved
    }
}

struct Shared {
    state: Mutex<State>,
    changed: Condvar,
    executor: Arc<dyn JobExecutor>,
}

pub struct Scheduler {
    shared: Arc<Shared>,
    source: Arc<dyn ScheduleSource>,
    clock: Arc<Clock>,
    workers: usize,
    tx: Option<Sender<Task>>,
    handles: Vec<JoinHandle<()>>,
}

fn work(shared: Arc<Shared>, rx: channel::Receiver<Task>) {
    for task in rx.iter() {
        let result = shared.executor.execute(&task);
        let mut st = shared.state.lock();
        st.in_flight -= 1;
        st.completed += 1;
        st.trace.push(TraceEvent::Completed {
            task,
            status: result.status,
        });
        drop(st);
        shared.changed.notify_all();
    }
}

impl Scheduler {
    pub fn new(
        source: Arc<dyn ScheduleSource>,
        executor: Arc<dyn JobExecutor>,
        clock: Arc<Clock>,
        workers: usize,
    ) -> Self {
        let shared = Arc::new(Shared {
            state: Mutex::new(State::default()),
            changed: Condvar::new(),
            executor,
        });
        let (tx, rx) = channel::unbounded::<Task>();
        let handles = (0..workers)
            .map(|i| {
                let shared = shared.clone();
                let rx = rx.clone();
                thread::Builder::new()
                    .name(format!("job-{i}"))
                    .spawn(move || work(shared, rx))
                    .expect("spawn job worker")
            })
            .collect();
        Self {
            shared,
            source,
            clock,
            workers,
            tx: Some(tx),
            handles,
        }
    }

    pub fn clock(&self) -> &Arc<Clock> {
        &self.clock
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Rebuilds the queues from the stored schedules. Pending `now` tasks,
    /// including manual runs, are kept.
    pub fn init(&self) -> Result<QueueState, String> {
        let entries = self.source.schedules()?;
        let now = self.clock.now();
        let mut st = self.shared.state.lock();
        st.queues.train_later.clear();
        st.queues.score_later.clear();
        st.cursors.clear();
        st.refresh(entries, now);
        st.initialized = true;
        let queues = st.queues.clone();
        st.trace.push(TraceEvent::Init {
            at: now,
            queues: queues.clone(),
        });
        Ok(queues)
    }

    /// Picks up schedule changes and moves due `later` tasks to `now`;
    /// returns the number of tasks moved.
    pub fn update(&self) -> Result<usize, String> {
        let entries = self.source.schedules()?;
        let now = self.clock.now();
        let mut st = self.shared.state.lock();
        if !st.initialized {
            drop(st);
            self.init()?;
            st = self.shared.state.lock();
        }
        st.refresh(entries, now);
        let moved = st.move_due(now);
        st.trace.push(TraceEvent::Update { at: now, moved });
        Ok(moved)
    }

    /// Hands `now` tasks to free workers, training before scoring.
    pub fn poll(&self) -> Vec<Task> {
        let now = self.clock.now();
        let mut st = self.shared.state.lock();
        let mut free = self.workers.saturating_sub(st.in_flight);
        let mut out = Vec::new();
        for kind in [TaskKind::Train, TaskKind::Score] {
            let queue = st.queues.now_mut(kind);
            let mut i = 0;
            while free > 0 && i < queue.len() {
                if queue[i].due <= now {
                    out.push(queue.remove(i));
                    free -= 1;
                } else {
                    i += 1;
                }
            }
        }
        if out.is_empty() {
            return out;
        }
        st.in_flight += out.len();
        for t in &out {
            st.dispatched.insert(*t);
        }
        st.trace.push(TraceEvent::Poll {
            at: now,
            dispatched: out.clone(),
        });
        drop(st);
        let tx = self.tx.as_ref().expect("scheduler running");
        for t in &out {
            tx.send(*t).expect("job workers alive");
        }
        out
    }

    /// Queues an immediate run of `subject`, due now.
    pub fn run_now(&self, subject: Subject) -> Task {
        let task = Task::new(subject, self.clock.now());
        self.shared.state.lock().push_now(task);
        task
    }

    pub fn queues(&self) -> QueueState {
        self.shared.state.lock().queues.clone()
    }

    pub fn in_flight(&self) -> usize {
        self.shared.state.lock().in_flight
    }

    pub fn completed(&self) -> u64 {
        self.shared.state.lock().completed
    }

    pub fn trace(&self) -> Vec<TraceEvent> {
        self.shared.state.lock().trace.clone()
    }

    pub fn clear_trace(&self) {
        self.shared.state.lock().trace.clear();
    }

    /// Blocks until no job is running or `timeout` passes; returns whether
    /// the pool is idle.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.shared.state.lock();
        while st.in_flight > 0 {
            if self.shared.changed.wait_until(&mut st, deadline).timed_out() {
                return st.in_flight == 0;
            }
        }
        true
    }

    /// Runs Update and Poll at their intervals until `stop` is set, polling
    /// again as soon as a job finishes. Running jobs are drained before
    /// returning.
    pub fn run_forever(&self, poll_every: Duration, update_every: Duration, stop: &AtomicBool) {
        if let Err(e) = self.init() {
            error!("scheduler init failed: {e}");
        }
        let start = Instant::now();
        let mut next_poll = start;
        let mut next_update = start + update_every;
        let mut seen = self.completed();
        while !stop.load(Ordering::SeqCst) {
            let now = Instant::now();
            if now >= next_update {
                if let Err(e) = self.update() {
                    error!("scheduler update failed: {e}");
                }
                next_update = now + update_every;
            }
            if now >= next_poll {
                self.poll();
                next_poll = now + poll_every;
            }
            let wake = next_poll.min(next_update).min(now + Duration::from_millis(50));
            let mut st = self.shared.state.lock();
            if st.completed == seen {
                self.shared.changed.wait_until(&mut st, wake);
            }
            let finished = st.completed != seen;
            seen = st.completed;
            drop(st);
            if finished && !stop.load(Ordering::SeqCst) {
                self.poll();
            }
        }
        info!("scheduler stopping; waiting for {} running jobs", self.in_flight());
        while !self.wait_idle(Duration::from_secs(3600)) {}
    }
}

impl Drop for Scheduler {
    fn drop(&mut self) {
        self.tx.take();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}
