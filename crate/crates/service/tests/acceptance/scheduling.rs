use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use castorette_core::pipeline::DeploymentConfig;
use castorette_core::scheduler::{Clock, JobExecutor, JobResult, ScheduleEntry, Scheduler, StaticSchedules, Subject, Task};
use castorette_core::time::{parse_timestamp, IsoDuration, Timestamp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Outcome};

const MIN: i64 = 60;
const HOUR: i64 = 3600;
const DAY: i64 = 86_400;

fn at(s: &str) -> Timestamp {
    parse_timestamp(s).unwrap()
}

fn entry(subject: Subject, time: Timestamp, repeat: i64, until: Option<Timestamp>, last_run: Option<Timestamp>) -> ScheduleEntry {
    ScheduleEntry {
        subject,
        config: DeploymentConfig {
            task: subject.task(),
            time,
            repeat: IsoDuration(repeat),
            until,
        },
        last_run,
    }
}

fn instant_jobs() -> Arc<dyn JobExecutor> {
    Arc::new(|_: &Task| JobResult::ok(0, 0.0))
}

/// `tasks` are consecutive hourly occurrences of `subject` starting at
/// `first`.
fn hourly_from(tasks: &[Task], subject: Subject, first: Timestamp) -> bool {
    !tasks.is_empty()
        && tasks
            .iter()
            .enumerate()
            .all(|(i, t)| *t == Task::new(subject, first + i as i64 * HOUR))
}

pub fn replay() -> Outcome {
    let m1 = Subject::Model(1);
    let mv1_1 = Subject::Version(101);
    let mv1_2 = Subject::Version(102);
    let nine = at("2018-07-12T09:00:00Z");
    let ten = at("2018-07-12T10:00:00Z");
    let source = StaticSchedules::new(vec![
        entry(m1, nine, HOUR, None, None),
        entry(mv1_1, ten, 0, None, None),
        entry(mv1_2, nine, 0, None, None),
    ]);
    let clock = Arc::new(Clock::virtual_at(at("2018-07-12T09:05:00Z")));
    let s = Scheduler::new(Arc::new(source), instant_jobs(), clock.clone(), 4);

    let q = s.init()?;
    ensure!(q.train_now == [Task::new(m1, nine)], "init train_now {:?}", q.train_now);
    ensure!(q.score_now == [Task::new(mv1_2, nine)], "init score_now {:?}", q.score_now);
    ensure!(hourly_from(&q.train_later, m1, ten), "init train_later {:?}", q.train_later);
    ensure!(q.score_later == [Task::new(mv1_1, ten)], "init score_later {:?}", q.score_later);

    clock.set(at("2018-07-12T09:10:00Z"));
    let dispatched = s.poll();
    ensure!(
        dispatched == [Task::new(m1, nine), Task::new(mv1_2, nine)],
        "poll dispatched {dispatched:?}"
    );
    ensure!(s.wait_idle(Duration::from_millis(500)), "jobs did not finish");
    let q = s.queues();
    ensure!(q.train_now.is_empty() && q.score_now.is_empty(), "now queues after poll {q:?}");

    clock.set(at("2018-07-12T10:10:00Z"));
    let moved = s.update()?;
    ensure!(moved == 2, "update moved {moved}");
    let q = s.queues();
    ensure!(q.train_now == [Task::new(m1, ten)], "train_now after update {:?}", q.train_now);
    ensure!(q.score_now == [Task::new(mv1_1, ten)], "score_now after update {:?}", q.score_now);
    ensure!(q.score_later.is_empty(), "score_later after update {:?}", q.score_later);
    ensure!(
        hourly_from(&q.train_later, m1, ten + HOUR),
        "train_later after update {:?}",
        q.train_later
    );
    Ok("poll dispatched M1 and MV1.2, update moved 2".into())
}

/// Completions of `workers` workers running jobs of `job` for `span`.
fn completions(job: Duration, workers: usize, span: Duration) -> u64 {
    let exec = move |_: &Task| {
        thread::sleep(job);
        JobResult::ok(0, job.as_secs_f64())
    };
    let s = Arc::new(Scheduler::new(
        Arc::new(StaticSchedules::default()),
        Arc::new(exec),
        Arc::new(Clock::wall()),
        workers,
    ));
    // More distinct subjects than the pool can finish in the span.
    for i in 0..4000 {
        s.run_now(Subject::Version(i));
    }
    let stop = Arc::new(AtomicBool::new(false));
    let (s2, stop2) = (s.clone(), stop.clone());
    let started = Instant::now();
    let h = thread::spawn(move || s2.run_forever(Duration::from_millis(1), Duration::from_secs(3600), &stop2));
    thread::sleep(span.saturating_sub(started.elapsed()));
    let done = s.completed();
    stop.store(true, Ordering::SeqCst);
    h.join().unwrap();
    done
}

pub fn throughput() -> Outcome {
    let span = Duration::from_millis(3600);
    let mut report = Vec::new();
    for (job_ms, workers) in [(180u64, 25usize), (60, 25), (180, 50), (60, 50)] {
        let expected = workers as f64 * span.as_secs_f64() / (job_ms as f64 / 1000.0);
        let got = completions(Duration::from_millis(job_ms), workers, span);
        let err = (got as f64 - expected) / expected;
        report.push(format!("{workers}x{job_ms}ms {got}/{expected:.0}"));
        ensure!(err.abs() <= 0.10, "{workers} workers, {job_ms} ms jobs: {got} completions, expected {expected:.0} ±10%");
    }
    Ok(report.join(", "))
}

/// Every occurrence of a schedule up to `horizon`, listed one by one.
fn listed(c: &DeploymentConfig, horizon: Timestamp) -> Vec<Timestamp> {
    let mut out = Vec::new();
    let mut t = c.time;
    while t <= horizon && c.until.is_none_or(|u| t <= u) {
        out.push(t);
        if c.repeat.seconds() == 0 {
            break;
        }
        t += c.repeat.seconds();
    }
    out
}

/// Expected dispatch for each action time: among occurrences that became
/// due since the previous action and are newer than the last recorded run,
/// only the most recent one runs.
fn oracle(e: &ScheduleEntry, actions: &[Timestamp]) -> Vec<(usize, Timestamp)> {
    let occ = listed(&e.config, *actions.last().unwrap());
    let mut out = Vec::new();
    for (i, &now) in actions.iter().enumerate() {
        let since = if i == 0 { Timestamp::MIN } else { actions[i - 1] };
        let due: Vec<Timestamp> = occ
            .iter()
            .copied()
            .filter(|&o| o > since && o <= now && e.last_run.is_none_or(|l| o > l))
            .collect();
        if let Some(&o) = due.last() {
            out.push((i, o));
        }
    }
    out
}

#[derive(Default)]
struct Coverage {
    one_shot: usize,
    repeating: usize,
    bounded: usize,
    catch_up: usize,
}

pub fn occurrences() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let base = at("2018-07-12T00:00:00Z");
    let mut cov = Coverage::default();
    for case in 0..1000 {
        let n = rng.random_range(1..=3u64);
        let entries: Vec<ScheduleEntry> = (1..=n)
            .map(|id| {
                let subject = if rng.random_bool(0.5) { Subject::Model(id) } else { Subject::Version(id) };
                let time = base + rng.random_range(0..3 * DAY / MIN) * MIN;
                let repeat = if rng.random_bool(0.3) { 0 } else { rng.random_range(1..DAY / MIN) * MIN };
                let until = rng.random_bool(0.4).then(|| time + rng.random_range(0..4 * DAY / MIN) * MIN);
                let last = rng.random_bool(0.3).then(|| base - rng.random_range(0..DAY / MIN) * MIN);
                entry(subject, time, repeat, until, last)
            })
            .collect();
        let mut actions = vec![base + rng.random_range(0..2 * DAY / MIN) * MIN];
        for _ in 0..rng.random_range(1..8) {
            let next = actions.last().unwrap() + rng.random_range(0..DAY / MIN) * MIN;
            actions.push(next);
        }

        let clock = Arc::new(Clock::virtual_at(actions[0]));
        let s = Scheduler::new(Arc::new(StaticSchedules::new(entries.clone())), instant_jobs(), clock.clone(), 16);
        let mut got: Vec<(usize, Task)> = Vec::new();
        for (i, &now) in actions.iter().enumerate() {
            clock.set(now);
            if i == 0 {
                s.init()?;
            } else {
                s.update()?;
            }
            got.extend(s.poll().into_iter().map(|t| (i, t)));
            ensure!(s.wait_idle(Duration::from_secs(5)), "case {case}: jobs did not finish");
        }
        for e in &entries {
            let mine: Vec<(usize, Timestamp)> = got.iter().filter(|(_, t)| t.subject == e.subject).map(|(i, t)| (*i, t.due)).collect();
            let want = oracle(e, &actions);
            ensure!(mine == want, "case {case}: {e:?} at {actions:?}: dispatched {mine:?}, expected {want:?}");

            let c = &e.config;
            if c.repeat.seconds() == 0 {
                cov.one_shot += 1;
            } else {
                cov.repeating += 1;
            }
            if c.until.is_some() {
                cov.bounded += 1;
            }
            let all = listed(c, *actions.last().unwrap());
            let skipped = actions.iter().enumerate().any(|(i, &now)| {
                let since = if i == 0 { Timestamp::MIN } else { actions[i - 1] };
                all.iter().filter(|&&o| o > since && o <= now).count() > 1
            });
            if skipped {
                cov.catch_up += 1;
            }
        }
    }
    ensure!(
        cov.one_shot > 0 && cov.repeating > 0 && cov.bounded > 0 && cov.catch_up > 0,
        "fixture misses a category"
    );
    Ok(format!(
        "1000 configs: {} one-shot, {} repeating, {} with until, {} with missed occurrences",
        cov.one_shot, cov.repeating, cov.bounded, cov.catch_up
    ))
}
