use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use castorette_core::synthetic::{self, FixtureConfig, ENTITY, TARGET, WEATHER};
use castorette_core::time::format_timestamp;
use serde_json::{json, Value};

use crate::common::{agent, get, json, send};
use crate::{ensure, Outcome};

const DAY: i64 = 86_400;
const PROBE: &str = "probe";

struct Service {
    child: Child,
    base: String,
}

impl Service {
    fn start(data: &Path, scheduler: bool) -> Result<Self, String> {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_castorette"));
        cmd.arg("--data-dir")
            .arg(data)
            .args(["serve", "--port", "0", "--workers", "2", "--poll", "50ms", "--update", "200ms"])
            .env("RUST_LOG", "info")
            .env_remove("CASTORETTE_WORKERS")
            .stdout(Stdio::null())
            .stderr(Stdio::piped());
        if !scheduler {
            cmd.arg("--no-scheduler");
        }
        let mut child = cmd.spawn().map_err(|e| e.to_string())?;
        let stderr = child.stderr.take().unwrap();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stderr).lines().map_while(Result::ok) {
                if let Some(i) = line.find("listening on http://") {
                    let _ = tx.send(line[i + "listening on ".len()..].trim().to_string());
                }
            }
        });
        match rx.recv_timeout(Duration::from_secs(20)) {
            Ok(base) => Ok(Self { child, base }),
            Err(_) => {
                let _ = child.kill();
                Err("service did not start listening".into())
            }
        }
    }

    fn get(&self, path: &str, query: &[(&str, &str)]) -> Value {
        let (status, body) = get(&agent(), &format!("{}{path}", self.base), query);
        assert_eq!(status, 200, "{path}: {}", String::from_utf8_lossy(&body));
        json(&body)
    }

    /// SIGKILL, no chance to flush or clean up.
    fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Everything a client can read back about the committed state.
fn snapshot(s: &Service, model: u64, from: &str, to: &str) -> Value {
    let mut series = serde_json::Map::new();
    for signal in [TARGET, WEATHER[0], WEATHER[1], WEATHER[2]] {
        series.insert(
            signal.into(),
            s.get("/timeseries", &[("entity", ENTITY), ("signal", signal), ("from", from), ("to", to)]),
        );
    }
    json!({
        "graph": s.get("/context/graph", &[("include_models", "true")]),
        "models": s.get("/models", &[]),
        "model": s.get(&format!("/models/{model}"), &[]),
        "versions": s.get(&format!("/models/{model}/versions"), &[]),
        "series": series,
        "forecast": s.get("/timeseries", &[("entity", ENTITY), ("signal", TARGET), ("from", from), ("to", to), ("kind", "forecast")]),
        "compare": s.get("/timeseries/compare", &[("entity", ENTITY), ("signal", TARGET), ("from", from), ("to", to)]),
        "jobs": s.get("/jobs/recent", &[("limit", "1000")]),
    })
}

fn probe_csv(batch: usize, start: i64) -> String {
    let mut out = String::from("ts,entity,signal,value\n");
    for k in 0..24 {
        let ts = start + (batch * 24 + k) as i64 * 3600;
        out.push_str(&format!("{},{ENTITY},{PROBE},{}\n", format_timestamp(ts), batch * 100 + k));
    }
    out
}

pub fn kill_and_restart() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    let cfg = FixtureConfig {
        days: 21,
        ..FixtureConfig::default()
    };
    let train_at = cfg.start + 14 * DAY;
    let (from, to) = (format_timestamp(cfg.start), format_timestamp(cfg.start + 30 * DAY));

    let s = Service::start(&data, true)?;
    let (status, body) = send(&agent(), "POST", &format!("{}/timeseries/csv", s.base), synthetic::to_csv(&synthetic::generate(&cfg)).as_bytes());
    ensure!(status == 200, "csv upload {status}");
    ensure!(json(&body)["stored"] == cfg.days * 24 * 4, "csv report {}", json(&body));
    let model = json!({
        "name": "durable",
        "target": {"entity": ENTITY, "signal": TARGET},
        "pipeline": {
            "load": {"train_window": "P7D", "covariates": [{"entity": ENTITY, "signal": WEATHER[0]}]},
            "train": {"mean_terms": [{"features": ["TimeOfDay"]}, {"features": ["Temperature"]}], "variance_terms": [{"features": ["TimeOfDay"]}]},
            "score": {"schedule": {"offset": "PT0S", "repeat": "P1D", "until": format_timestamp(train_at)}}
        },
        "train_schedule": {"task": "train", "time": format_timestamp(train_at)}
    });
    let (status, body) = send(&agent(), "PUT", &format!("{}/models", s.base), model.to_string().as_bytes());
    ensure!(status == 200, "model put {status}: {}", String::from_utf8_lossy(&body));
    let id = json(&body)["model"]["id"].as_u64().unwrap();

    // The wall-clock scheduler trains the version, then scores it once.
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let jobs = s.get("/jobs/recent", &[]);
        let n = jobs["jobs"].as_array().map_or(0, Vec::len);
        if n >= 2 {
            ensure!(jobs["jobs"].as_array().unwrap().iter().all(|j| j["status"] == "OK"), "job failed: {jobs}");
            break;
        }
        ensure!(Instant::now() < deadline, "scheduler ran {n} of 2 jobs");
        thread::sleep(Duration::from_millis(100));
    }
    let before = snapshot(&s, id, &from, &to);
    ensure!(before["versions"]["versions"].as_array().map_or(0, Vec::len) == 1, "no version trained");
    ensure!(before["forecast"]["points"].as_array().map_or(0, Vec::len) == 24, "forecast {}", before["forecast"]);

    // Kill while a client is still writing; every acknowledged batch counts
    // as committed.
    let acked = Arc::new(Mutex::new(Vec::new()));
    let sent = Arc::new(AtomicUsize::new(0));
    let writer = {
        let (acked, sent, base) = (acked.clone(), sent.clone(), s.base.clone());
        let start = cfg.start;
        thread::spawn(move || {
            let a = agent();
            for batch in 0.. {
                sent.store(batch + 1, Ordering::SeqCst);
                let url = format!("{base}/timeseries/csv");
                let ok = a
                    .post(&url)
                    .send(probe_csv(batch, start).as_bytes())
                    .ok()
                    .filter(|r| r.status() == 200)
                    .and_then(|mut r| r.body_mut().read_to_vec().ok())
                    .is_some_and(|b| json(&b)["stored"] == 24);
                if !ok {
                    break;
                }
                acked.lock().unwrap().push(batch);
            }
        })
    };
    while acked.lock().unwrap().len() < 25 {
        thread::sleep(Duration::from_millis(2));
    }
    s.kill();
    writer.join().map_err(|_| "writer panicked")?;
    let acked = acked.lock().unwrap().clone();

    let s = Service::start(&data, false)?;
    let after = snapshot(&s, id, &from, &to);
    for key in ["models", "model", "versions", "series", "forecast", "compare", "jobs"] {
        ensure!(before[key] == after[key], "`{key}` changed across the restart");
    }
    let probe_to = format_timestamp(cfg.start + (sent.load(Ordering::SeqCst) * 24) as i64 * 3600);
    let probe = s.get("/timeseries", &[("entity", ENTITY), ("signal", PROBE), ("from", &from), ("to", &probe_to)]);
    let points = probe["points"].as_array().cloned().unwrap_or_default();
    let got: std::collections::BTreeMap<String, f64> = points
        .iter()
        .map(|p| (p["ts"].as_str().unwrap().to_string(), p["value"].as_f64().unwrap()))
        .collect();
    for &batch in &acked {
        for k in 0..24 {
            let ts = format_timestamp(cfg.start + (batch * 24 + k) as i64 * 3600);
            ensure!(got.get(&ts) == Some(&((batch * 100 + k) as f64)), "acknowledged point {ts} of batch {batch} lost");
        }
    }
    // A batch in flight at the kill is either fully stored or absent.
    let extra = got.len() - acked.len() * 24;
    ensure!(extra % 24 == 0, "torn batch: {extra} unacknowledged points survived");
    Ok(format!(
        "{} acknowledged batches, 1 model, 1 version, {} forecast points intact",
        acked.len(),
        after["forecast"]["points"].as_array().map_or(0, Vec::len)
    ))
}
