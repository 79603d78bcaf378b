use std::collections::HashMap;
use std::time::Duration;

use castorette_core::synthetic::{self, FixtureConfig, ENTITY, TARGET, WEATHER};
use castorette_core::time::{format_timestamp, parse_timestamp};
use serde_json::{json, Value};

use crate::common::{json, Server};
use crate::{ensure, Outcome};

const DAY: i64 = 86_400;

pub fn end_to_end() -> Outcome {
    let cfg = FixtureConfig::default();
    ensure!(cfg.days == 90, "fixture spans {} days", cfg.days);
    let rows = synthetic::generate(&cfg);
    let train_at = cfg.start + 60 * DAY;
    let last_score = cfg.start + 89 * DAY;
    let s = Server::start(train_at);

    let (status, body) = s.send("POST", "/timeseries/csv", synthetic::to_csv(&rows).as_bytes());
    ensure!(status == 200, "csv upload: {status} {}", String::from_utf8_lossy(&body));
    let report = json(&body);
    ensure!(report["stored"] == rows.len() && report["errors"] == json!([]), "csv report {report}");

    // No training block: the mean and variance terms are the defaults.
    let model = json!({
        "name": "energy-default",
        "target": {"entity": ENTITY, "signal": TARGET},
        "pipeline": {
            "load": {
                "train_window": "P56D",
                "covariates": WEATHER.iter().map(|w| json!({"entity": ENTITY, "signal": w})).collect::<Vec<_>>()
            },
            "score": {"schedule": {"offset": "PT0S", "repeat": "P1D", "until": format_timestamp(last_score)}}
        },
        "train_schedule": {"task": "train", "time": format_timestamp(train_at)}
    });
    let (status, body) = s.send("PUT", "/models", model.to_string().as_bytes());
    ensure!(status == 200, "model put: {status} {}", String::from_utf8_lossy(&body));
    let id = json(&body)["model"]["id"].as_u64().unwrap();

    let p = &s.platform;
    p.scheduler.init()?;
    for day in 60..=90 {
        p.clock.set(cfg.start + day * DAY);
        // Twice, so a score created by a train job runs the same day.
        for _ in 0..2 {
            p.scheduler.update()?;
            p.scheduler.poll();
            ensure!(p.scheduler.wait_idle(Duration::from_secs(120)), "jobs still running on day {day}");
        }
    }

    let (_, body) = s.get("/jobs/recent", &[("limit", "100")]);
    let jobs = json(&body)["jobs"].as_array().cloned().unwrap_or_default();
    let failed: Vec<&Value> = jobs.iter().filter(|j| j["status"] != "OK").collect();
    ensure!(failed.is_empty(), "failed jobs: {failed:?}");
    ensure!(jobs.len() == 31, "{} jobs, expected one train and 30 scores", jobs.len());

    let (_, body) = s.get(&format!("/models/{id}/versions"), &[]);
    let versions = json(&body)["versions"].as_array().cloned().unwrap_or_default();
    ensure!(versions.len() == 1, "{} versions", versions.len());
    let vid = versions[0]["id"].as_u64().unwrap();

    let from = format_timestamp(train_at);
    let to = format_timestamp(cfg.start + 90 * DAY);
    let (status, body) = s.get(
        "/timeseries/compare",
        &[("entity", ENTITY), ("signal", TARGET), ("from", &from), ("to", &to)],
    );
    ensure!(status == 200, "compare: {status} {}", String::from_utf8_lossy(&body));
    let cmp = json(&body);
    let rows_out = cmp["rows"].as_array().cloned().unwrap_or_default();
    ensure!(rows_out.len() == 30 * 24, "{} compare rows", rows_out.len());

    let observed: HashMap<i64, f64> = rows.iter().filter(|r| r.signal == TARGET).map(|r| (r.ts, r.value)).collect();
    let (mut model_sq, mut naive_sq, mut n) = (0.0, 0.0, 0usize);
    for r in &rows_out {
        let ts = parse_timestamp(r["ts"].as_str().unwrap()).unwrap();
        ensure!(r["producer"] == vid, "point {ts} produced by {}", r["producer"]);
        let forecast = r["forecast"].as_f64().ok_or(format!("no forecast at {ts}"))?;
        let sigma = r["sigma"].as_f64().ok_or(format!("no sigma at {ts}"))?;
        ensure!(sigma > 0.0, "sigma {sigma} at {ts}");
        let y = observed[&ts];
        ensure!(r["observed"].as_f64() == Some(y), "observed value at {ts}");
        model_sq += (forecast - y).powi(2);
        naive_sq += (observed[&(ts - DAY)] - y).powi(2);
        n += 1;
    }
    let rmse = (model_sq / n as f64).sqrt();
    let persistence = (naive_sq / n as f64).sqrt();
    let server_rmse = cmp["rmse"].as_f64().unwrap_or(f64::NAN);
    ensure!((server_rmse - rmse).abs() <= 1e-9 * rmse.max(1.0), "server rmse {server_rmse}, recomputed {rmse}");
    ensure!(rmse < persistence, "rmse {rmse:.3} does not beat 24h persistence {persistence:.3}");
    Ok(format!("{n} held-out hours, rmse {rmse:.3} vs persistence {persistence:.3}"))
}
