mod common;

use std::fs::OpenOptions;
use std::io::Write;
use std::time::Duration;

use castorette_core::api::ModelResponse;
use castorette_core::bus::queues;
use castorette_core::platform::Platform;
use castorette_core::synthetic::{FixtureConfig, ENTITY, TARGET, WEATHER};
use castorette_core::time::format_timestamp;
use castorette_core::timeseries::{LayerKind, Producer, RangeQuery, SeriesPoint};
use common::*;

type Snapshot = (
    Vec<Vec<SeriesPoint>>,
    Vec<castorette_core::models::Model>,
    Vec<castorette_core::models::ModelVersion>,
    Vec<castorette_core::timeseries::LayerInfo>,
    usize,
);

fn snapshot(p: &Platform, from: i64, to: i64) -> Snapshot {
    let mut series = Vec::new();
    for sig in [TARGET, WEATHER[0], WEATHER[1], WEATHER[2]] {
        let key = p.context.resolve_context(ENTITY, sig).unwrap();
        series.push(
            p.timeseries
                .query(&RangeQuery {
                    key,
                    from,
                    to,
                    kind: LayerKind::Observed,
                    producer: Producer::Latest,
                })
                .unwrap(),
        );
    }
    let layers = p.timeseries.forecast_layers();
    for l in &layers {
        series.push(p.timeseries.layer_points(l.id));
    }
    (series, p.models.models(), p.models.all_versions(), layers, p.jobs.all().len())
}

fn step(p: &Platform, to: i64) {
    p.clock.set(to);
    for _ in 0..2 {
        p.scheduler.update().unwrap();
        p.scheduler.poll();
        assert!(p.scheduler.wait_idle(Duration::from_secs(60)));
    }
}

#[test]
fn reopen_keeps_committed_state_and_skips_torn_writes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = FixtureConfig {
        days: 66,
        ..FixtureConfig::default()
    };
    let d = cfg.start + 60 * DAY;
    let end = cfg.start + 66 * DAY;
    let before = {
        let p = virtual_platform(d, Some(dir.path().to_path_buf()));
        load_fixture(&p, &cfg);
        let _: ModelResponse = p
            .bus
            .call(
                queues::MODEL_PUT,
                &model_json(ENTITY, &format_timestamp(d), &format_timestamp(d + 2 * DAY)),
            )
            .unwrap();
        p.scheduler.init().unwrap();
        for k in 0..3 {
            step(&p, d + k * DAY);
        }
        let s = snapshot(&p, cfg.start, end);
        assert_eq!(s.2.len(), 1);
        assert_eq!(s.3.len(), 6, "mean and sigma layer per score run");
        assert_eq!(s.4, 4);
        s
    };

    // Half-written records at the end of some logs.
    for file in ["models.jsonl", "jobs.jsonl", "series/layers.jsonl", "series/layer-1.jsonl"] {
        let mut f = OpenOptions::new().append(true).open(dir.path().join(file)).unwrap();
        f.write_all(b"{\"record\":\"mod").unwrap();
    }

    let p = virtual_platform(d + 2 * DAY, Some(dir.path().to_path_buf()));
    assert_eq!(snapshot(&p, cfg.start, end), before);
    // Nothing finished is due again after a restart.
    let q = p.scheduler.init().unwrap();
    assert!(q.train_now.is_empty() && q.score_now.is_empty(), "{q:?}");
    assert!(p.scheduler.poll().is_empty());
}
