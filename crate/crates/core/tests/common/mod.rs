#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use castorette_core::api::{EntityInput, EntityResponse, IngestRequest, IngestResponse, SeriesBatch, SignalInput, SignalResponse};
use castorette_core::bus::queues;
use castorette_core::context::ContextRef;
use castorette_core::platform::{Platform, PlatformConfig};
use castorette_core::scheduler::Clock;
use castorette_core::synthetic::{self, FixtureConfig, TARGET, WEATHER};
use castorette_core::time::Timestamp;
use castorette_core::timeseries::SeriesPoint;
use serde_json::json;

pub const DAY: i64 = 86_400;

pub fn virtual_platform(start: Timestamp, data_dir: Option<std::path::PathBuf>) -> Platform {
    Platform::open(PlatformConfig {
        data_dir,
        clock: Arc::new(Clock::virtual_at(start)),
        ..PlatformConfig::default()
    })
    .expect("platform opens")
}

/// Creates the fixture contexts and ingests the synthetic rows over the bus.
pub fn load_fixture(p: &Platform, cfg: &FixtureConfig) {
    let _: EntityResponse = p
        .bus
        .call(
            queues::CONTEXT_ENTITY,
            &EntityInput {
                name: cfg.entity.clone(),
                entity_type: "substation".into(),
                geo: None,
                parent: None,
                connected_to: Vec::new(),
            },
        )
        .unwrap();
    for (name, ty, unit) in [
        (TARGET, "load", "kW"),
        (WEATHER[0], "weather", "degC"),
        (WEATHER[1], "weather", "W/m2"),
        (WEATHER[2], "weather", "degC"),
    ] {
        let _: SignalResponse = p
            .bus
            .call(
                queues::CONTEXT_SIGNAL,
                &SignalInput {
                    name: name.into(),
                    signal_type: ty.into(),
                    unit: unit.into(),
                },
            )
            .unwrap();
    }
    let mut by_signal: BTreeMap<&str, Vec<SeriesPoint>> = BTreeMap::new();
    for r in synthetic::generate(cfg) {
        by_signal.entry(r.signal).or_default().push(SeriesPoint::new(r.ts, r.value));
    }
    let series = by_signal
        .into_iter()
        .map(|(s, points)| SeriesBatch {
            context: ContextRef::new(cfg.entity.clone(), s),
            points,
        })
        .collect();
    let resp: IngestResponse = p
        .bus
        .call(queues::TS_INGEST, &IngestRequest { series, forecast: None })
        .unwrap();
    assert_eq!(resp.stored, cfg.days * 24 * 4);
}

/// Model on the fixture target with the weather covariates, trained once at
/// `train_at` and scored daily from then on for `score_days` days.
pub fn model_json(entity: &str, train_at: &str, score_until: &str) -> serde_json::Value {
    json!({
        "name": "energy-gam2",
        "target": {"entity": entity, "signal": TARGET},
        "pipeline": {
            "load": {
                "train_window": "P56D",
                "covariates": WEATHER.iter().map(|s| json!({"entity": entity, "signal": s})).collect::<Vec<_>>()
            },
            "transform": [{"step": "outliers"}, {"step": "features"}],
            "score": {"schedule": {"offset": "PT0S", "repeat": "P1D", "until": score_until}}
        },
        "train_schedule": {"task": "train", "time": train_at}
    })
}

/// Serialized artifact of a small model fitted to two weeks of fixture data.
pub fn small_params() -> String {
    use castorette_analytics::gam2::{fit_gam2, Gam2Config};
    use castorette_analytics::transform::{engineer_features, FeatureSpec, MaskedSeries, RawCovariates};

    let cfg = FixtureConfig {
        days: 14,
        ..FixtureConfig::default()
    };
    let rows = synthetic::generate(&cfg);
    let pick = |sig: &str| MaskedSeries::new(rows.iter().filter(|r| r.signal == sig).map(|r| r.value).collect());
    let timestamps: Vec<i64> = rows.iter().filter(|r| r.signal == TARGET).map(|r| r.ts).collect();
    let raw = RawCovariates {
        timestamps,
        covariates: BTreeMap::from([(WEATHER[0].to_string(), pick(WEATHER[0]))]),
        target: Some(pick(TARGET)),
    };
    let config: Gam2Config = serde_json::from_value(small_train()).unwrap();
    let frame = engineer_features(&raw, &FeatureSpec::new(config.features())).unwrap();
    fit_gam2(&frame, &config).unwrap().to_json()
}

pub fn small_train() -> serde_json::Value {
    json!({
        "mean_terms": [{"features": ["TimeOfDay"]}, {"features": ["Temperature"]}],
        "variance_terms": [{"features": ["TimeOfDay"]}]
    })
}

pub fn small_pipeline(entity: &str) -> serde_json::Value {
    json!({
        "load": {"train_window": "P7D", "covariates": [{"entity": entity, "signal": WEATHER[0]}]},
        "train": small_train()
    })
}
