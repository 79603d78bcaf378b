//! Deterministic hourly consumption and weather data for demos and tests.
//!
//! One substation with signals `energy` (the load), `Temperature`,
//! `SolarRadiance` and `DewPoint`. The load depends on the hour, the day
//! type, temperature and irradiance, with noise that is larger at the
//! daily peaks.

use std::f64::consts::PI;

use chrono::{DateTime, Datelike, Timelike, Utc, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::time::{self, Timestamp, HOUR};

pub const ENTITY: &str = "sub_A";
pub const TARGET: &str = "energy";
pub const WEATHER: [&str; 3] = ["Temperature", "SolarRadiance", "DewPoint"];

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    pub start: Timestamp,
    pub days: usize,
    pub seed: u64,
    pub entity: String,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            start: time::parse_timestamp("2018-04-13T00:00:00Z").expect("valid"),
            days: 90,
            seed: 7,
            entity: ENTITY.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub ts: Timestamp,
    pub entity: String,
    pub signal: &'static str,
    pub value: f64,
}

fn profile(hour: f64) -> f64 {
    (-(hour - 9.0).powi(2) / 8.0).exp() + 0.8 * (-(hour - 19.0).powi(2) / 6.0).exp()
}

/// Rows ordered by timestamp, then signal (`energy` first).
pub fn generate(cfg: &FixtureConfig) -> Vec<Row> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mut rows = Vec::with_capacity(cfg.days * 24 * 4);
    let mut temp_noise = 0.0;
    let mut cloud = 0.8;
    for i in 0..cfg.days * 24 {
        let ts = cfg.start + i as i64 * HOUR;
        let t = DateTime::<Utc>::from_timestamp(ts, 0).expect("in range");
        let hour = f64::from(t.hour());
        let doy = f64::from(t.ordinal0());
        if t.hour() == 0 {
            cloud = 0.5 + 0.5 * rng.random::<f64>();
        }
        temp_noise = 0.95 * temp_noise + normal(&mut rng);
        let temperature =
            14.0 - 9.0 * (2.0 * PI * (doy - 15.0) / 365.0).cos() + 5.0 * (2.0 * PI * (hour - 9.0) / 24.0).sin() + temp_noise;
        let solar = if (6.0..=18.0).contains(&hour) {
            (PI * (hour - 6.0) / 12.0).sin() * (650.0 + 250.0 * (2.0 * PI * (doy - 172.0) / 365.0).cos()) * cloud
        } else {
            0.0
        };
        let dew_point = temperature - 3.0 - 2.0 * rng.random::<f64>();
        let day_shift = match t.weekday() {
            Weekday::Sat => -15.0,
            Weekday::Sun => -25.0,
            _ => 0.0,
        };
        let p = profile(hour);
        let mean = 100.0 + 30.0 * p + day_shift + 1.5 * (15.0 - temperature).max(0.0)
            + 2.0 * (temperature - 22.0).max(0.0)
            - 0.01 * solar;
        let energy = mean + (2.0 + 3.0 * p) * normal(&mut rng);
        for (signal, value) in [
            (TARGET, energy),
            (WEATHER[0], temperature),
            (WEATHER[1], solar),
            (WEATHER[2], dew_point),
        ] {
            rows.push(Row {
                ts,
                entity: cfg.entity.clone(),
                signal,
                value,
            });
        }
    }
    rows
}

/// CSV document in the ingest format `ts,entity,signal,value`.
pub fn to_csv(rows: &[Row]) -> String {
    let mut out = String::with_capacity(rows.len() * 48);
    out.push_str("ts,entity,signal,value\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", time::format_timestamp(r.ts), r.entity, r.signal, r.value));
    }
    out
}
