//! Calendar, statistical, combination, lag and pass-through features.
//!
//! Features are requested by name:
//!
//! | name                         | kind        | meaning                                   |
//! |------------------------------|-------------|-------------------------------------------|
//! | `TimeOfDay`                  | real        | UTC hour, 0..=23                          |
//! | `DayType`                    | categorical | `weekday`, `saturday`, `sunday_holiday`    |
//! | `TimeOfYear`                 | real        | zero-based day of year / days in year     |
//! | `Season`                     | categorical | meteorological season (northern)          |
//! | `Daily{Min,Max,Average}<Cov>`| real        | statistic of covariate over the UTC day   |
//! | `lag_<h>`                    | real        | target `h` hours earlier                  |
//! | `<Cat>:<Real>`               | interaction | real feature tagged with categorical level |
//! | anything else                | real        | covariate passed through unchanged        |

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Datelike, NaiveDate, Timelike, Utc, Weekday};
use serde::{Deserialize, Serialize};

use super::frame::{Column, ColumnValues, FeatureFrame};
use super::series::MaskedSeries;
use super::TransformError;

pub const HOUR: i64 = 3600;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub features: Vec<String>,
    /// Dates treated like Sundays for `DayType`.
    #[serde(default)]
    pub holidays: Vec<NaiveDate>,
}

impl FeatureSpec {
    pub fn new<S: Into<String>>(features: impl IntoIterator<Item = S>) -> Self {
        Self {
            features: features.into_iter().map(Into::into).collect(),
            holidays: Vec::new(),
        }
    }

    /// Largest lag in hours, 0 when no lag feature is requested.
    pub fn max_lag_hours(&self) -> u32 {
        self.features
            .iter()
            .filter_map(|f| parse_lag(f))
            .max()
            .unwrap_or(0)
    }

    /// Covariate names the spec reads.
    pub fn covariates(&self) -> Vec<String> {
        let mut out = Vec::new();
        for name in &self.features {
            let mut push = |c: &str| {
                if !out.iter().any(|o: &String| o == c) {
                    out.push(c.to_string());
                }
            };
            match FeatureKind::parse(name) {
                FeatureKind::Daily(_, cov) | FeatureKind::Passthrough(cov) => push(cov),
                FeatureKind::Combination(a, b) => {
                    for part in [a, b] {
                        match FeatureKind::parse(part) {
                            FeatureKind::Daily(_, cov) | FeatureKind::Passthrough(cov) => push(cov),
                            _ => {}
                        }
                    }
                }
                _ => {}
            }
        }
        out
    }
}

/// Hourly-aligned raw inputs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawCovariates {
    pub timestamps: Vec<i64>,
    pub covariates: BTreeMap<String, MaskedSeries>,
    /// Target history; used for lag features and copied into the frame.
    pub target: Option<MaskedSeries>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DailyStat {
    Min,
    Max,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FeatureKind<'a> {
    TimeOfDay,
    DayType,
    TimeOfYear,
    Season,
    Daily(DailyStat, &'a str),
    Lag(u32),
    Combination(&'a str, &'a str),
    Passthrough(&'a str),
}

fn parse_lag(name: &str) -> Option<u32> {
    name.strip_prefix("lag_").and_then(|h| h.parse().ok()).filter(|h| *h > 0)
}

impl<'a> FeatureKind<'a> {
    fn parse(name: &'a str) -> Self {
        if let Some((a, b)) = name.split_once(':') {
            return FeatureKind::Combination(a, b);
        }
        if let Some(h) = parse_lag(name) {
            return FeatureKind::Lag(h);
        }
        match name {
            "TimeOfDay" => return FeatureKind::TimeOfDay,
            "DayType" => return FeatureKind::DayType,
            "TimeOfYear" => return FeatureKind::TimeOfYear,
            "Season" => return FeatureKind::Season,
            _ => {}
        }
        for (prefix, stat) in [
            ("DailyAverage", DailyStat::Average),
            ("DailyMin", DailyStat::Min),
            ("DailyMax", DailyStat::Max),
        ] {
            if let Some(cov) = name.strip_prefix(prefix) {
                if !cov.is_empty() {
                    return FeatureKind::Daily(stat, cov);
                }
            }
        }
        FeatureKind::Passthrough(name)
    }
}

pub fn day_type(date: NaiveDate, holidays: &[NaiveDate]) -> &'static str {
    if date.weekday() == Weekday::Sun || holidays.contains(&date) {
        "sunday_holiday"
    } else if date.weekday() == Weekday::Sat {
        "saturday"
    } else {
        "weekday"
    }
}

pub fn season(month: u32) -> &'static str {
    match month {
        12 | 1 | 2 => "winter",
        3..=5 => "spring",
        6..=8 => "summer",
        _ => "autumn",
    }
}

fn datetime(ts: i64) -> DateTime<Utc> {
    DateTime::from_timestamp(ts, 0).unwrap_or_default()
}

fn check_alignment(timestamps: &[i64]) -> Result<(), TransformError> {
    for (i, ts) in timestamps.iter().enumerate() {
        if ts.rem_euclid(HOUR) != 0 || (i > 0 && ts - timestamps[i - 1] != HOUR) {
            return Err(TransformError::MisalignedTimestamps(i));
        }
    }
    Ok(())
}

struct Builder<'a> {
    raw: &'a RawCovariates,
    spec: &'a FeatureSpec,
    cache: HashMap<String, Column>,
}

impl<'a> Builder<'a> {
    fn covariate(&self, name: &str) -> Result<&'a MaskedSeries, TransformError> {
        let series = self
            .raw
            .covariates
            .get(name)
            .ok_or_else(|| TransformError::MissingCovariate(name.to_string()))?;
        if series.len() != self.raw.timestamps.len() {
            return Err(TransformError::LengthMismatch {
                name: name.to_string(),
                expected: self.raw.timestamps.len(),
                actual: series.len(),
            });
        }
        Ok(series)
    }

    fn build(&mut self, name: &str) -> Result<Column, TransformError> {
        if let Some(col) = self.cache.get(name) {
            return Ok(col.clone());
        }
        let ts = &self.raw.timestamps;
        let column = match FeatureKind::parse(name) {
            FeatureKind::TimeOfDay => Column::real(name, ts.iter().map(|t| datetime(*t).hour() as f64).collect()),
            FeatureKind::DayType => Column::categorical(
                name,
                ts.iter()
                    .map(|t| day_type(datetime(*t).date_naive(), &self.spec.holidays).to_string())
                    .collect(),
            ),
            FeatureKind::TimeOfYear => Column::real(
                name,
                ts.iter()
                    .map(|t| {
                        let d = datetime(*t).date_naive();
                        let days = if d.leap_year() { 366.0 } else { 365.0 };
                        d.ordinal0() as f64 / days
                    })
                    .collect(),
            ),
            FeatureKind::Season => Column::categorical(
                name,
                ts.iter().map(|t| season(datetime(*t).month()).to_string()).collect(),
            ),
            FeatureKind::Daily(stat, cov) => {
                let series = self.covariate(cov)?;
                let mut per_day: BTreeMap<i64, (f64, f64, f64, usize)> = BTreeMap::new();
                for (i, t) in ts.iter().enumerate() {
                    if let Some(v) = series.get(i) {
                        let e = per_day
                            .entry(t.div_euclid(86_400))
                            .or_insert((f64::INFINITY, f64::NEG_INFINITY, 0.0, 0));
                        e.0 = e.0.min(v);
                        e.1 = e.1.max(v);
                        e.2 += v;
                        e.3 += 1;
                    }
                }
                let values = ts
                    .iter()
                    .map(|t| match per_day.get(&t.div_euclid(86_400)) {
                        Some(&(min, max, sum, n)) => match stat {
                            DailyStat::Min => min,
                            DailyStat::Max => max,
                            DailyStat::Average => sum / n as f64,
                        },
                        None => f64::NAN,
                    })
                    .collect();
                Column::real(name, values)
            }
            FeatureKind::Lag(hours) => {
                let lag = hours as usize;
                let values = match &self.raw.target {
                    Some(target) => (0..ts.len())
                        .map(|i| if i >= lag { target.get(i - lag).unwrap_or(f64::NAN) } else { f64::NAN })
                        .collect(),
                    None => return Err(TransformError::MissingCovariate("target".into())),
                };
                Column::real(name, values)
            }
            FeatureKind::Combination(cat, real) => {
                let cat_col = self.build(cat)?;
                let real_col = self.build(real)?;
                let (Some(levels), Some(values)) = (cat_col.as_categorical(), real_col.as_real()) else {
                    return Err(TransformError::InvalidConfig(format!(
                        "combination `{name}` needs a categorical and a real feature"
                    )));
                };
                Column {
                    name: name.to_string(),
                    missing: cat_col.missing.iter().zip(&real_col.missing).map(|(a, b)| *a || *b).collect(),
                    values: ColumnValues::Interaction {
                        levels: levels.to_vec(),
                        values: values.to_vec(),
                    },
                }
            }
            FeatureKind::Passthrough(cov) => Column::from_masked(name, self.covariate(cov)?),
        };
        self.cache.insert(name.to_string(), column.clone());
        Ok(column)
    }
}

/// Builds the requested feature columns over the raw timestamps. The frame
/// has one row per input timestamp; values that cannot be computed (a lag
/// reaching before the first row, a day without covariate data) are marked
/// missing.
pub fn engineer_features(raw: &RawCovariates, spec: &FeatureSpec) -> Result<FeatureFrame, TransformError> {
    check_alignment(&raw.timestamps)?;
    let mut frame = FeatureFrame::new(raw.timestamps.clone());
    let mut builder = Builder {
        raw,
        spec,
        cache: HashMap::new(),
    };
    for name in &spec.features {
        let column = builder.build(name)?;
        frame.push_column(column)?;
    }
    if let Some(target) = &raw.target {
        frame.set_target(Some(target.clone()))?;
    }
    Ok(frame)
}
