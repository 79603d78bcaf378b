//! UTC epoch-second timestamps and ISO-8601 durations.

use std::fmt;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub type Timestamp = i64;

pub const HOUR: i64 = 3600;
pub const DAY: i64 = 86_400;

pub fn parse_timestamp(text: &str) -> Result<Timestamp, String> {
    DateTime::parse_from_rfc3339(text.trim())
        .map(|t| t.with_timezone(&Utc).timestamp())
        .map_err(|e| format!("invalid RFC 3339 timestamp `{text}`: {e}"))
}

pub fn format_timestamp(ts: Timestamp) -> String {
    match DateTime::<Utc>::from_timestamp(ts, 0) {
        Some(t) => t.to_rfc3339_opts(SecondsFormat::Secs, true),
        None => ts.to_string(),
    }
}

pub fn now() -> Timestamp {
    Utc::now().timestamp()
}

/// Serde adapter writing timestamps as RFC 3339 strings.
pub mod rfc3339 {
    use super::*;

    pub fn serialize<S: Serializer>(ts: &Timestamp, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_timestamp(*ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Timestamp, D::Error> {
        let text = String::deserialize(d)?;
        parse_timestamp(&text).map_err(serde::de::Error::custom)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(ts: &Option<Timestamp>, s: S) -> Result<S::Ok, S::Error> {
            match ts {
                Some(t) => s.serialize_some(&format_timestamp(*t)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Timestamp>, D::Error> {
            Option::<String>::deserialize(d)?
                .map(|t| parse_timestamp(&t).map_err(serde::de::Error::custom))
                .transpose()
        }
    }
}

/// Whole-second duration written in ISO-8601 form (`PT24H`, `P30D`).
/// Calendar units (years, months) are rejected because their length
/// depends on the anchor date.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct IsoDuration(pub i64);

impl IsoDuration {
    pub const ZERO: IsoDuration = IsoDuration(0);

    pub fn seconds(self) -> i64 {
        self.0
    }

    pub fn hours(h: i64) -> Self {
        IsoDuration(h * HOUR)
    }

    pub fn days(d: i64) -> Self {
        IsoDuration(d * DAY)
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let bad = || format!("invalid ISO-8601 duration `{text}`");
        let (rest, parsed) = iso8601::parsers::parse_duration(text.trim().as_bytes()).map_err(|_| bad())?;
        if !rest.is_empty() {
            return Err(bad());
        }
        let secs = match parsed {
            iso8601::Duration::Weeks(w) => i64::from(w) * 7 * DAY,
            iso8601::Duration::YMDHMS {
                year,
                month,
                day,
                hour,
                minute,
                second,
                millisecond,
            } => {
                if year != 0 || month != 0 {
                    return Err(format!("duration `{text}` uses calendar years or months"));
                }
                if millisecond != 0 {
                    return Err(format!("duration `{text}` is not a whole number of seconds"));
                }
                i64::from(day) * DAY + i64::from(hour) * HOUR + i64::from(minute) * 60 + i64::from(second)
            }
        };
        Ok(IsoDuration(secs))
    }
}

impl fmt::Display for IsoDuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = self.0;
        if s == 0 {
            return f.write_str("PT0S");
        }
        if s < 0 {
            f.write_str("-")?;
            s = -s;
        }
        f.write_str("P")?;
        let (d, rem) = (s / DAY, s % DAY);
        if d > 0 {
            write!(f, "{d}D")?;
        }
        if rem > 0 {
            f.write_str("T")?;
            let (h, m, sec) = (rem / HOUR, rem % HOUR / 60, rem % 60);
            if h > 0 {
                write!(f, "{h}H")?;
            }
            if m > 0 {
                write!(f, "{m}M")?;
            }
            if sec > 0 {
                write!(f, "{sec}S")?;
            }
        }
        Ok(())
    }
}

impl Serialize for IsoDuration {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for IsoDuration {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        IsoDuration::parse(&text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn durations_round_trip() {
        for (text, secs) in [("PT24H", DAY), ("P30D", 30 * DAY), ("PT0S", 0), ("PT1H30M", 5400), ("P1W", 7 * DAY)] {
            let d = IsoDuration::parse(text).unwrap();
            assert_eq!(d.seconds(), secs);
            assert_eq!(IsoDuration::parse(&d.to_string()).unwrap(), d);
        }
        assert_eq!(IsoDuration(DAY).to_string(), "P1D");
        assert_eq!(IsoDuration(DAY + 61).to_string(), "P1DT1M1S");
    }

    #[test]
    fn calendar_units_and_garbage_are_rejected() {
        assert!(IsoDuration::parse("P1M").is_err());
        assert!(IsoDuration::parse("P1Y").is_err());
        assert!(IsoDuration::parse("24h").is_err());
        assert!(IsoDuration::parse("PT1Hjunk").is_err());
    }

    #[test]
    fn timestamps() {
        let ts = parse_timestamp("2018-07-12T09:00:00Z").unwrap();
        assert_eq!(ts, 1_531_386_000);
        assert_eq!(format_timestamp(ts), "2018-07-12T09:00:00Z");
        assert_eq!(parse_timestamp("2018-07-12T11:00:00+02:00").unwrap(), ts);
        assert!(parse_timestamp("yesterday").is_err());
    }
}
