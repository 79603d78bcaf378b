use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::pelt::{default_penalty, pelt, CostFunction};
use super::series::MaskedSeries;
use super::TransformError;

/// PELT penalty: `"auto"` (3 ln n) or an explicit positive value.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Penalty {
    #[default]
    Auto,
    Fixed(f64),
}

impl Penalty {
    pub fn resolve(self, n: usize) -> f64 {
        match self {
            Penalty::Auto => default_penalty(n),
            Penalty::Fixed(p) => p,
        }
    }
}

impl Serialize for Penalty {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Penalty::Auto => serializer.serialize_str("auto"),
            Penalty::Fixed(p) => serializer.serialize_f64(*p),
        }
    }
}

impl<'de> Deserialize<'de> for Penalty {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Number(f64),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Text(s) if s == "auto" => Ok(Penalty::Auto),
            Repr::Text(s) => Err(serde::de::Error::custom(format!("unknown penalty `{s}`"))),
            Repr::Number(p) if p.is_finite() && p > 0.0 => Ok(Penalty::Fixed(p)),
            Repr::Number(p) => Err(serde::de::Error::custom(format!("penalty must be positive, got {p}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleaningConfig {
    pub allow_negative: bool,
    pub max_constant_run: usize,
    pub pelt_penalty: Penalty,
    pub cost: CostFunction,
    pub deviation_threshold: f64,
    pub min_remaining_fraction: f64,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        Self {
            allow_negative: false,
            max_constant_run: 6,
            pelt_penalty: Penalty::Auto,
            cost: CostFunction::MeanNormal,
            deviation_threshold: 3.0,
            min_remaining_fraction: 0.5,
        }
    }
}

impl CleaningConfig {
    pub fn validate(&self) -> Result<(), TransformError> {
        if self.max_constant_run < 2 {
            return Err(TransformError::InvalidConfig("max_constant_run must be at least 2".into()));
        }
        if !(self.deviation_threshold >= 0.0 && self.deviation_threshold.is_finite()) {
            return Err(TransformError::InvalidConfig("deviation_threshold must be finite and non-negative".into()));
        }
        if !(self.min_remaining_fraction > 0.0 && self.min_remaining_fraction <= 1.0) {
            return Err(TransformError::InvalidConfig("min_remaining_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedSegment {
    /// First and one-past-last original index covered by the segment.
    pub start: usize,
    pub end: usize,
    pub mean: f64,
    pub deviation: f64,
}

/// Median and normal-consistent MAD (`1.4826 * median |x - median|`).
pub fn median_mad(values: &[f64]) -> (f64, f64) {
    let median = median(values);
    let deviations: Vec<f64> = values.iter().map(|v| (v - median).abs()).collect();
    (median, 1.4826 * median_of(deviations))
}

fn median(values: &[f64]) -> f64 {
    median_of(values.to_vec())
}

fn median_of(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

/// Robust z-score of a segment mean against the remaining data.
fn deviation(mean: f64, median: f64, mad: f64) -> f64 {
    let diff = (mean - median).abs();
    if mad > 0.0 {
        diff / mad
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Segments the present values once with PELT, then repeatedly marks the
/// segment whose mean deviates most from the median of the remaining data
/// as missing until no segment exceeds `deviation_threshold`.
///
/// Fails with [`TransformError::InsufficientData`] when a removal would leave
/// less than `min_remaining_fraction` of the originally present points.
pub fn iterative_segment_removal(
    series: &MaskedSeries,
    config: &CleaningConfig,
) -> Result<(MaskedSeries, Vec<RemovedSegment>), TransformError> {
    config.validate()?;
    let present = series.present_indices();
    if present.len() < 2 {
        return Ok((series.clone(), Vec::new()));
    }
    let values: Vec<f64> = present.iter().map(|&i| series.values[i]).collect();
    let segmentation = pelt(&values, config.pelt_penalty.resolve(values.len()), config.cost)?;

    let initial = values.len();
    let mut remaining = initial;
    let mut alive = vec![true; segmentation.segment_stats.len()];
    let mut removed = Vec::new();
    let mut cleaned = series.clone();

    loop {
        let pool: Vec<f64> = segmentation
            .segment_stats
            .iter()
            .zip(&alive)
            .filter(|(_, a)| **a)
            .flat_map(|(s, _)| values[s.start..s.end].iter().copied())
            .collect();
        if pool.is_empty() {
            break;
        }
        let (median, mad) = median_mad(&pool);

        let worst = segmentation
            .segment_stats
            .iter()
            .enumerate()
            .filter(|(k, _)| alive[*k])
            .map(|(k, s)| (k, deviation(s.mean, median, mad)))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let Some((k, dev)) = worst else { break };
        if dev <= config.deviation_threshold {
            break;
        }

        let stats = &segmentation.segment_stats[k];
        remaining -= stats.length;
        let fraction = remaining as f64 / initial as f64;
        if fraction < config.min_remaining_fraction {
            return Err(TransformError::InsufficientData {
                remaining_fraction: fraction,
                min_remaining_fraction: config.min_remaining_fraction,
            });
        }
        alive[k] = false;
        for &idx in &present[stats.start..stats.end] {
            cleaned.missing[idx] = true;
        }
        removed.push(RemovedSegment {
            start: present[stats.start],
            end: present[stats.end - 1] + 1,
            mean: stats.mean,
            deviation: dev,
        });
    }
    Ok((cleaned, removed))
}
