//! Exact multiple change point detection with PELT pruning.

use serde::{Deserialize, Serialize};

use super::TransformError;

/// Shortest admissible segment. Length-one segments have no variance
/// estimate, so both cost functions require two points.
pub const MIN_SEGMENT_LEN: usize = 2;

/// Segment cost, twice the negative Normal log-likelihood up to constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostFunction {
    /// Change in mean with a known variance, taken to be the variance of
    /// the whole series.
    #[default]
    MeanNormal,
    /// Change in mean and variance; the per-segment variance is floored at
    /// `1e-8` times the series variance.
    MeanVarNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub start: usize,
    pub end: usize,
    pub mean: f64,
    pub variance: f64,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    /// Index of the first point of every segment but the first.
    pub changepoints: Vec<usize>,
    pub segment_stats: Vec<SegmentStats>,
    /// Sum of segment costs plus `penalty` per change point.
    pub cost: f64,
}

pub fn default_penalty(n: usize) -> f64 {
    3.0 * (n.max(2) as f64).ln()
}

/// Prefix sums of the series centred on its mean; centring keeps the
/// `sum_sq - sum^2 / m` cancellation small.
struct SegmentCost {
    centred: Vec<f64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    kind: CostFunction,
    variance: f64,
    variance_floor: f64,
}

impl SegmentCost {
    fn new(series: &[f64], kind: CostFunction) -> Self {
        let n = series.len() as f64;
        let mean = series.iter().sum::<f64>() / n;
        let variance = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let centred: Vec<f64> = series.iter().map(|x| x - mean).collect();
        let mut sum = Vec::with_capacity(series.len() + 1);
        let mut sum_sq = Vec::with_capacity(series.len() + 1);
        sum.push(0.0);
        sum_sq.push(0.0);
        for &c in &centred {
            sum.push(sum.last().unwrap() + c);
            sum_sq.push(sum_sq.last().unwrap() + c * c);
        }
        let variance_floor = if variance > 0.0 { 1e-8 * variance } else { 1e-12 };
        Self {
            centred,
            sum,
            sum_sq,
            kind,
            variance: if variance > 0.0 { variance } else { 1.0 },
            variance_floor,
        }
    }

    /// Mean and MLE variance of `series[start..end]` (centred).
    fn moments(&self, start: usize, end: usize) -> (f64, f64) {
        let m = (end - start) as f64;
        let s = self.sum[end] - self.sum[start];
        let ss = self.sum_sq[end] - self.sum_sq[start];
        let mean = s / m;
        let var = ss / m - mean * mean;
        if var > 1e-6 * ss / m {
            return (mean, var);
        }
        // Nearly constant segment: the prefix-sum difference has lost most
        // of its digits.
        let seg = &self.centred[start..end];
        let mean = seg.iter().sum::<f64>() / m;
        (mean, seg.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m)
    }

    fn cost(&self, start: usize, end: usize) -> f64 {
        let m = (end - start) as f64;
        let (_, var) = self.moments(start, end);
        match self.kind {
            CostFunction::MeanNormal => m * var / self.variance,
            CostFunction::MeanVarNormal => {
                m * ((2.0 * std::f64::consts::PI).ln() + var.max(self.variance_floor).ln() + 1.0)
            }
        }
    }
}

/// Optimal segmentation minimising the sum of segment costs plus
/// `penalty` per change point, with segments of at least
/// [`MIN_SEGMENT_LEN`] points.
///
/// Candidate last-change positions are pruned once they can never be
/// optimal again. With a minimum segment length the pruning decision taken
/// at time `t` only becomes effective for end points `s >= t + MIN_SEGMENT_LEN`,
/// where `t` itself is an admissible alternative.
pub fn pelt(series: &[f64], penalty: f64, cost: CostFunction) -> Result<Segmentation, TransformError> {
    let n = series.len();
    if n < MIN_SEGMENT_LEN {
        return Err(TransformError::TooShort {
            required: MIN_SEGMENT_LEN,
            actual: n,
        });
    }
    if !(penalty.is_finite() && penalty > 0.0) {
        return Err(TransformError::InvalidPenalty(penalty));
    }
    if let Some(i) = series.iter().position(|x| !x.is_finite()) {
        return Err(TransformError::NonFiniteValue(i));
    }

    let costs = SegmentCost::new(series, cost);
    let m = MIN_SEGMENT_LEN;

    // best[t]: optimal penalised cost of series[..t], starting from -penalty
    // so that a single segment carries no penalty.
    let mut best = vec![f64::INFINITY; n + 1];
    let mut last_change = vec![0usize; n + 1];
    best[0] = -penalty;

    let mut candidates: Vec<usize> = vec![0];
    let mut pending_prunes: std::collections::VecDeque<(usize, Vec<usize>)> = Default::default();

    for t in m..=n {
        while let Some((at, _)) = pending_prunes.front() {
            if *at + m > t {
                break;
            }
            let (_, pruned) = pending_prunes.pop_front().unwrap();
            candidates.retain(|c| !pruned.contains(c));
        }

        let mut evaluated: Vec<(usize, f64)> = Vec::with_capacity(candidates.len());
        let mut best_value = f64::INFINITY;
        let mut best_tau = 0;
        for &tau in &candidates {
            if t - tau < m {
                continue;
            }
            let value = best[tau] + costs.cost(tau, t);
            evaluated.push((tau, value));
            if value + penalty < best_value {
                best_value = value + penalty;
                best_tau = tau;
            }
        }
        best[t] = best_value;
        last_change[t] = best_tau;

        let pruned: Vec<usize> = evaluated
            .iter()
            .filter(|(_, value)| *value > best_value)
            .map(|(tau, _)| *tau)
            .collect();
        if !pruned.is_empty() {
            pending_prunes.push_back((t, pruned));
        }
        candidates.push(t);
    }

    let mut changepoints = Vec::new();
    let mut t = n;
    while t > 0 {
        let tau = last_change[t];
        if tau > 0 {
            changepoints.push(tau);
        }
        t = tau;
    }
    changepoints.reverse();

    let segment_stats = segment_stats(series, &changepoints);
    Ok(Segmentation {
        changepoints,
        segment_stats,
        cost: best[n],
    })
}

/// Per-segment mean and MLE variance for a given set of change points.
pub fn segment_stats(series: &[f64], changepoints: &[usize]) -> Vec<SegmentStats> {
    let mut bounds = Vec::with_capacity(changepoints.len() + 2);
    bounds.push(0);
    bounds.extend_from_slice(changepoints);
    bounds.push(series.len());
    bounds
        .windows(2)
        .map(|w| {
            let seg = &series[w[0]..w[1]];
            let length = seg.len();
            let mean = seg.iter().sum::<f64>() / length as f64;
            let variance = seg.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / length as f64;
            SegmentStats {
                start: w[0],
                end: w[1],
                mean,
                variance,
                length,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_series_has_no_changepoints() {
        for cost in [CostFunction::MeanNormal, CostFunction::MeanVarNormal] {
            for penalty in [0.1, 1.0, 50.0] {
                let seg = pelt(&[4.0; 25], penalty, cost).unwrap();
                assert!(seg.changepoints.is_empty());
                assert_eq!(seg.segment_stats.len(), 1);
            }
        }
    }

    #[test]
    fn step_is_found_at_its_start() {
        let mut series = vec![0.0; 20];
        series.extend(vec![10.0; 20]);
        let seg = pelt(&series, default_penalty(40), CostFunction::MeanNormal).unwrap();
        assert_eq!(seg.changepoints, vec![20]);
        assert_eq!(seg.segment_stats[1].mean, 10.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(pelt(&[1.0], 1.0, CostFunction::MeanNormal), Err(TransformError::TooShort { .. })));
        assert!(matches!(pelt(&[1.0, 2.0], 0.0, CostFunction::MeanNormal), Err(TransformError::InvalidPenalty(_))));
        assert!(matches!(
            pelt(&[1.0, f64::NAN], 1.0, CostFunction::MeanNormal),
            Err(TransformError::NonFiniteValue(1))
        ));
    }

    #[test]
    fn segments_respect_minimum_length() {
        let series = [0.0, 9.0, 0.0, 9.0, 0.0, 9.0, 0.0];
        let seg = pelt(&series, 0.01, CostFunction::MeanVarNormal).unwrap();
        assert!(seg.segment_stats.iter().all(|s| s.length >= MIN_SEGMENT_LEN));
    }
}
