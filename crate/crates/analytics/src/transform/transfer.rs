use serde::{Deserialize, Serialize};

use super::series::MaskedSeries;
use super::TransformError;

/// Minimum present points required on each side of the change point.
pub const MIN_SIDE_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TransferKind {
    Affine,
}

/// Maps values observed before a change point onto the regime after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferFunction {
    pub kind: TransferKind,
    pub scale: f64,
    pub offset: f64,
    /// Original index ranges `[start, end)` of the two segments.
    pub fitted_on: ((usize, usize), (usize, usize)),
}

impl TransferFunction {
    pub fn apply(&self, value: f64) -> f64 {
        self.scale * value + self.offset
    }

    /// Returns a copy of `series` whose values before the change point are
    /// mapped into the later regime.
    pub fn realign(&self, series: &MaskedSeries) -> MaskedSeries {
        let mut out = series.clone();
        let (start, end) = self.fitted_on.0;
        for i in start..end.min(out.len()) {
            if !out.missing[i] {
                out.values[i] = self.apply(out.values[i]);
            }
        }
        out
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Fits an affine map by least squares on matched quantiles of the present
/// values before and after `changepoint`.
pub fn fit_transfer(series: &MaskedSeries, changepoint: usize) -> Result<TransferFunction, TransformError> {
    let cut = changepoint.min(series.len());
    let side = |range: std::ops::Range<usize>| -> Vec<f64> {
        let mut v: Vec<f64> = range.filter(|&i| series.is_present(i)).map(|i| series.values[i]).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let before = side(0..cut);
    let after = side(cut..series.len());
    let shortest = before.len().min(after.len());
    if shortest < MIN_SIDE_LEN {
        return Err(TransformError::TooShort {
            required: MIN_SIDE_LEN,
            actual: shortest,
        });
    }

    let k = shortest;
    let probs: Vec<f64> = (0..k).map(|i| if k == 1 { 0.5 } else { i as f64 / (k - 1) as f64 }).collect();
    let xs: Vec<f64> = probs.iter().map(|&p| quantile(&before, p)).collect();
    let ys: Vec<f64> = probs.iter().map(|&p| quantile(&after, p)).collect();

    let mx = xs.iter().sum::<f64>() / k as f64;
    let my = ys.iter().sum::<f64>() / k as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();

    // A flat side carries no scale information; fall back to a pure shift.
    let mut scale = if sxx > 0.0 { sxy / sxx } else { 1.0 };
    if !scale.is_finite() || scale == 0.0 {
        scale = 1.0;
    }
    let offset = my - scale * mx;
    Ok(TransferFunction {
        kind: TransferKind::Affine,
        scale,
        offset,
        fitted_on: ((0, cut), (cut, series.len())),
    })
}
