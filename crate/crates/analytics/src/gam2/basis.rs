use serde::{Deserialize, Serialize};

use super::GamError;

pub const DEGREE: usize = 3;
const ORDER: usize = DEGREE + 1;

/// Clamped cubic B-spline basis over the training range of one feature.
///
/// The knot vector repeats each boundary knot four times; interior knots sit
/// at quantiles of the distinct training values. Outside the boundary the
/// basis is evaluated at the nearest boundary, giving constant
/// extrapolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    pub feature: String,
    pub knots: Vec<f64>,
}

impl SplineBasis {
    pub fn from_knots(feature: impl Into<String>, knots: Vec<f64>) -> Result<Self, GamError> {
        let feature = feature.into();
        let valid = knots.len() >= 2 * ORDER
            && knots.windows(2).all(|w| w[0] <= w[1])
            && knots[..ORDER].iter().all(|k| *k == knots[0])
            && knots[knots.len() - ORDER..].iter().all(|k| *k == knots[knots.len() - 1])
            && knots[0] < knots[knots.len() - 1]
            && knots.iter().all(|k| k.is_finite());
        if !valid {
            return Err(GamError::InvalidModel(format!("bad knot vector for `{feature}`")));
        }
        Ok(Self { feature, knots })
    }

    pub fn num_basis(&self) -> usize {
        self.knots.len() - ORDER
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.knots[ORDER..self.knots.len() - ORDER]
    }

    pub fn in_domain(&self, x: f64) -> bool {
        let (lo, hi) = self.domain();
        x >= lo && x <= hi
    }

    /// Index of the first non-zero basis function at `x` and the four
    /// non-zero values.
    pub fn evaluate(&self, x: f64) -> (usize, [f64; ORDER]) {
        let (lo, hi) = self.domain();
        let x = x.clamp(lo, hi);
        let t = &self.knots;
        let last_span = self.num_basis() - 1;
        // knots[span] <= x < knots[span + 1], with x == hi in the last span.
        let span = if x >= hi {
            last_span
        } else {
            let upper = t[..=last_span + 1].partition_point(|k| *k <= x);
            (upper - 1).clamp(DEGREE, last_span)
        };

        let mut n = [0.0; ORDER];
        let mut left = [0.0; ORDER];
        let mut right = [0.0; ORDER];
        n[0] = 1.0;
        for j in 1..ORDER {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom != 0.0 { n[r] / denom } else { 0.0 };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        (span - DEGREE, n)
    }

    pub fn evaluate_dense(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.num_basis()];
        let (first, values) = self.evaluate(x);
        out[first..first + ORDER].copy_from_slice(&values);
        out
    }
}

/// Builds a basis with `num_interior_knots` interior knots placed at evenly
/// spaced quantiles of the distinct values of `values`.
pub fn build_basis(feature: &str, values: &[f64], num_interior_knots: usize) -> Result<SplineBasis, GamError> {
    let mut distinct: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let required = num_interior_knots + 2;
    if distinct.len() < required.max(2) {
        return Err(GamError::DegenerateFeature {
            feature: feature.to_string(),
            distinct: distinct.len(),
            required: required.max(2),
        });
    }
    let lo = distinct[0];
    let hi = distinct[distinct.len() - 1];
    let m = num_interior_knots;
    let mut knots = vec![lo; ORDER];
    for i in 1..=m {
        let h = i as f64 / (m + 1) as f64 * (distinct.len() - 1) as f64;
        let a = h.floor() as usize;
        let b = (a + 1).min(distinct.len() - 1);
        knots.push(distinct[a] + (h - a as f64) * (distinct[b] - distinct[a]));
    }
    knots.extend(std::iter::repeat_n(hi, ORDER));
    SplineBasis::from_knots(feature, knots)
}

/// Second-order difference penalty `D'D` for `k` coefficients.
pub fn difference_penalty(k: usize) -> nalgebra::DMatrix<f64> {
    let mut s = nalgebra::DMatrix::zeros(k, k);
    if k < 3 {
        return s;
    }
    for r in 0..k - 2 {
        let d = [(r, 1.0), (r + 1, -2.0), (r + 2, 1.0)];
        for &(i, a) in &d {
            for &(j, b) in &d {
                s[(i, j)] += a * b;
            }
        }
    }
    s
}
