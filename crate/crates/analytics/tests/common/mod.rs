#![allow(dead_code)]

use castorette_analytics::{Column, FeatureFrame};

/// Clamped Cox–de Boor recursion, written without reference to the crate's
/// evaluator.
pub fn cox_de_boor(knots: &[f64], x: f64) -> Vec<f64> {
    let lo = knots[0];
    let hi = knots[knots.len() - 1];
    let x = x.clamp(lo, hi);
    let m = knots.len() - 1;
    // The last non-empty interval is closed on the right.
    let last = (0..m).rev().find(|&i| knots[i] < knots[i + 1]).unwrap();
    let mut b: Vec<f64> = (0..m)
        .map(|i| {
            let inside = knots[i] <= x && x < knots[i + 1];
            if inside || (i == last && x == hi) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    for d in 1..=3 {
        let next: Vec<f64> = (0..m - d)
            .map(|i| {
                let mut v = 0.0;
                let l = knots[i + d] - knots[i];
                if l > 0.0 {
                    v += (x - knots[i]) / l * b[i];
                }
                let r = knots[i + d + 1] - knots[i + 1];
                if r > 0.0 {
                    v += (knots[i + d + 1] - x) / r * b[i + 1];
                }
                v
            })
            .collect();
        b = next;
    }
    b
}

/// Second-difference penalty `D'D` for `k` coefficients.
pub fn second_difference(k: usize) -> Vec<Vec<f64>> {
    let mut p = vec![vec![0.0; k]; k];
    for r in 0..k.saturating_sub(2) {
        let row = [(r, 1.0), (r + 1, -2.0), (r + 2, 1.0)];
        for &(i, a) in &row {
            for &(j, b) in &row {
                p[i][j] += a * b;
            }
        }
    }
    p
}

/// Dense Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let d = a[col][col];
        assert!(d != 0.0, "singular oracle system");
        for r in col + 1..n {
            let f = a[r][col] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

pub fn hourly(n: usize) -> Vec<i64> {
    (0..n as i64).map(|i| 1_530_000_000 + 3600 * i).collect()
}

pub fn frame(columns: Vec<(&str, Vec<f64>)>, target: Vec<f64>) -> FeatureFrame {
    let mut f = FeatureFrame::new(hourly(target.len()));
    for (name, values) in columns {
        f.push_column(Column::real(name, values)).unwrap();
    }
    f.with_target(target)
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
