use std::f64::consts::PI;

use castorette_analytics::gam2::{fit_additive, fit_gam2, score, AdditiveFit, Gam2Config, Lambdas, Link, TermKind, TermSpec};
use castorette_analytics::transform::{default_penalty, pelt, CostFunction};
use castorette_analytics::{Column, FeatureFrame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::{ensure, Outcome};

fn variance(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

/// Gaussian segment cost of `seg` under `cost`, given the variance of the
/// whole series.
fn segment_cost(seg: &[f64], total: f64, cost: CostFunction) -> f64 {
    let m = seg.len() as f64;
    match cost {
        CostFunction::MeanNormal => m * variance(seg) / if total > 0.0 { total } else { 1.0 },
        CostFunction::MeanVarNormal => {
            let floor = if total > 0.0 { 1e-8 * total } else { 1e-12 };
            m * ((2.0 * PI).ln() + variance(seg).max(floor).ln() + 1.0)
        }
    }
}

/// Optimum over every segmentation with segments of at least two points.
fn brute_force(series: &[f64], penalty: f64, cost: CostFunction) -> f64 {
    let n = series.len();
    let total = variance(series);
    let mut table = vec![vec![0.0; n + 1]; n + 1];
    for s in 0..n {
        for e in s + 2..=n {
            table[s][e] = segment_cost(&series[s..e], total, cost);
        }
    }
    fn best_from(table: &[Vec<f64>], n: usize, start: usize, penalty: f64) -> f64 {
        let mut best = f64::INFINITY;
        for end in start + 2..=n {
            let tail = if end == n {
                0.0
            } else if n - end < 2 {
                continue;
            } else {
                penalty + best_from(table, n, end, penalty)
            };
            best = best.min(table[start][end] + tail);
        }
        best
    }
    best_from(&table, n, 0, penalty)
}

fn cost_of(series: &[f64], changepoints: &[usize], penalty: f64, cost: CostFunction) -> f64 {
    let total = variance(series);
    let mut bounds = vec![0];
    bounds.extend_from_slice(changepoints);
    bounds.push(series.len());
    bounds.windows(2).map(|w| segment_cost(&series[w[0]..w[1]], total, cost)).sum::<f64>() + penalty * changepoints.len() as f64
}

fn same_cost(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

pub fn pelt_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut checked = 0;
    for fixture in 0..200 {
        let n = rng.random_range(2..=30);
        let step_every = rng.random_range(3..12);
        let scale: f64 = rng.random_range(0.2..4.0);
        let round = rng.random_bool(0.2);
        let mut level = 0.0;
        let series: Vec<f64> = (0..n)
            .map(|i| {
                if i % step_every == 0 {
                    level = rng.random_range(-6.0..6.0);
                }
                let v = level + scale * gauss(&mut rng);
                if round {
                    v.round()
                } else {
                    v
                }
            })
            .collect();
        for cost in [CostFunction::MeanNormal, CostFunction::MeanVarNormal] {
            for penalty in [1.0, default_penalty(n), 2.0 * default_penalty(n) + 5.0] {
                let seg = pelt(&series, penalty, cost).map_err(|e| e.to_string())?;
                let optimum = brute_force(&series, penalty, cost);
                let recomputed = cost_of(&series, &seg.changepoints, penalty, cost);
                ensure!(
                    same_cost(seg.cost, optimum) && same_cost(recomputed, optimum),
                    "fixture {fixture} {cost:?} penalty {penalty}: pelt {} at {:?}, optimum {optimum}",
                    seg.cost,
                    seg.changepoints
                );
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} segmentations at the exhaustive optimum"))
}

/// Clamped cubic B-spline basis by the Cox–de Boor recursion.
fn bspline(knots: &[f64], x: f64) -> Vec<f64> {
    let (lo, hi) = (knots[0], knots[knots.len() - 1]);
    let x = x.clamp(lo, hi);
    let m = knots.len() - 1;
    let last = (0..m).rev().find(|&i| knots[i] < knots[i + 1]).unwrap();
    let mut b: Vec<f64> = (0..m)
        .map(|i| f64::from(u8::from((knots[i] <= x && x < knots[i + 1]) || (i == last && x == hi))))
        .collect();
    for d in 1..=3 {
        b = (0..m - d)
            .map(|i| {
                let l = knots[i + d] - knots[i];
                let r = knots[i + d + 1] - knots[i + 1];
                let left = if l > 0.0 { (x - knots[i]) / l * b[i] } else { 0.0 };
                let right = if r > 0.0 { (knots[i + d + 1] - x) / r * b[i + 1] } else { 0.0 };
                left + right
            })
            .collect();
    }
    b
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        x[r] = (b[r] - (r + 1..n).map(|k| a[r][k] * x[k]).sum::<f64>()) / a[r][r];
    }
    x
}

struct Fixture {
    frame: FeatureFrame,
    specs: Vec<TermSpec>,
    lambda: f64,
}

fn hours(n: usize) -> Vec<i64> {
    (0..n as i64).map(|i| 1_500_000_000 + 3600 * i).collect()
}

fn fixture(rng: &mut ChaCha8Rng) -> Fixture {
    let n = rng.random_range(80..250);
    let mut frame = FeatureFrame::new(hours(n));
    let mut specs = Vec::new();
    let mut y: Vec<f64> = (0..n).map(|_| 0.25 * gauss(rng)).collect();
    for j in 0..rng.random_range(1..=2) {
        let name = format!("x{j}");
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a = rng.random_range(0.5..2.0);
        for (yi, xi) in y.iter_mut().zip(&x) {
            *yi += (a * xi).cos() + 0.1 * xi;
        }
        frame.push_column(Column::real(name.clone(), x)).unwrap();
        specs.push(TermSpec::single(name).with_knots(rng.random_range(3..10)));
    }
    if rng.random_bool(0.5) {
        let g: Vec<String> = (0..n).map(|_| ["lo", "mid", "hi"][rng.random_range(0..3)].to_string()).collect();
        for (yi, gi) in y.iter_mut().zip(&g) {
            *yi += match gi.as_str() {
                "lo" => -1.0,
                "mid" => 0.0,
                _ => 1.5,
            };
        }
        frame.push_column(Column::categorical("g", g)).unwrap();
        specs.push(TermSpec::single("g"));
    }
    Fixture {
        frame: frame.with_target(y),
        specs,
        lambda: 10f64.powf(rng.random_range(-2.0..2.0)),
    }
}

/// Normal equations of the penalized least-squares fit with one sum-to-zero
/// constraint per term, solved densely: returns the intercept followed by
/// every term's coefficients on its raw basis.
fn dense_solve(fit: &AdditiveFit, fx: &Fixture) -> Vec<f64> {
    let y = &fx.frame.target().unwrap().values;
    let terms = &fit.model.terms;
    let rows: Vec<Vec<Vec<f64>>> = terms
        .iter()
        .map(|t| {
            let col = fx.frame.column(&t.features[0]).unwrap();
            match t.kind {
                TermKind::Spline1d => col.as_real().unwrap().iter().map(|x| bspline(&t.bases[0].knots, *x)).collect(),
                TermKind::Categorical => col
                    .as_categorical()
                    .unwrap()
                    .iter()
                    .map(|g| t.levels.iter().map(|l| f64::from(u8::from(l == g))).collect())
                    .collect(),
                _ => unreachable!("fixture only has splines and levels"),
            }
        })
        .collect();
    let widths: Vec<usize> = rows.iter().map(|r| r[0].len()).collect();
    let p = 1 + widths.iter().sum::<usize>();
    let size = p + terms.len();
    let mut a = vec![vec![0.0; size]; size];
    let mut b = vec![0.0; size];
    for i in 0..y.len() {
        let mut x = vec![1.0];
        for r in &rows {
            x.extend_from_slice(&r[i]);
        }
        for j in 0..p {
            b[j] += x[j] * y[i];
            for k in 0..p {
                a[j][k] += x[j] * x[k];
            }
        }
    }
    let mut at = 1;
    for (t, &w) in widths.iter().enumerate() {
        if terms[t].kind == TermKind::Spline1d {
            // lambda * D'D with D the second-difference operator.
            for r in 0..w.saturating_sub(2) {
                let d = [(r, 1.0), (r + 1, -2.0), (r + 2, 1.0)];
                for &(i, u) in &d {
                    for &(j, v) in &d {
                        a[at + i][at + j] += fx.lambda * u * v;
                    }
                }
            }
        }
        for j in 0..w {
            let s: f64 = rows[t].iter().map(|r| r[j]).sum();
            a[p + t][at + j] = s;
            a[at + j][p + t] = s;
        }
        at += w;
    }
    let mut sol = solve(a, b);
    sol.truncate(p);
    sol
}

fn fd_gradient(fit: &AdditiveFit) -> f64 {
    let sys = &fit.system;
    (0..sys.theta.len())
        .map(|j| {
            let h = 1e-5 * sys.theta[j].abs().max(1.0);
            let mut up = sys.theta.clone();
            let mut down = sys.theta.clone();
            up[j] += h;
            down[j] -= h;
            ((sys.objective(&up) - sys.objective(&down)) / (2.0 * h)).abs()
        })
        .fold(0.0, f64::max)
}

pub fn penalized_fit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(97);
    let mut worst_coef: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for i in 0..50 {
        let fx = fixture(&mut rng);
        let fit = fit_additive(&fx.frame, &fx.specs, &Lambdas::Shared(fx.lambda), Link::Identity).map_err(|e| e.to_string())?;
        let oracle = dense_solve(&fit, &fx);
        let mut ours = vec![fit.model.intercept];
        for t in &fit.model.terms {
            ours.extend_from_slice(&t.coefficients);
        }
        ensure!(ours.len() == oracle.len(), "fixture {i}: {} coefficients, oracle has {}", ours.len(), oracle.len());
        let diff = ours.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure!(diff < 1e-8, "fixture {i}: coefficients differ by {diff:e}");
        worst_coef = worst_coef.max(diff);

        let g = fd_gradient(&fit);
        ensure!(g < 1e-6, "fixture {i}: identity-link gradient {g:e}");
        worst_grad = worst_grad.max(g);

        // Log link on squared residual-like targets.
        let noise = Normal::new(0.0, 1.0).unwrap();
        let x0 = fx.frame.column("x0").unwrap().as_real().unwrap().to_vec();
        let sq: Vec<f64> = x0.iter().map(|x| ((0.6 + 0.2 * x * x) * noise.sample(&mut rng)).powi(2)).collect();
        let frame = fx.frame.clone().with_target(sq);
        let fit = fit_additive(&frame, &fx.specs, &Lambdas::Shared(fx.lambda), Link::Log).map_err(|e| format!("fixture {i}, lambda {}: log link: {e}", fx.lambda))?;
        let g = fd_gradient(&fit);
        ensure!(g < 1e-6, "fixture {i}: log-link gradient {g:e}");
        worst_grad = worst_grad.max(g);
    }
    Ok(format!("coefficient error {worst_coef:.1e}, gradient {worst_grad:.1e}"))
}

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
        for k in &idx[i..=j] {
            r[*k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn draws(rng: &mut ChaCha8Rng, n: usize, sd: impl Fn(f64) -> f64) -> (Vec<f64>, Vec<f64>) {
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let y = x.iter().map(|&x| 2.0 * (2.0 * PI * x).sin() + sd(x) * gauss(rng)).collect();
    (x, y)
}

fn x_frame(x: Vec<f64>, y: Option<Vec<f64>>) -> FeatureFrame {
    let f = FeatureFrame::new(hours(x.len())).with_column(Column::real("x", x));
    match y {
        Some(y) => f.with_target(y),
        None => f,
    }
}

pub fn gam2_statistics() -> Outcome {
    let config = Gam2Config {
        mean_terms: vec![TermSpec::single("x")],
        variance_terms: vec![TermSpec::single("x")],
        ..Gam2Config::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(555);

    let (x, y) = draws(&mut rng, 5000, |_| 1.5);
    let art = fit_gam2(&x_frame(x, Some(y)), &config).map_err(|e| e.to_string())?;
    let probe: Vec<f64> = (0..5000).map(|_| rng.random::<f64>()).collect();
    let out = score(&art, &x_frame(probe, None), 3600).map_err(|e| e.to_string())?;
    let mean_sigma = out.sigma.iter().sum::<f64>() / out.sigma.len() as f64;
    ensure!((mean_sigma / 1.5 - 1.0).abs() <= 0.10, "homoscedastic sigma {mean_sigma:.3}, true 1.5");

    let sd = |x: f64| 0.5 + 2.0 * x;
    let (x, y) = draws(&mut rng, 5000, sd);
    let art = fit_gam2(&x_frame(x, Some(y)), &config).map_err(|e| e.to_string())?;
    let (tx, ty) = draws(&mut rng, 5000, sd);
    let truth: Vec<f64> = tx.iter().map(|&x| sd(x)).collect();
    let out = score(&art, &x_frame(tx, None), 3600).map_err(|e| e.to_string())?;
    let rho = pearson(&ranks(&out.sigma), &ranks(&truth));
    ensure!(rho > 0.8, "spearman {rho:.3}");
    let inside = out
        .mu
        .iter()
        .zip(&out.sigma)
        .zip(&ty)
        .filter(|((m, s), y)| (*y - *m).abs() <= 1.96 * *s)
        .count();
    let coverage = inside as f64 / ty.len() as f64;
    ensure!((0.93..=0.97).contains(&coverage), "coverage {coverage:.4}");
    Ok(format!("sigma {mean_sigma:.3}/1.5, spearman {rho:.3}, coverage {coverage:.4}"))
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}
