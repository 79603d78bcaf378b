//! Component-wise gradient boosting used to select additive terms.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::additive::{centered_learner, Link};
use super::linalg::{cholesky, trace_of_solve};
use super::term::TermSpec;
use super::GamError;
use crate::transform::frame::FeatureFrame;

/// Degrees of freedom of every spline base learner.
pub const BASE_LEARNER_DF: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostConfig {
    pub steps: usize,
    pub step_size: f64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            step_size: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoostTrace {
    /// Candidate index chosen at every step.
    pub path: Vec<usize>,
    /// Selection count per candidate.
    pub counts: Vec<usize>,
}

impl BoostTrace {
    /// Candidates chosen at least once, most frequent first; ties keep the
    /// order of first selection.
    pub fn ranking(&self) -> Vec<usize> {
        let mut chosen: Vec<usize> = Vec::new();
        for &c in &self.path {
            if !chosen.contains(&c) {
                chosen.push(c);
            }
        }
        chosen.sort_by_key(|c| std::cmp::Reverse(self.counts[*c]));
        chosen
    }
}

struct Learner {
    x: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl Learner {
    fn fit(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.x * self.chol.solve(&(self.x.transpose() * u))
    }
}

fn edf(xtx: &DMatrix<f64>, s: &DMatrix<f64>, lambda: f64) -> Option<f64> {
    cholesky(xtx + s * lambda).map(|c| trace_of_solve(&c, xtx))
}

/// Smallest-penalty learner with at most [`BASE_LEARNER_DF`] degrees of
/// freedom.
fn learner(spec: &TermSpec, frame: &FeatureFrame) -> Result<Learner, GamError> {
    let centered = centered_learner(spec, frame)?;
    let xtx = centered.x.transpose() * &centered.x;
    let p = xtx.nrows();
    let scale = (0..p).map(|j| xtx[(j, j)]).sum::<f64>() / p.max(1) as f64;
    let ridge = DMatrix::identity(p, p) * (1e-10 * scale.max(1e-300));
    let penalized = centered.penalty.iter().any(|v| *v != 0.0);

    let mut lambda = 0.0;
    if penalized && edf(&xtx, &(&centered.penalty + &ridge), 0.0).is_none_or(|d| d > BASE_LEARNER_DF) {
        let (mut lo, mut hi) = ((scale * 1e-10).log10(), (scale * 1e10).log10());
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            match edf(&xtx, &centered.penalty, 10f64.powf(mid)) {
                Some(d) if d > BASE_LEARNER_DF => lo = mid,
                _ => hi = mid,
            }
        }
        lambda = 10f64.powf(hi);
    }
    let chol = cholesky(&xtx + &centered.penalty * lambda + ridge).ok_or_else(|| GamError::SingularSystem {
        term: spec.label(),
    })?;
    Ok(Learner { x: centered.x, chol })
}

/// Runs `steps` rounds of component-wise boosting: each round fits every
/// candidate to the current negative gradient and moves `step_size` along
/// the best one (smallest residual sum of squares).
pub fn boost_trace(
    frame: &FeatureFrame,
    candidates: &[TermSpec],
    steps: usize,
    step_size: f64,
    link: Link,
) -> Result<BoostTrace, GamError> {
    let mut trace = BoostTrace {
        path: Vec::with_capacity(steps),
        counts: vec![0; candidates.len()],
    };
    if steps == 0 || candidates.is_empty() {
        return Ok(trace);
    }
    let target = frame.target().ok_or(GamError::MissingTarget)?;
    let y = DVector::from_column_slice(&target.values);
    let learners = candidates
        .iter()
        .map(|c| learner(c, frame))
        .collect::<Result<Vec<_>, _>>()?;

    let offset = match link {
        Link::Identity => y.mean(),
        Link::Log => y.mean().max(f64::MIN_POSITIVE).ln(),
    };
    let mut eta = DVector::from_element(y.len(), offset);
    for _ in 0..steps {
        let u = match link {
            Link::Identity => &y - &eta,
            Link::Log => y.zip_map(&eta, |y, e| y * (-e).exp() - 1.0),
        };
        let (best, fit) = learners
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let fit = l.fit(&u);
                let rss = (&u - &fit).norm_squared();
                (i, fit, rss)
            })
            .min_by(|a, b| a.2.total_cmp(&b.2))
            .map(|(i, fit, _)| (i, fit))
            .expect("at least one candidate");
        eta += fit * step_size;
        trace.path.push(best);
        trace.counts[best] += 1;
    }
    Ok(trace)
}

/// Candidates selected at least once, ordered by selection count.
pub fn boost_select(
    frame: &FeatureFrame,
    candidates: &[TermSpec],
    steps: usize,
    step_size: f64,
    link: Link,
) -> Result<Vec<TermSpec>, GamError> {
    let trace = boost_trace(frame, candidates, steps, step_size, link)?;
    Ok(trace.ranking().into_iter().map(|i| candidates[i].clone()).collect())
}
