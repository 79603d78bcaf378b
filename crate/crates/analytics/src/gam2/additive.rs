//! Penalized additive regression, `link(E[y]) = beta + sum_j f_j(x_j)`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::linalg::{cholesky, null_basis, trace_of_solve, weighted_gram};
use super::term::{RowFlags, Term, TermKind, TermSpec};
use super::GamError;
use crate::transform::frame::FeatureFrame;

pub const MIN_ROWS: usize = 20;
pub const MAX_ITERATIONS: usize = 100;
/// Newton iterations stop once the decrement `g' H^-1 g` falls below this
/// fraction of the objective.
pub const DECREMENT_TOLERANCE: f64 = 1e-10;
/// Exponents (base 10) of the GCV grid, relative to the mean diagonal of
/// the Gram matrix.
pub const GCV_GRID: (f64, f64, usize) = (-6.0, 4.0, 20);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Link {
    /// Gaussian mean, fitted by penalized least squares.
    Identity,
    /// Positive response with variance proportional to the squared mean,
    /// fitted by penalized Newton iterations on the quasi-likelihood
    /// `sum(y exp(-eta) + eta)`.
    Log,
}

impl Link {
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Log => eta.exp(),
        }
    }
}

/// Smoothing parameter choice.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Lambdas {
    /// Shared value chosen by generalized cross-validation.
    #[default]
    Gcv,
    Shared(f64),
    PerTerm(Vec<f64>),
}

impl Serialize for Lambdas {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Lambdas::Gcv => serializer.serialize_str("gcv"),
            Lambdas::Shared(v) => serializer.serialize_f64(*v),
            Lambdas::PerTerm(v) => v.serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for Lambdas {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            One(f64),
            Many(Vec<f64>),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Text(s) if s == "gcv" => Ok(Lambdas::Gcv),
            Repr::Text(s) => Err(serde::de::Error::custom(format!("unknown lambda choice `{s}`"))),
            Repr::One(v) => Ok(Lambdas::Shared(v)),
            Repr::Many(v) => Ok(Lambdas::PerTerm(v)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDomain {
    pub feature: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveModel {
    pub intercept: f64,
    pub terms: Vec<Term>,
    pub link: Link,
    pub domains: Vec<FeatureDomain>,
}

impl AdditiveModel {
    /// Feature columns the model reads.
    pub fn features(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.terms {
            for f in &t.features {
                if !out.contains(f) {
                    out.push(f.clone());
                }
            }
        }
        out
    }

    /// `beta + sum_j f_j` per row, with per-row domain flags.
    pub fn linear_predictor(&self, frame: &FeatureFrame) -> Result<(Vec<f64>, Vec<RowFlags>), GamError> {
        let n = frame.len();
        let mut eta = vec![self.intercept; n];
        let mut flags = vec![RowFlags::default(); n];
        let mut entries = Vec::with_capacity(16);
        for term in &self.terms {
            let input = term.bind(frame)?;
            for row in 0..n {
                entries.clear();
                let f = term.design_row(&input, row, &mut entries);
                flags[row].clamped |= f.clamped;
                flags[row].unseen_level |= f.unseen_level;
                eta[row] += entries.iter().map(|(j, v)| v * term.coefficients[*j]).sum::<f64>();
            }
        }
        Ok((eta, flags))
    }

    pub fn predict(&self, frame: &FeatureFrame) -> Result<Vec<f64>, GamError> {
        let (eta, _) = self.linear_predictor(frame)?;
        Ok(eta.into_iter().map(|e| self.link.inverse(e)).collect())
    }

    /// `sum_j lambda_j ||D^2 c_j||^2`.
    pub fn penalty_value(&self) -> f64 {
        self.terms.iter().map(|t| t.penalty_lambda * t.roughness()).sum()
    }
}

/// The reduced (constraint-free) problem solved during fitting, kept so
/// callers can inspect optimality. Column 0 of `design` is the intercept.
#[derive(Debug, Clone)]
pub struct PenalizedSystem {
    pub design: DMatrix<f64>,
    /// Smoothing-parameter-weighted penalty in reduced coordinates.
    pub penalty: DMatrix<f64>,
    pub theta: DVector<f64>,
    pub response: DVector<f64>,
    pub link: Link,
}

impl PenalizedSystem {
    /// Loss plus `theta' S theta`; the quantity the fit minimises.
    pub fn objective(&self, theta: &DVector<f64>) -> f64 {
        let eta = &self.design * theta;
        let penalty = (theta.transpose() * &self.penalty * theta)[(0, 0)];
        loss(self.link, &self.response, &eta) + penalty
    }
}

#[derive(Debug, Clone)]
pub struct AdditiveFit {
    pub model: AdditiveModel,
    /// In-sample predictions on the response scale, computed through
    /// [`AdditiveModel::predict`].
    pub fitted: Vec<f64>,
    pub edf: f64,
    /// GCV score of the chosen smoothing parameter, if one was searched.
    pub gcv: Option<f64>,
    pub iterations: usize,
    pub system: PenalizedSystem,
}

fn loss(link: Link, y: &DVector<f64>, eta: &DVector<f64>) -> f64 {
    match link {
        Link::Identity => y.iter().zip(eta.iter()).map(|(y, e)| (y - e).powi(2)).sum(),
        Link::Log => y.iter().zip(eta.iter()).map(|(y, e)| y * (-e).exp() + e).sum(),
    }
}

struct BlockMap {
    term: usize,
    block: Range<usize>,
    z: DMatrix<f64>,
    column: usize,
}

struct Assembled {
    x: DMatrix<f64>,
    blocks: Vec<BlockMap>,
    /// Unscaled reduced penalty of each term, embedded at full size.
    penalties: Vec<DMatrix<f64>>,
}

pub(crate) fn term_design(term: &Term, frame: &FeatureFrame) -> Result<DMatrix<f64>, GamError> {
    let input = term.bind(frame)?;
    let mut b = DMatrix::zeros(frame.len(), term.dim());
    let mut entries = Vec::with_capacity(16);
    for row in 0..frame.len() {
        entries.clear();
        term.design_row(&input, row, &mut entries);
        for (j, v) in &entries {
            b[(row, *j)] += v;
        }
    }
    Ok(b)
}

/// Centres each block by reparametrising onto the null space of its column
/// sums and stacks `[1 | B_1 Z_1 | ...]`.
fn assemble(terms: &[Term], frame: &FeatureFrame, intercept: bool) -> Result<Assembled, GamError> {
    let n = frame.len();
    let mut columns: Vec<DMatrix<f64>> = Vec::new();
    let mut blocks = Vec::new();
    let mut next = usize::from(intercept);
    let mut raw_penalties = Vec::new();
    for (t, term) in terms.iter().enumerate() {
        let b = term_design(term, frame)?;
        let full_penalty = term.penalty();
        let mut term_blocks = Vec::new();
        for block in term.blocks() {
            let sub = b.columns(block.start, block.len());
            let sums = DVector::from_iterator(block.len(), sub.column_iter().map(|c| c.sum()));
            let z = null_basis(&sums);
            columns.push(sub * &z);
            let reduced = z.transpose()
                * full_penalty.view((block.start, block.start), (block.len(), block.len()))
                * &z;
            term_blocks.push((next, reduced));
            blocks.push(BlockMap {
                term: t,
                block: block.clone(),
                column: next,
                z: z.clone(),
            });
            next += z.ncols();
        }
        raw_penalties.push(term_blocks);
    }
    let p = next;
    let mut x = DMatrix::zeros(n, p);
    if intercept {
        x.column_mut(0).fill(1.0);
    }
    let mut col = usize::from(intercept);
    for c in &columns {
        x.view_mut((0, col), (n, c.ncols())).copy_from(c);
        col += c.ncols();
    }
    let penalties = raw_penalties
        .into_iter()
        .map(|term_blocks| {
            let mut s = DMatrix::zeros(p, p);
            for (at, reduced) in term_blocks {
                s.view_mut((at, at), reduced.shape()).copy_from(&reduced);
            }
            s
        })
        .collect();
    Ok(Assembled { x, blocks, penalties })
}

fn total_penalty(penalties: &[DMatrix<f64>], lambdas: &[f64], p: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(p, p);
    for (pen, l) in penalties.iter().zip(lambdas) {
        s += pen * *l;
    }
    s
}

fn singular(terms: &[Term], asm: &Assembled, a: &DMatrix<f64>) -> GamError {
    for (t, term) in terms.iter().enumerate() {
        let cols: Vec<usize> = asm
            .blocks
            .iter()
            .filter(|b| b.term == t)
            .flat_map(|b| b.column..b.column + b.z.ncols())
            .collect();
        if cols.is_empty() {
            continue;
        }
        let sub = a.select_rows(&cols).select_columns(&cols);
        if cholesky(sub).is_none() {
            return GamError::SingularSystem { term: term.label() };
        }
    }
    GamError::SingularSystem {
        term: terms.last().map(Term::label).unwrap_or_else(|| "intercept".into()),
    }
}

fn gcv_grid(scale: f64) -> Vec<f64> {
    let (lo, hi, count) = GCV_GRID;
    (0..count)
        .map(|i| scale * 10f64.powf(lo + (hi - lo) * i as f64 / (count - 1) as f64))
        .collect()
}

struct Solution {
    theta: DVector<f64>,
    edf: f64,
    iterations: usize,
}

fn solve_identity(
    xtx: &DMatrix<f64>,
    xty: &DVector<f64>,
    s: &DMatrix<f64>,
) -> Option<Solution> {
    let chol = cholesky(xtx + s)?;
    let theta = chol.solve(xty);
    if theta.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let edf = trace_of_solve(&chol, xtx);
    Some(Solution { theta, edf, iterations: 1 })
}

fn finish(theta: DVector<f64>, xtx: &DMatrix<f64>, s: &DMatrix<f64>, iterations: usize) -> Result<Solution, GamError> {
    let chol = cholesky(xtx + s * 2.0).ok_or(GamError::NonConvergence { iterations })?;
    let edf = trace_of_solve(&chol, xtx);
    Ok(Solution { theta, edf, iterations })
}

/// Penalized Newton iterations with step halving. Falls back to the Fisher
/// (expected) Hessian when the observed one is not positive definite.
fn solve_log(
    x: &DMatrix<f64>,
    xtx: &DMatrix<f64>,
    y: &DVector<f64>,
    s: &DMatrix<f64>,
    start: DVector<f64>,
) -> Result<Solution, GamError> {
    let objective = |theta: &DVector<f64>| {
        let eta = x * theta;
        loss(Link::Log, y, &eta) + (theta.transpose() * s * theta)[(0, 0)]
    };
    let mut theta = start;
    let mut current = objective(&theta);
    for iteration in 1..=MAX_ITERATIONS {
        let eta = x * &theta;
        let w = DVector::from_iterator(y.len(), y.iter().zip(eta.iter()).map(|(y, e)| y * (-e).exp()));
        let residual = w.map(|wi| 1.0 - wi);
        let gradient = x.transpose() * residual + (s * &theta) * 2.0;
        let observed = weighted_gram(x, &w) + s * 2.0;
        let step = match cholesky(observed) {
            Some(chol) => -chol.solve(&gradient),
            None => {
                let chol = cholesky(xtx + s * 2.0).ok_or(GamError::NonConvergence { iterations: iteration })?;
                -chol.solve(&gradient)
            }
        };
        let slope = gradient.dot(&step);
        // Newton decrement below tolerance: the full step lands on the
        // optimum, and a line search would only compare rounding noise.
        if -slope < DECREMENT_TOLERANCE * (current.abs() + 0.1) {
            let candidate = &theta + &step;
            if objective(&candidate).is_finite() {
                theta = candidate;
            }
            return finish(theta, xtx, s, iteration);
        }
        let mut t = 1.0;
        let mut candidate = &theta + &step;
        let mut value = objective(&candidate);
        while !(value.is_finite() && value <= current + 1e-4 * t * slope) && t > 1e-12 {
            t *= 0.5;
            candidate = &theta + &step * t;
            value = objective(&candidate);
        }
        if !value.is_finite() {
            return Err(GamError::NonConvergence { iterations: iteration });
        }
        theta = candidate;
        current = value;
        if t < 1e-12 {
            break;
        }
    }
    Err(GamError::NonConvergence {
        iterations: MAX_ITERATIONS,
    })
}

fn check_frame(frame: &FeatureFrame, specs: &[TermSpec]) -> Result<DVector<f64>, GamError> {
    let target = frame.target().ok_or(GamError::MissingTarget)?;
    if target.missing.iter().any(|m| *m) {
        return Err(GamError::MissingValues("target".into()));
    }
    if let Some(i) = target.values.iter().position(|v| !v.is_finite()) {
        return Err(GamError::NonFiniteTarget(i));
    }
    for spec in specs {
        for f in &spec.features {
            let col = frame.column(f).ok_or_else(|| GamError::MissingFeature(f.clone()))?;
            if col.missing.iter().any(|m| *m) {
                return Err(GamError::MissingValues(f.clone()));
            }
        }
    }
    if frame.len() < MIN_ROWS {
        return Err(GamError::TooFewRows {
            rows: frame.len(),
            required: MIN_ROWS,
        });
    }
    Ok(DVector::from_column_slice(&target.values))
}

/// Fits `link(E[y]) = beta + sum_j f_j` by minimising the loss plus
/// `sum_j lambda_j ||D^2 c_j||^2`, each term constrained to sum to zero over
/// the training rows.
pub fn fit_additive(
    frame: &FeatureFrame,
    specs: &[TermSpec],
    lambdas: &Lambdas,
    link: Link,
) -> Result<AdditiveFit, GamError> {
    let y = check_frame(frame, specs)?;
    let n = y.len();
    let mut terms = specs
        .iter()
        .map(|s| Term::from_spec(s, frame))
        .collect::<Result<Vec<_>, _>>()?;
    let asm = assemble(&terms, frame, true)?;
    let p = asm.x.ncols();
    let xtx = asm.x.transpose() * &asm.x;

    let penalized = terms.iter().any(|t| t.kind != TermKind::Categorical);
    let candidates: Vec<Vec<f64>> = match lambdas {
        Lambdas::Shared(v) => vec![vec![*v; terms.len()]],
        Lambdas::PerTerm(v) if v.len() == terms.len() => vec![v.clone()],
        Lambdas::PerTerm(v) => {
            return Err(GamError::InvalidSpec(format!(
                "{} smoothing parameters given for {} terms",
                v.len(),
                terms.len()
            )))
        }
        Lambdas::Gcv if !penalized => vec![vec![0.0; terms.len()]],
        Lambdas::Gcv => {
            let scale = if p > 1 {
                (1..p).map(|j| xtx[(j, j)]).sum::<f64>() / (p - 1) as f64
            } else {
                1.0
            };
            // Large to small so the Newton iterations can warm start.
            gcv_grid(scale.max(f64::MIN_POSITIVE))
                .into_iter()
                .rev()
                .map(|l| vec![l; terms.len()])
                .collect()
        }
    };
    if candidates.iter().flatten().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(GamError::InvalidSpec("smoothing parameters must be finite and non-negative".into()));
    }

    let searching = candidates.len() > 1;
    let mut best: Option<(f64, Vec<f64>, Solution)> = None;
    let mut last_error = None;
    match link {
        Link::Identity => {
            let xty = asm.x.transpose() * &y;
            for lambda in candidates {
                let s = total_penalty(&asm.penalties, &lambda, p);
                let Some(sol) = solve_identity(&xtx, &xty, &s) else {
                    last_error = Some(singular(&terms, &asm, &(&xtx + &s)));
                    continue;
                };
                let rss = (&y - &asm.x * &sol.theta).norm_squared();
                let score = gcv_score(n, rss, sol.edf);
                if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
                    best = Some((score, lambda, sol));
                }
            }
        }
        Link::Log => {
            if y.iter().any(|v| *v < 0.0) {
                return Err(GamError::InvalidSpec("LOG link needs a non-negative response".into()));
            }
            let mean = y.mean();
            if mean <= 0.0 {
                return Err(GamError::InvalidSpec("LOG link needs a response with positive mean".into()));
            }
            let mut start = DVector::zeros(p);
            start[0] = mean.ln();
            for lambda in candidates {
                let s = total_penalty(&asm.penalties, &lambda, p);
                match solve_log(&asm.x, &xtx, &y, &s, start.clone()) {
                    Ok(sol) => {
                        let mu = (&asm.x * &sol.theta).map(f64::exp);
                        let pearson: f64 = y.iter().zip(mu.iter()).map(|(y, m)| ((y - m) / m).powi(2)).sum();
                        let score = gcv_score(n, pearson, sol.edf);
                        start = sol.theta.clone();
                        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
                            best = Some((score, lambda, sol));
                        }
                    }
                    Err(e) => last_error = Some(e),
                }
            }
        }
    }
    let Some((score, lambda, solution)) = best else {
        return Err(last_error.unwrap_or(GamError::NonConvergence { iterations: 0 }));
    };

    for block in &asm.blocks {
        let reduced = solution.theta.rows(block.column, block.z.ncols());
        let full = &block.z * reduced;
        terms[block.term].coefficients[block.block.clone()].copy_from_slice(full.as_slice());
    }
    for (term, l) in terms.iter_mut().zip(&lambda) {
        term.penalty_lambda = *l;
    }
    let domains = domains(&terms);
    let model = AdditiveModel {
        intercept: solution.theta[0],
        terms,
        link,
        domains,
    };
    let fitted = model.predict(frame)?;
    let penalty = total_penalty(&asm.penalties, &lambda, p);
    Ok(AdditiveFit {
        model,
        fitted,
        edf: solution.edf,
        gcv: searching.then_some(score),
        iterations: solution.iterations,
        system: PenalizedSystem {
            design: asm.x,
            penalty,
            theta: solution.theta,
            response: y,
            link,
        },
    })
}

fn gcv_score(n: usize, deviance: f64, edf: f64) -> f64 {
    let denom = n as f64 - edf;
    if denom <= 0.0 {
        f64::INFINITY
    } else {
        n as f64 * deviance / (denom * denom)
    }
}

fn domains(terms: &[Term]) -> Vec<FeatureDomain> {
    let mut out: Vec<FeatureDomain> = Vec::new();
    for term in terms {
        for (i, feature) in term.features.iter().enumerate() {
            if out.iter().any(|d| &d.feature == feature) {
                continue;
            }
            let basis = match term.kind {
                TermKind::Categorical => None,
                TermKind::ByInteraction if i > 0 => None,
                _ => term.bases.get(i),
            };
            let is_level = matches!(term.kind, TermKind::Categorical) || (term.kind == TermKind::ByInteraction && i > 0);
            out.push(FeatureDomain {
                feature: feature.clone(),
                min: basis.map(|b| b.domain().0),
                max: basis.map(|b| b.domain().1),
                categories: if is_level { term.levels.clone() } else { Vec::new() },
            });
        }
    }
    out
}

/// Design of a single centred term without intercept, used by the boosting
/// base learners.
pub(crate) struct CenteredLearner {
    pub x: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
}

pub(crate) fn centered_learner(spec: &TermSpec, frame: &FeatureFrame) -> Result<CenteredLearner, GamError> {
    let term = Term::from_spec(spec, frame)?;
    let asm = assemble(std::slice::from_ref(&term), frame, false)?;
    let penalty = asm.penalties.into_iter().next().unwrap_or_else(|| DMatrix::zeros(0, 0));
    Ok(CenteredLearner {
        x: asm.x,
        penalty,
    })
}
