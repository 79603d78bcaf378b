use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::basis::{build_basis, difference_penalty, SplineBasis};
use super::GamError;
use crate::transform::frame::{ColumnValues, FeatureFrame};

pub const DEFAULT_KNOTS_1D: usize = 8;
pub const DEFAULT_KNOTS_2D: usize = 5;

/// Requested additive term. The term kind follows from the feature columns:
/// one real column gives a 1-D spline, one categorical column a level
/// effect, one interaction column (or a real and a categorical column) a
/// per-level spline, and two real columns a tensor-product spline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermSpec {
    pub features: Vec<String>,
    /// Interior knots per spline dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots: Option<usize>,
}

impl TermSpec {
    pub fn single(feature: impl Into<String>) -> Self {
        Self {
            features: vec![feature.into()],
            knots: None,
        }
    }

    pub fn pair(a: impl Into<String>, b: impl Into<String>) -> Self {
        Self {
            features: vec![a.into(), b.into()],
            knots: None,
        }
    }

    pub fn with_knots(mut self, knots: usize) -> Self {
        self.knots = Some(knots);
        self
    }

    pub fn label(&self) -> String {
        self.features.join("*")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TermKind {
    #[serde(rename = "SPLINE_1D")]
    Spline1d,
    #[serde(rename = "SPLINE_2D")]
    Spline2d,
    Categorical,
    ByInteraction,
}

/// A fitted (or about to be fitted) additive component `f_j`.
///
/// Coefficients are stored in the full, unconstrained basis; fitting
/// guarantees that the term sums to zero over its training rows (per level
/// for [`TermKind::ByInteraction`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub kind: TermKind,
    pub features: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bases: Vec<SplineBasis>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<String>,
    pub coefficients: Vec<f64>,
    pub penalty_lambda: f64,
}

/// Where a term reads its inputs from in one particular frame.
pub(crate) enum TermInput<'a> {
    Real(&'a [f64]),
    Pair(&'a [f64], &'a [f64]),
    Level(&'a [String]),
    LevelValue(&'a [String], &'a [f64]),
}

/// Per-row evaluation flags.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RowFlags {
    pub clamped: bool,
    pub unseen_level: bool,
}

fn distinct_count(values: &[f64]) -> usize {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

fn auto_basis(feature: &str, values: &[f64], requested: Option<usize>, default: usize) -> Result<SplineBasis, GamError> {
    let knots = match requested {
        Some(k) => k,
        None => default.min(distinct_count(values).saturating_sub(2)),
    };
    build_basis(feature, values, knots)
}

fn sorted_levels(values: &[String]) -> Vec<String> {
    let mut levels: Vec<String> = values.to_vec();
    levels.sort();
    levels.dedup();
    levels
}

impl Term {
    /// Builds bases and level sets from the (complete) training frame.
    /// Coefficients start at zero.
    pub fn from_spec(spec: &TermSpec, frame: &FeatureFrame) -> Result<Term, GamError> {
        let lookup = |name: &str| {
            frame
                .column(name)
                .map(|c| &c.values)
                .ok_or_else(|| GamError::MissingFeature(name.to_string()))
        };
        let mut term = match spec.features.as_slice() {
            [a] => match lookup(a)? {
                ColumnValues::Real { values } => Term {
                    kind: TermKind::Spline1d,
                    features: vec![a.clone()],
                    bases: vec![auto_basis(a, values, spec.knots, DEFAULT_KNOTS_1D)?],
                    levels: vec![],
                    coefficients: vec![],
                    penalty_lambda: 0.0,
                },
                ColumnValues::Categorical { values } => Term {
                    kind: TermKind::Categorical,
                    features: vec![a.clone()],
                    bases: vec![],
                    levels: sorted_levels(values),
                    coefficients: vec![],
                    penalty_lambda: 0.0,
                },
                ColumnValues::Interaction { levels, values } => Term {
                    kind: TermKind::ByInteraction,
                    features: vec![a.clone()],
                    bases: vec![auto_basis(a, values, spec.knots, DEFAULT_KNOTS_1D)?],
                    levels: sorted_levels(levels),
                    coefficients: vec![],
                    penalty_lambda: 0.0,
                },
            },
            [a, b] => match (lookup(a)?, lookup(b)?) {
                (ColumnValues::Real { values: x }, ColumnValues::Real { values: z }) => Term {
                    kind: TermKind::Spline2d,
                    features: vec![a.clone(), b.clone()],
                    bases: vec![
                        auto_basis(a, x, spec.knots, DEFAULT_KNOTS_2D)?,
                        auto_basis(b, z, spec.knots, DEFAULT_KNOTS_2D)?,
                    ],
                    levels: vec![],
                    coefficients: vec![],
                    penalty_lambda: 0.0,
                },
                (ColumnValues::Real { values }, ColumnValues::Categorical { values: cats }) => Term {
                    kind: TermKind::ByInteraction,
                    features: vec![a.clone(), b.clone()],
                    bases: vec![auto_basis(a, values, spec.knots, DEFAULT_KNOTS_1D)?],
                    levels: sorted_levels(cats),
                    coefficients: vec![],
                    penalty_lambda: 0.0,
                },
                (ColumnValues::Categorical { values: cats }, ColumnValues::Real { values }) => Term {
                    kind: TermKind::ByInteraction,
                    features: vec![b.clone(), a.clone()],
                    bases: vec![auto_basis(b, values, spec.knots, DEFAULT_KNOTS_1D)?],
                    levels: sorted_levels(cats),
                    coefficients: vec![],
                    penalty_lambda: 0.0,
                },
                _ => {
                    return Err(GamError::InvalidSpec(format!(
                        "term `{}` combines unsupported column kinds",
                        spec.label()
                    )))
                }
            },
            _ => {
                return Err(GamError::InvalidSpec(format!(
                    "term `{}` must name one or two features",
                    spec.label()
                )))
            }
        };
        term.coefficients = vec![0.0; term.dim()];
        Ok(term)
    }

    pub fn label(&self) -> String {
        self.features.join("*")
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            TermKind::Spline1d => self.bases[0].num_basis(),
            TermKind::Spline2d => self.bases[0].num_basis() * self.bases[1].num_basis(),
            TermKind::Categorical => self.levels.len(),
            TermKind::ByInteraction => self.levels.len() * self.bases[0].num_basis(),
        }
    }

    /// Coefficient ranges that each carry their own sum-to-zero constraint.
    pub fn blocks(&self) -> Vec<Range<usize>> {
        match self.kind {
            TermKind::ByInteraction => {
                let k = self.bases[0].num_basis();
                (0..self.levels.len()).map(|l| l * k..(l + 1) * k).collect()
            }
            _ => vec![0..self.dim()],
        }
    }

    /// Unscaled penalty matrix over the full coefficient vector.
    pub fn penalty(&self) -> DMatrix<f64> {
        let dim = self.dim();
        match self.kind {
            TermKind::Spline1d => difference_penalty(dim),
            TermKind::Categorical => DMatrix::zeros(dim, dim),
            TermKind::Spline2d => {
                let k1 = self.bases[0].num_basis();
                let k2 = self.bases[1].num_basis();
                let s1 = difference_penalty(k1);
                let s2 = difference_penalty(k2);
                s1.kronecker(&DMatrix::identity(k2, k2)) + DMatrix::identity(k1, k1).kronecker(&s2)
            }
            TermKind::ByInteraction => {
                let k = self.bases[0].num_basis();
                let s = difference_penalty(k);
                let mut out = DMatrix::zeros(dim, dim);
                for block in self.blocks() {
                    out.view_mut((block.start, block.start), (k, k)).copy_from(&s);
                }
                out
            }
        }
    }

    /// Sum of squared second differences of the coefficients, per the
    /// term's penalty.
    pub fn roughness(&self) -> f64 {
        let c = nalgebra::DVector::from_column_slice(&self.coefficients);
        (c.transpose() * self.penalty() * &c)[(0, 0)]
    }

    pub(crate) fn bind<'a>(&self, frame: &'a FeatureFrame) -> Result<TermInput<'a>, GamError> {
        let col = |name: &str| {
            frame
                .column(name)
                .map(|c| &c.values)
                .ok_or_else(|| GamError::MissingFeature(name.to_string()))
        };
        let wrong = |name: &str| GamError::InvalidSpec(format!("column `{name}` has the wrong kind for term `{}`", self.label()));
        Ok(match self.kind {
            TermKind::Spline1d => match col(&self.features[0])? {
                ColumnValues::Real { values } => TermInput::Real(values),
                _ => return Err(wrong(&self.features[0])),
            },
            TermKind::Spline2d => match (col(&self.features[0])?, col(&self.features[1])?) {
                (ColumnValues::Real { values: a }, ColumnValues::Real { values: b }) => TermInput::Pair(a, b),
                _ => return Err(wrong(&self.features[0])),
            },
            TermKind::Categorical => match col(&self.features[0])? {
                ColumnValues::Categorical { values } => TermInput::Level(values),
                _ => return Err(wrong(&self.features[0])),
            },
            TermKind::ByInteraction if self.features.len() == 1 => match col(&self.features[0])? {
                ColumnValues::Interaction { levels, values } => TermInput::LevelValue(levels, values),
                _ => return Err(wrong(&self.features[0])),
            },
            TermKind::ByInteraction => match (col(&self.features[0])?, col(&self.features[1])?) {
                (ColumnValues::Real { values }, ColumnValues::Categorical { values: levels }) => {
                    TermInput::LevelValue(levels, values)
                }
                _ => return Err(wrong(&self.features[1])),
            },
        })
    }

    /// Appends the non-zero design entries `(column, value)` of `row`.
    pub(crate) fn design_row(&self, input: &TermInput<'_>, row: usize, out: &mut Vec<(usize, f64)>) -> RowFlags {
        let mut flags = RowFlags::default();
        match input {
            TermInput::Real(x) => {
                let basis = &self.bases[0];
                flags.clamped = !basis.in_domain(x[row]);
                let (first, values) = basis.evaluate(x[row]);
                out.extend(values.iter().enumerate().map(|(j, v)| (first + j, *v)));
            }
            TermInput::Pair(a, b) => {
                let (ba, bb) = (&self.bases[0], &self.bases[1]);
                flags.clamped = !ba.in_domain(a[row]) || !bb.in_domain(b[row]);
                let (fa, va) = ba.evaluate(a[row]);
                let (fb, vb) = bb.evaluate(b[row]);
                let k2 = bb.num_basis();
                for (i, x) in va.iter().enumerate() {
                    for (j, z) in vb.iter().enumerate() {
                        out.push(((fa + i) * k2 + fb + j, x * z));
                    }
                }
            }
            TermInput::Level(levels) => match self.levels.binary_search(&levels[row]) {
                Ok(l) => out.push((l, 1.0)),
                Err(_) => flags.unseen_level = true,
            },
            TermInput::LevelValue(levels, x) => match self.levels.binary_search(&levels[row]) {
                Ok(l) => {
                    let basis = &self.bases[0];
                    flags.clamped = !basis.in_domain(x[row]);
                    let (first, values) = basis.evaluate(x[row]);
                    let offset = l * basis.num_basis();
                    out.extend(values.iter().enumerate().map(|(j, v)| (offset + first + j, *v)));
                }
                Err(_) => flags.unseen_level = true,
            },
        }
        flags
    }
}
