use serde::{Deserialize, Serialize};

use super::series::MaskedSeries;
use super::TransformError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ColumnValues {
    Real { values: Vec<f64> },
    Categorical { values: Vec<String> },
    /// A continuous value tagged with a categorical level; additive models
    /// fit a separate smooth per level.
    Interaction { levels: Vec<String>, values: Vec<f64> },
}

impl ColumnValues {
    pub fn len(&self) -> usize {
        match self {
            ColumnValues::Real { values } => values.len(),
            ColumnValues::Categorical { values } => values.len(),
            ColumnValues::Interaction { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Self {
        match self {
            ColumnValues::Real { values } => ColumnValues::Real {
                values: rows.iter().map(|&i| values[i]).collect(),
            },
            ColumnValues::Categorical { values } => ColumnValues::Categorical {
                values: rows.iter().map(|&i| values[i].clone()).collect(),
            },
            ColumnValues::Interaction { levels, values } => ColumnValues::Interaction {
                levels: rows.iter().map(|&i| levels[i].clone()).collect(),
                values: rows.iter().map(|&i| values[i]).collect(),
            },
        }
    }
}

/// One named feature column. Missing slots hold `0.0` or an empty level so
/// that no column ever carries a non-finite value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub values: ColumnValues,
    pub missing: Vec<bool>,
}

impl Column {
    pub fn real(name: impl Into<String>, values: Vec<f64>) -> Self {
        let missing = values.iter().map(|v| !v.is_finite()).collect::<Vec<_>>();
        let values = values.into_iter().map(|v| if v.is_finite() { v } else { 0.0 }).collect();
        Self {
            name: name.into(),
            values: ColumnValues::Real { values },
            missing,
        }
    }

    pub fn from_masked(name: impl Into<String>, series: &MaskedSeries) -> Self {
        let values = series
            .values
            .iter()
            .zip(&series.missing)
            .map(|(v, m)| if *m || !v.is_finite() { f64::NAN } else { *v })
            .collect();
        Self::real(name, values)
    }

    pub fn categorical(name: impl Into<String>, values: Vec<String>) -> Self {
        let missing = values.iter().map(|v| v.is_empty()).collect();
        Self {
            name: name.into(),
            values: ColumnValues::Categorical { values },
            missing,
        }
    }

    pub fn len(&self) -> usize {
        self.missing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn as_real(&self) -> Option<&[f64]> {
        match &self.values {
            ColumnValues::Real { values } => Some(values),
            _ => None,
        }
    }

    pub fn as_categorical(&self) -> Option<&[String]> {
        match &self.values {
            ColumnValues::Categorical { values } => Some(values),
            _ => None,
        }
    }
}

/// Rows of timestamped features, optionally with the target being
/// forecast. All columns share the row count of `timestamps`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureFrame {
    timestamps: Vec<i64>,
    columns: Vec<Column>,
    target: Option<MaskedSeries>,
}

impl FeatureFrame {
    pub fn new(timestamps: Vec<i64>) -> Self {
        Self {
            timestamps,
            columns: Vec::new(),
            target: None,
        }
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// Adds or replaces a column.
    pub fn push_column(&mut self, column: Column) -> Result<(), TransformError> {
        if column.len() != self.len() || column.values.len() != self.len() {
            return Err(TransformError::LengthMismatch {
                name: column.name,
                expected: self.len(),
                actual: column.values.len(),
            });
        }
        if let Some(existing) = self.columns.iter_mut().find(|c| c.name == column.name) {
            *existing = column;
        } else {
            self.columns.push(column);
        }
        Ok(())
    }

    pub fn with_column(mut self, column: Column) -> Self {
        self.push_column(column).expect("column length must match frame");
        self
    }

    pub fn target(&self) -> Option<&MaskedSeries> {
        self.target.as_ref()
    }

    pub fn set_target(&mut self, target: Option<MaskedSeries>) -> Result<(), TransformError> {
        if let Some(t) = &target {
            if t.len() != self.len() {
                return Err(TransformError::LengthMismatch {
                    name: "target".into(),
                    expected: self.len(),
                    actual: t.len(),
                });
            }
        }
        self.target = target;
        Ok(())
    }

    pub fn with_target(mut self, values: Vec<f64>) -> Self {
        self.set_target(Some(MaskedSeries::new(values))).expect("target length must match frame");
        self
    }

    /// Rows where every named column (and the target, if `with_target`) is
    /// present. Unknown column names make every row incomplete.
    pub fn complete_rows(&self, names: &[&str], with_target: bool) -> Vec<bool> {
        let mut ok = vec![true; self.len()];
        for name in names {
            match self.column(name) {
                Some(col) => {
                    for (flag, m) in ok.iter_mut().zip(&col.missing) {
                        *flag &= !m;
                    }
                }
                None => ok.iter_mut().for_each(|f| *f = false),
            }
        }
        if with_target {
            match &self.target {
                Some(t) => {
                    for (flag, m) in ok.iter_mut().zip(&t.missing) {
                        *flag &= !m;
                    }
                }
                None => ok.iter_mut().for_each(|f| *f = false),
            }
        }
        ok
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureFrame {
        FeatureFrame {
            timestamps: rows.iter().map(|&i| self.timestamps[i]).collect(),
            columns: self
                .columns
                .iter()
                .map(|c| Column {
                    name: c.name.clone(),
                    values: c.values.select(rows),
                    missing: rows.iter().map(|&i| c.missing[i]).collect(),
                })
                .collect(),
            target: self.target.as_ref().map(|t| MaskedSeries {
                values: rows.iter().map(|&i| t.values[i]).collect(),
                missing: rows.iter().map(|&i| t.missing[i]).collect(),
            }),
        }
    }

    pub fn filter_rows(&self, keep: &[bool]) -> FeatureFrame {
        let rows: Vec<usize> = keep.iter().enumerate().filter(|(_, k)| **k).map(|(i, _)| i).collect();
        self.select_rows(&rows)
    }
}
