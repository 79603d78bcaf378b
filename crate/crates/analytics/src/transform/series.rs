use serde::{Deserialize, Serialize};

/// A numeric series where individual values can be marked missing.
///
/// Missing slots keep whatever value they had; every consumer must consult
/// the mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedSeries {
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
}

impl MaskedSeries {
    pub fn new(values: Vec<f64>) -> Self {
        let missing = values.iter().map(|v| !v.is_finite()).collect();
        Self { values, missing }
    }

    pub fn with_mask(values: Vec<f64>, missing: Vec<bool>) -> Self {
        assert_eq!(values.len(), missing.len(), "mask length must match values");
        Self { values, missing }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_present(&self, index: usize) -> bool {
        !self.missing[index]
    }

    pub fn present_count(&self) -> usize {
        self.missing.iter().filter(|m| !**m).count()
    }

    /// Indices of the non-missing values, ascending.
    pub fn present_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.missing[i]).collect()
    }

    pub fn present_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.missing)
            .filter(|(_, m)| !**m)
            .map(|(v, _)| *v)
            .collect()
    }

    pub fn get(&self, index: usize) -> Option<f64> {
        if self.missing[index] {
            None
        } else {
            Some(self.values[index])
        }
    }
}
