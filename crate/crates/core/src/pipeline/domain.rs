use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::factors::FactorMatrix;

/// One side of a transfer pair: an `n x m` feature matrix with optional
/// class labels in `[0, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    features: DMatrix<f64>,
    labels: Option<Vec<usize>>,
    name: String,
}

impl Domain {
    pub fn new(features: DMatrix<f64>, labels: Option<Vec<usize>>, name: impl Into<String>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.nrows() {
                return Err(Error::shape(format!(
                    "{} labels for {} rows",
                    l.len(),
                    features.nrows()
                )));
            }
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("domain features".into()));
        }
        Ok(Self {
            features,
            labels,
            name: name.into(),
        })
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Number of classes implied by the labels (`max + 1`), zero if unlabeled.
    pub fn class_count(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max().map(|m| m + 1))
            .unwrap_or(0)
    }

    pub fn embed(&self, w: &FactorMatrix) -> DMatrix<f64> {
        &self.features * w.as_matrix()
    }

    pub(crate) fn require_labels(&self) -> Result<&[usize]> {
        self.labels()
            .ok_or_else(|| Error::invalid(format!("domain `{}` has no labels", self.name)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_length_checked() {
        assert!(Domain::new(DMatrix::zeros(3, 2), Some(vec![0, 1]), "x").is_err());
        let d = Domain::new(DMatrix::zeros(3, 2), Some(vec![0, 2, 1]), "x").unwrap();
        assert_eq!(d.class_count(), 3);
        assert_eq!(Domain::new(DMatrix::zeros(3, 2), None, "y").unwrap().class_count(), 0);
    }
}
