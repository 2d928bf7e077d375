use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Feature matrix with optional integer labels for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N x d`
    pub features: Array2<f64>,
    /// Class indices in `0..class_count`, or `None` when unlabeled.
    pub labels: Option<Vec<usize>>,
    pub domain_index: usize,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Option<Vec<usize>>,
        domain_index: usize,
        class_count: usize,
    ) -> Result<Self> {
        let ds = Dataset {
            features,
            labels,
            domain_index,
            class_count,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.nrows() == 0 {
            return Err(Error::Contract("dataset has no rows".into()));
        }
        if let Some((row, _)) = self
            .features
            .outer_iter()
            .enumerate()
            .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Contract(format!("feature row {row} is not finite")));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.features.nrows() {
                return Err(Error::shape(
                    "Dataset",
                    format!("{} labels for {} rows", labels.len(), self.features.nrows()),
                ));
            }
            if let Some(bad) = labels.iter().find(|&&l| l >= self.class_count) {
                return Err(Error::Contract(format!(
                    "label {bad} outside 0..{}",
                    self.class_count
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Contract("dataset is unlabeled".into()))
    }

    /// Copy with labels removed, for handing target data to training code.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            features: self.features.clone(),
            labels: None,
            domain_index: self.domain_index,
            class_count: self.class_count,
        }
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), rows),
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&i| l[i]).collect()),
            domain_index: self.domain_index,
            class_count: self.class_count,
        }
    }

    /// Per-class row counts; empty when unlabeled.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        if let Some(labels) = &self.labels {
            for &l in labels {
                counts[l] += 1;
            }
        }
        counts
    }
}
