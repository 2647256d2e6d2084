//! Datasets, stratified splits, and the episodic sampler.

mod blobs;
mod episode;
pub mod idx;
mod split;

pub use blobs::{make_blobs, BlobSpec};
pub use episode::{sample_episode, Episode};
pub use idx::load_idx;
pub use split::{holdout, split, SplitSpec};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Feature matrix with class labels in `[0, num_classes)`.
///
/// Every class owns at least one row and features lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    class_index: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(v) = features.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!(
                "features must lie in [0, 1], found {v}"
            )));
        }
        let mut class_index = vec![Vec::new(); num_classes];
        for (row, &y) in labels.iter().enumerate() {
            class_index
                .get_mut(y)
                .ok_or_else(|| Error::Consistency(format!("label {y} >= class count {num_classes}")))?
                .push(row);
        }
        if let Some(empty) = class_index.iter().position(Vec::is_empty) {
            return Err(Error::Consistency(format!("class {empty} has no samples")));
        }
        Ok(Self {
            features,
            labels,
            class_index,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Sorted row indices of class `k`.
    pub fn class_rows(&self, k: usize) -> &[usize] {
        &self.class_index[k]
    }

    /// New dataset made of the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let features = self.features.select_rows(rows)?;
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Self::new(features, labels, self.num_classes())
    }

    /// SHA-256 over shape, feature bits and labels; identifies the exact data
    /// an experiment arm saw.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for d in self.features.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in self.features.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        for y in &self.labels {
            h.update((*y as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
