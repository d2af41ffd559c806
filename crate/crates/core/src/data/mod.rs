//! Datasets: MNIST in IDX form, captured gradients in GDS1 form, and seeded
//! mini-batch sampling.

mod batch;
mod gds;
mod idx;

pub use batch::BatchSampler;
pub use gds::{load_gradients, save_gradients, GradientDataset, GradientMetadata, GDS_MAGIC};
pub use idx::{
    encode_idx_images, encode_idx_labels, load_mnist, IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected}, found {found}")]
    BadMagic { expected: String, found: String },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("file truncated at byte {offset} (needed {needed} more bytes)")]
    TruncatedFile { offset: u64, needed: u64 },
    #[error("label {label} at index {index} is outside [0, {num_classes})")]
    InvalidLabel {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("invalid batch size {batch_size} for {len} examples")]
    InvalidBatchSize { batch_size: usize, len: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("bad metadata: {0}")]
    Metadata(#[from] serde_json::Error),
}

/// Labelled examples with features in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    num_features: usize,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        num_features: usize,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if labels.is_empty() || num_features == 0 || num_classes == 0 {
            return Err(DataError::Invalid("dataset must be non-empty".into()));
        }
        if features.len() != labels.len() * num_features {
            return Err(DataError::Invalid(format!(
                "{} feature values for {} examples of width {num_features}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(i) = features.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::Invalid(format!(
                "feature value {} at flat index {i} is outside [0, 1]",
                features[i]
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DataError::InvalidLabel {
                index,
                label,
                num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            num_features,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// The first `n` examples (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            features: self.features[..n * self.num_features].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_features: self.num_features,
            num_classes: self.num_classes,
        }
    }

    /// Examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.num_features);
        for &i in indices {
            features.extend_from_slice(self.features(i));
        }
        Self {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_features: self.num_features,
            num_classes: self.num_classes,
        }
    }
}
