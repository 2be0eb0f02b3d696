//! Datasets: MNIST IDX files, CIFAR-100 binary records, synthetic Gaussian
//! blobs, and deterministic shuffled batching.

mod batch;
mod cifar;
mod idx;
mod synth;

use thiserror::Error;

pub use batch::{batches, Augment, BatchOptions, Batches, LabeledBatch};
pub use cifar::{parse_cifar100, parse_cifar100_bytes, CIFAR100_CLASSES, CIFAR_RECORD_LEN};
pub use idx::{parse_idx, parse_idx_bytes, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synth::{synth_blobs, synth_blobs_split, SYNTH_SCALE};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("truncated {what}: expected {expected} bytes, found {found}")]
    Truncated { what: &'static str, expected: usize, found: usize },
    #[error("format error in {field}: {detail}")]
    Format { field: &'static str, detail: String },
    #[error("inconsistent dataset: {0}")]
    Consistency(String),
    #[error("config error: {0}")]
    Config(String),
}

/// Per-channel affine normalization applied after scaling pixels to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn mnist() -> Self {
        Self { mean: vec![0.1307], std: vec![0.3081] }
    }

    pub fn cifar100() -> Self {
        Self { mean: vec![0.5071, 0.4865, 0.4409], std: vec![0.2673, 0.2564, 0.2762] }
    }

    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    #[inline]
    pub fn apply(&self, pixel: u8, channel: usize) -> f64 {
        (pixel as f64 / 255.0 - self.mean[channel]) / self.std[channel]
    }
}

/// Images stored as contiguous `H x W x C` u8 arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
    class_count: usize,
    normalization: Normalization,
}

impl LabeledDataset {
    pub fn new(
        (height, width, channels): (usize, usize, usize),
        pixels: Vec<u8>,
        labels: Vec<usize>,
        class_count: usize,
        normalization: Normalization,
    ) -> Result<Self, DataError> {
        let per = height * width * channels;
        if per == 0 {
            return Err(DataError::Consistency("zero-sized images".into()));
        }
        if pixels.len() != per * labels.len() {
            return Err(DataError::Consistency(format!(
                "{} pixel bytes for {} images of {}x{}x{}",
                pixels.len(),
                labels.len(),
                height,
                width,
                channels
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(DataError::Consistency(format!("label {bad} >= class count {class_count}")));
        }
        if normalization.mean.len() != channels || normalization.std.len() != channels {
            return Err(DataError::Consistency("normalization does not match channel count".into()));
        }
        Ok(Self { height, width, channels, pixels, labels, class_count, normalization })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Raw `H x W x C` bytes of image `i`.
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Result<Self, DataError> {
        if normalization.mean.len() != self.channels || normalization.std.len() != self.channels {
            return Err(DataError::Consistency("normalization does not match channel count".into()));
        }
        self.normalization = normalization;
        Ok(self)
    }

    /// The first `n` items (or all, if fewer).
    pub fn head(&self, n: usize) -> Self {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Self {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            normalization: self.normalization.clone(),
            ..*self
        }
    }
}
