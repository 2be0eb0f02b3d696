use rand_distr::{Distribution, StandardNormal};

use super::{DataError, LabeledDataset, Normalization};
use crate::rng::{stream_rng, Stream};

/// Quantization step: one unit of blob space is this many pixel levels.
pub const SYNTH_SCALE: f64 = 8.0;
const ZERO_LEVEL: f64 = 128.0;

/// `K` unit-variance Gaussian clusters in `dim` dimensions. Class `k` is
/// centred at `separation / sqrt(2) * e_k`, so every pair of centres is
/// exactly `separation` apart. Samples are interleaved by class and
/// quantized to bytes (`128 + 8 * x`) so the set travels through the same
/// pipeline (and IDX files) as image data; the attached normalization maps
/// bytes back to blob coordinates.
pub fn synth_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset, DataError> {
    synth_blobs_stream(classes, per_class, dim, separation, seed, 0)
}

/// Independent train and test draws from the same cluster layout.
pub fn synth_blobs_split(
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    Ok((
        synth_blobs_stream(classes, train_per_class, dim, separation, seed, 0)?,
        synth_blobs_stream(classes, test_per_class, dim, separation, seed, 1)?,
    ))
}

fn synth_blobs_stream(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
    index: u64,
) -> Result<LabeledDataset, DataError> {
    if classes < 2 {
        return Err(DataError::Config(format!("need at least 2 classes, got {classes}")));
    }
    if dim < classes {
        return Err(DataError::Config(format!("dim {dim} must be >= class count {classes}")));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(DataError::Config(format!("separation must be >= 0, got {separation}")));
    }
    if per_class == 0 {
        return Err(DataError::Config("per_class must be positive".into()));
    }
    let offset = separation / std::f64::consts::SQRT_2;
    let mut rng = stream_rng(seed, Stream::Synth, index);
    let n = classes * per_class;
    let mut pixels = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        for d in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            let x = z + if d == k { offset } else { 0.0 };
            pixels.push((ZERO_LEVEL + SYNTH_SCALE * x).round().clamp(0.0, 255.0) as u8);
        }
    }
    let norm = Normalization { mean: vec![ZERO_LEVEL / 255.0], std: vec![SYNTH_SCALE / 255.0] };
    LabeledDataset::new((1, dim, 1), pixels, labels, classes, norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_bytes() {
        let a = synth_blobs(3, 20, 5, 6.0, 9).unwrap();
        let b = synth_blobs(3, 20, 5, 6.0, 9).unwrap();
        let c = synth_blobs(3, 20, 5, 6.0, 10).unwrap();
        assert_eq!(a.pixels(), b.pixels());
        assert_ne!(a.pixels(), c.pixels());
        assert_eq!(a.len(), 60);
        assert_eq!(a.labels()[..4], [0, 1, 2, 0]);
    }

    #[test]
    fn normalization_recovers_coordinates() {
        let ds = synth_blobs(2, 500, 2, 10.0, 1).unwrap();
        let norm = ds.normalization();
        let mut mean0 = [0.0; 2];
        for i in (0..ds.len()).filter(|&i| ds.labels()[i] == 0) {
            for (d, m) in mean0.iter_mut().enumerate() {
                *m += norm.apply(ds.image(i)[d], 0) / 500.0;
            }
        }
        let want = 10.0 / std::f64::consts::SQRT_2;
        assert!((mean0[0] - want).abs() < 0.15, "{mean0:?}");
        assert!(mean0[1].abs() < 0.15, "{mean0:?}");
    }

    #[test]
    fn config_errors() {
        assert!(synth_blobs(1, 10, 4, 1.0, 0).is_err());
        assert!(synth_blobs(5, 10, 4, 1.0, 0).is_err());
        assert!(synth_blobs(2, 10, 4, -1.0, 0).is_err());
    }
}
