use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Scalar, Tensor};

/// He (Kaiming) normal init: `N(0, sqrt(2 / fan_in))`. Samples are drawn in
/// `f64` and rounded, so `f32` and `f64` models share one parameter stream.
pub fn he_init<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    assert!(fan_in > 0, "fan_in must be positive");
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/product agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn empirical_std_matches() {
        for fan_in in [2usize, 9, 784] {
            let t: Tensor<f64> = he_init(&[100_000], fan_in, &mut stream_rng(11, Stream::Init, fan_in as u64));
            let n = t.numel() as f64;
            let mean = t.data().iter().sum::<f64>() / n;
            let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let want = (2.0 / fan_in as f64).sqrt();
            assert!((var.sqrt() / want - 1.0).abs() < 0.02, "fan_in {fan_in}: {} vs {want}", var.sqrt());
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let a: Tensor<f32> = he_init(&[64], 3, &mut stream_rng(1, Stream::Init, 0));
        let b: Tensor<f32> = he_init(&[64], 3, &mut stream_rng(1, Stream::Init, 0));
        assert_eq!(a.data(), b.data());
    }
}
