use super::TrainError;
use crate::tensor::{Scalar, Tensor};

/// One classical SGD step with coupled weight decay, in place:
///
/// ```text
/// v <- momentum * v + grad + weight_decay * param
/// param <- param - lr * v
/// ```
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    velocity: &mut [Vec<T>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(TrainError::Config(format!(
            "{} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    if !(lr > 0.0) {
        return Err(TrainError::Config(format!("learning rate must be positive, got {lr}")));
    }
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != g.shape() || v.len() != p.numel() {
            return Err(TrainError::Config(format!("shape mismatch: param {:?}, grad {:?}", p.shape(), g.shape())));
        }
        for ((pj, &gj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vj = mu * *vj + gj + wd * *pj;
            *pj -= lr * *vj;
        }
    }
    Ok(())
}

/// Momentum buffers for a fixed parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(sizes: impl IntoIterator<Item = usize>, momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: sizes.into_iter().map(|n| vec![T::zero(); n]).collect() }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<(), TrainError> {
        sgd_step(params, grads, &mut self.velocity, lr, self.momentum, self.weight_decay)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::vector(&[v])
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = scalar(1.5);
        let mut v = vec![vec![0.0]];
        sgd_step(&mut [&mut p], &[scalar(0.0)], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.data(), &[1.5]);
    }

    #[test]
    fn single_plain_step() {
        let mut p = scalar(1.0);
        let mut v = vec![vec![0.0]];
        sgd_step(&mut [&mut p], &[scalar(1.0)], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.data(), &[0.9]);
    }

    #[test]
    fn two_momentum_steps_match_hand_recurrence() {
        // p0 = 1, grads 1.0 then 0.5, lr 0.1, mu 0.9, wd 0.01
        // v1 = 0 + 1.0 + 0.01*1 = 1.01          p1 = 1 - 0.101 = 0.899
        // v2 = 0.9*1.01 + 0.5 + 0.01*0.899 = 1.41799   p2 = 0.899 - 0.141799 = 0.757201
        let mut p = scalar(1.0);
        let mut opt = Sgd::<f64>::new([1], 0.9, 0.01);
        opt.step(&mut [&mut p], &[scalar(1.0)], 0.1).unwrap();
        assert!((p.data()[0] - 0.899).abs() < 1e-15);
        opt.step(&mut [&mut p], &[scalar(0.5)], 0.1).unwrap();
        assert!((p.data()[0] - 0.757201).abs() < 1e-14);
    }

    #[test]
    fn convex_quadratic_descends_monotonically() {
        // f(p) = 0.5 * a * p^2, curvature a = 4, lr < 2/a
        let a = 4.0;
        let mut p = scalar(3.0);
        let mut v = vec![vec![0.0]];
        let mut prev = 0.5 * a * 9.0;
        for _ in 0..50 {
            let g = scalar(a * p.data()[0]);
            sgd_step(&mut [&mut p], &[g], &mut v, 0.45, 0.0, 0.0).unwrap();
            let f = 0.5 * a * p.data()[0].powi(2);
            assert!(f < prev);
            prev = f;
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let mut v = vec![vec![0.0; 2]];
        assert!(sgd_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut v, 0.1, 0.0, 0.0).is_err());
    }
}
