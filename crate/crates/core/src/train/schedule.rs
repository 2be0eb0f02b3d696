use super::TrainError;

/// Cosine annealing from `lr_init` at `t = 0` to `lr_final` at `t = total`:
/// `lr_final + (lr_init - lr_final) * (1 + cos(pi * t / total)) / 2`.
///
/// Both endpoints are returned exactly and interior values are clamped to
/// `[lr_final, lr_init]`, so the sequence is nonincreasing in `t`.
pub fn cosine_lr(t: usize, total: usize, lr_init: f64, lr_final: f64) -> Result<f64, TrainError> {
    if total == 0 {
        return Err(TrainError::Config("schedule length must be positive".into()));
    }
    if t > total {
        return Err(TrainError::Config(format!("step {t} beyond schedule length {total}")));
    }
    if t == 0 {
        return Ok(lr_init);
    }
    if t == total {
        return Ok(lr_final);
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    let lr = lr_final + 0.5 * (lr_init - lr_final) * (1.0 + phase.cos());
    Ok(lr.clamp(lr_final.min(lr_init), lr_init.max(lr_final)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 0.1, 1e-5).unwrap(), 0.1);
        assert_eq!(cosine_lr(100, 100, 0.1, 1e-5).unwrap(), 1e-5);
        assert!((cosine_lr(50, 100, 0.1, 1e-5).unwrap() - 0.050005).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 0.1, 1e-5).is_err());
        assert!(cosine_lr(0, 0, 0.1, 1e-5).is_err());
    }

    #[test]
    fn nonincreasing() {
        let total = 997;
        let lrs: Vec<f64> = (0..=total).map(|t| cosine_lr(t, total, 0.1, 1e-5).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
