use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub dof: f64,
}

/// One-sample t-test of `samples` against the reference mean `mu0`.
pub fn one_sample_ttest(samples: &[f64], mu0: f64) -> Result<TTest, TrainError> {
    let n = samples.len();
    if n < 2 {
        return Err(TrainError::DegenerateSample(format!("need at least 2 samples, got {n}")));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    if !(var > 0.0) {
        return Err(TrainError::DegenerateSample("sample variance is zero".into()));
    }
    let t = (mean - mu0) / (var.sqrt() / nf.sqrt());
    let dof = nf - 1.0;
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| TrainError::DegenerateSample(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, dof })
}

/// Mean and margin (largest absolute deviation from the mean) of repeated runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: Vec<f64>,
    pub mean: f64,
    pub margin: f64,
}

impl RunSummary {
    pub fn from_runs(runs: &[f64]) -> Result<Self, TrainError> {
        if runs.len() < 2 {
            return Err(TrainError::DegenerateSample(format!("need at least 2 runs, got {}", runs.len())));
        }
        let mean = runs.iter().sum::<f64>() / runs.len() as f64;
        let margin = runs.iter().map(|r| (r - mean).abs()).fold(0.0, f64::max);
        Ok(Self { runs: runs.to_vec(), mean, margin })
    }
}
