use super::{Graph, Tensor, TensorError, Var};

/// Sample points whose nearest kink (relu input, max runner-up) is closer
/// than this are not checked.
pub const KINK_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over entries of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// Per-parameter maximum of the same quantity.
    pub per_param: Vec<f64>,
    /// The sample point sat too close to a non-differentiable point.
    pub skipped: bool,
    pub kink_margin: f64,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        !self.skipped && self.max_rel_error <= tol
    }
}

fn eval<F>(f: &F, params: &[Tensor<f64>]) -> Result<(Graph<f64>, Vec<Var>, Var), TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(TensorError::NotScalar(g.shape(out).to_vec()));
    }
    Ok((g, vars, out))
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`, over every entry of every parameter.
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    if !(h > 0.0) {
        return Err(TensorError::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let (mut g, vars, out) = eval(&f, params).map_err(non_finite_objective)?;
    let kink_margin = g.kink_margin();
    if kink_margin < KINK_THRESHOLD {
        return Ok(GradCheckReport {
            max_rel_error: 0.0,
            per_param: vec![0.0; params.len()],
            skipped: true,
            kink_margin,
            entries_checked: 0,
        });
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.numel()], |t| t.into_data()))
        .collect();

    let objective = |ps: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let (g, _, out) = eval(&f, ps).map_err(non_finite_objective)?;
        let v = g.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFiniteObjective)
        }
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut entries = 0;
    for pi in 0..params.len() {
        let mut worst = 0.0f64;
        for j in 0..params[pi].numel() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let plus = objective(&work)?;
            work[pi].data_mut()[j] = orig - h;
            let minus = objective(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            entries += 1;
        }
        per_param.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_error: per_param.iter().copied().fold(0.0, f64::max),
        per_param,
        skipped: false,
        kink_margin,
        entries_checked: entries,
    })
}

fn non_finite_objective(e: TensorError) -> TensorError {
    match e {
        TensorError::NonFinite { .. } => TensorError::NonFiniteObjective,
        other => other,
    }
}
