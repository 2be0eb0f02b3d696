//! Channel correlation loss.
//!
//! For a batch with attention matrix `C` (`N x D`) and labels `Y`:
//!
//! - `d[i][j] = sum_k (C[i][k] - C[j][k])^2` (squared distance, no root)
//! - `L_intra` sums `d[i][j]` over pairs `j > i` with equal labels
//! - `L_inter` sums `d[i][j]` over pairs `j > i` with different labels
//! - `L = CE(P2) + lambda * L_intra / (L_inter + eps)`
//!
//! The distance matrix is built two ways: a direct double loop, and the Gram
//! route `D = E + E^T - 2 C C^T` with `E[i][j] = |C_i|^2`. The Gram route is
//! the differentiable one used in training.

use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

/// Default `eps` guarding the ratio denominator.
pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CcLossParams {
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for CcLossParams {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA, epsilon: DEFAULT_EPSILON }
    }
}

impl CcLossParams {
    pub fn validate(&self) -> Result<(), TensorError> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(TensorError::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(TensorError::InvalidArgument(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// A batch of attention vectors with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix<T> {
    values: Tensor<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> AttentionMatrix<T> {
    /// Every value must lie in `(0, 1)` and every label below `classes`.
    pub fn new(values: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self, TensorError> {
        let (n, _) = values.dims2()?;
        if labels.len() != n {
            return Err(TensorError::Shape {
                op: "AttentionMatrix",
                detail: format!("{} labels for {n} rows", labels.len()),
            });
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        if values.data().iter().any(|&v| !(v > T::zero() && v < T::one())) {
            return Err(TensorError::InvalidArgument("attention values must lie in (0, 1)".into()));
        }
        Ok(Self { values, labels })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Symmetric `N x N` matrix of squared distances with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix<T> {
    values: Tensor<T>,
}

impl<T: Scalar> DistanceMatrix<T> {
    pub fn from_tensor(values: Tensor<T>) -> Result<Self, TensorError> {
        let (r, c) = values.dims2()?;
        if r != c {
            return Err(TensorError::Shape { op: "DistanceMatrix", detail: format!("{r}x{c} is not square") });
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values.at2(i, j)
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    /// Entries `d[i][j]` with `j > i`, row by row.
    pub fn upper_triangle(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        let n = self.len();
        (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j, self.get(i, j))))
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.len();
        (0..n).all(|i| (0..n).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

/// Components of the composite objective, reported in `f64`.
#[derive(Clone, Copy, Debug, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub intra: f64,
    pub inter: f64,
    /// `intra / (inter + eps)`
    pub ratio: f64,
}

/// Graph handles for the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub intra: Var,
    pub inter: Var,
    pub ratio: Var,
}

impl LossVars {
    pub fn read<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        LossBreakdown {
            total: g.value(self.total).item().f64(),
            ce: g.value(self.ce).item().f64(),
            intra: g.value(self.intra).item().f64(),
            inter: g.value(self.inter).item().f64(),
            ratio: g.value(self.ratio).item().f64(),
        }
    }
}

/// Mean softmax cross-entropy, evaluated through log-sum-exp.
pub fn softmax_ce<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = g.softmax_ce(z, labels)?;
    Ok(g.value(l).item().f64())
}

/// Direct double loop over row pairs. Sums accumulate in `f64` and are
/// rounded once to `T`.
pub fn pairwise_sq_dist_naive<T: Scalar>(c: &Tensor<T>) -> Result<DistanceMatrix<T>, TensorError> {
    let (n, _) = c.dims2()?;
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = c.row(i).iter().zip(c.row(j)).map(|(&a, &b)| (a.f64() - b.f64()).powi(2)).sum();
            out[i * n + j] = T::of(d);
            out[j * n + i] = T::of(d);
        }
    }
    DistanceMatrix::from_tensor(Tensor::new(vec![n, n], out)?)
}

/// Gram route evaluated in `f64` and rounded once to `T`. Same operation
/// sequence as [`gram_distance`].
pub fn pairwise_sq_dist_gram<T: Scalar>(c: &Tensor<T>) -> Result<DistanceMatrix<T>, TensorError> {
    c.dims2()?;
    let mut g = Graph::<f64>::new();
    let cv = g.constant(c.cast());
    let d = gram_distance(&mut g, cv)?;
    DistanceMatrix::from_tensor(g.value(d).cast())
}

/// Differentiable `D = max(E + E^T - 2 C C^T, 0)` where `E[i][j] = s_i` and
/// `s_i` is the squared norm of row `i`.
///
/// Row norms and the Gram product accumulate in the same order, so a
/// duplicated row pair (and every diagonal entry) comes out exactly zero.
pub fn gram_distance<T: Scalar>(g: &mut Graph<T>, c: Var) -> Result<Var, TensorError> {
    let (n, _) = g.value(c).dims2()?;
    let sq = g.square(c)?;
    let s = g.sum(sq, Some(1))?;
    let e = g.expand_cols(s, n)?;
    let et = g.transpose(e)?;
    let ct = g.transpose(c)?;
    let gram = g.matmul(c, ct)?;
    let e_sum = g.add(e, et)?;
    let gram2 = g.scale(gram, T::of(2.0))?;
    let d = g.sub(e_sum, gram2)?;
    g.clamp_min_zero(d)
}

/// Strict-upper-triangle masks `(same label, different label)`.
pub fn pair_masks<T: Scalar>(labels: &[usize]) -> (Tensor<T>, Tensor<T>) {
    let n = labels.len();
    let mut same = Tensor::zeros(&[n, n]);
    let mut diff = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            let slot = if labels[i] == labels[j] { same.data_mut() } else { diff.data_mut() };
            slot[i * n + j] = T::one();
        }
    }
    (same, diff)
}

/// `(L_intra, L_inter)` over the strict upper triangle.
pub fn intra_inter<T: Scalar>(d: &DistanceMatrix<T>, labels: &[usize]) -> Result<(f64, f64), TensorError> {
    if labels.len() != d.len() {
        return Err(TensorError::Shape {
            op: "intra_inter",
            detail: format!("{} labels for {} rows", labels.len(), d.len()),
        });
    }
    let (mut intra, mut inter) = (0.0, 0.0);
    for (i, j, v) in d.upper_triangle() {
        if labels[i] == labels[j] {
            intra += v.f64();
        } else {
            inter += v.f64();
        }
    }
    Ok((intra, inter))
}

/// Differentiable `(L_intra, L_inter)` over a distance node.
pub fn intra_inter_graph<T: Scalar>(g: &mut Graph<T>, d: Var, labels: &[usize]) -> Result<(Var, Var), TensorError> {
    let (same, diff) = pair_masks::<T>(labels);
    let same = g.constant(same);
    let diff = g.constant(diff);
    let di = g.mul(d, same)?;
    let intra = g.sum(di, None)?;
    let dx = g.mul(d, diff)?;
    let inter = g.sum(dx, None)?;
    Ok((intra, inter))
}

/// `lambda * intra / (inter + eps)` given already-computed components.
pub fn ratio_term<T: Scalar>(g: &mut Graph<T>, intra: Var, inter: Var, params: CcLossParams) -> Result<Var, TensorError> {
    let denom = g.add_scalar(inter, T::of(params.epsilon))?;
    g.div(intra, denom)
}

/// Full objective on a graph. Gradients flow through the cross-entropy and
/// through both numerator and denominator of the ratio.
pub fn cc_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    attention: Var,
    labels: &[usize],
    params: CcLossParams,
) -> Result<LossVars, TensorError> {
    params.validate()?;
    let ce = g.softmax_ce(logits, labels)?;
    let d = gram_distance(g, attention)?;
    let (intra, inter) = intra_inter_graph(g, d, labels)?;
    let ratio = ratio_term(g, intra, inter, params)?;
    let weighted = g.scale(ratio, T::of(params.lambda))?;
    let total = g.add(ce, weighted)?;
    Ok(LossVars { total, ce, intra, inter, ratio })
}

/// Loss breakdown for fixed logits and attention.
pub fn cc_loss<T: Scalar>(
    logits: &Tensor<T>,
    attention: &AttentionMatrix<T>,
    params: CcLossParams,
) -> Result<LossBreakdown, TensorError> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let c = g.constant(attention.values().clone());
    let vars = cc_loss_graph(&mut g, z, c, attention.labels(), params)?;
    Ok(vars.read(&g))
}
