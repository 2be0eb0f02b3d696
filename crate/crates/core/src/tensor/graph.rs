use super::kernels;
use super::{shape_err, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Sigmoid,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryOp {
    Relu,
    Sigmoid,
    Square,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, p: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Binary { op: BinaryOp, a: Var, b: Var, row_broadcast: bool },
    Unary { op: UnaryOp, a: Var },
    Scale { a: Var, factor: T },
    AddScalar { a: Var },
    ClampMinZero { a: Var },
    Reduce { op: ReduceOp, a: Var, axis: Option<usize>, argmax: Vec<usize> },
    ExpandCols { a: Var, m: usize },
    Reshape { a: Var },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Conv3x3 { x: Var, w: Var, b: Var, cols: Vec<T>, geom: ConvGeom },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var, hw: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run tape. Rebuild it (or [`Graph::reset`]) for every forward pass.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
    kink_margin: f64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, extent, inner)` split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: Option<usize>) -> Result<(usize, usize, usize, Vec<usize>), TensorError> {
    match axis {
        None => Ok((1, shape.iter().product(), 1, vec![])),
        Some(ax) => {
            if ax >= shape.len() {
                return Err(TensorError::InvalidAxis { axis: ax, rank: shape.len() });
            }
            let outer = shape[..ax].iter().product();
            let inner = shape[ax + 1..].iter().product();
            let mut out_shape = shape.to_vec();
            out_shape.remove(ax);
            Ok((outer, shape[ax], inner, out_shape))
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), consumed: false, kink_margin: f64::INFINITY }
    }

    /// Drops every recorded node so the graph can record a fresh pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
        self.kink_margin = f64::INFINITY;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance of any relu input, max-pool runner-up or reduce-max
    /// runner-up from a non-differentiable point, over the recorded pass.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    /// Registers a tensor; it is differentiated iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.clone().with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shape(v).to_vec(), g.clone()).ok()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn note_kink(&mut self, margin: f64) {
        if margin < self.kink_margin {
            self.kink_margin = margin;
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, p) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] x [{k2}x{p}]")));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, p);
        let t = Tensor::new(vec![m, p], out)?;
        self.push("matmul", t, Op::MatMul { a, b, m, k, p }, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (rows, cols) = self.value(a).dims2()?;
        let out = kernels::transpose(self.value(a).data(), rows, cols);
        let t = Tensor::new(vec![cols, rows], out)?;
        self.push("transpose", t, Op::Transpose { a, rows, cols }, &[a])
    }

    /// Dispatches the pointwise family by tag. Binary ops need `b`.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let need_b = || b.ok_or_else(|| TensorError::InvalidArgument(format!("{op:?} needs two operands")));
        match op {
            ElementwiseOp::Add => self.add(a, need_b()?),
            ElementwiseOp::Sub => self.sub(a, need_b()?),
            ElementwiseOp::Mul => self.mul(a, need_b()?),
            ElementwiseOp::Div => self.div(a, need_b()?),
            ElementwiseOp::Relu => self.relu(a),
            ElementwiseOp::Sigmoid => self.sigmoid(a),
            ElementwiseOp::Square => self.square(a),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryOp::Div, a, b)
    }

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var, TensorError> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let (av, bv) = (self.value(a), self.value(b));
        let row_broadcast = if av.shape() == bv.shape() {
            false
        } else if av.rank() == 2 && bv.rank() == 1 && av.shape()[1] == bv.shape()[0] {
            true
        } else {
            return Err(shape_err(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        };
        if op == BinaryOp::Div && bv.data().iter().any(|&x| x == T::zero()) {
            return Err(TensorError::DivByZero { op: name });
        }
        let width = bv.numel();
        let bd = bv.data();
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let out: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, if row_broadcast { bd[i % width] } else { bd[i] }))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        self.push(name, t, Op::Binary { op, a, b, row_broadcast }, &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let margin = self.value(a).data().iter().map(|x| x.f64().abs()).fold(f64::INFINITY, f64::min);
        self.note_kink(margin);
        self.unary(UnaryOp::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Square, a)
    }

    fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let out: Vec<T> = av
            .data()
            .iter()
            .map(|&x| match op {
                UnaryOp::Relu => x.max(T::zero()),
                UnaryOp::Sigmoid => stable_sigmoid(x),
                UnaryOp::Square => x * x,
            })
            .collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let name = match op {
            UnaryOp::Relu => "relu",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Square => "square",
        };
        self.push(name, t, Op::Unary { op, a }, &[a])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var, TensorError> {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| x * factor).collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        self.push("scale", t, Op::Scale { a, factor }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var, TensorError> {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| x + c).collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        self.push("add_scalar", t, Op::AddScalar { a }, &[a])
    }

    /// `max(x, 0)` with zero gradient wherever the input was clamped.
    pub fn clamp_min_zero(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        self.push("clamp_min_zero", t, Op::ClampMinZero { a }, &[a])
    }

    pub fn reduce(&mut self, op: ReduceOp, a: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        let av = self.value(a);
        let (outer, extent, inner, out_shape) = axis_split(av.shape(), axis)?;
        let name = match op {
            ReduceOp::Sum => "sum",
            ReduceOp::Mean => "mean",
            ReduceOp::Max => "max",
        };
        if extent == 0 && op != ReduceOp::Sum {
            return Err(TensorError::EmptyReduction { op: name });
        }
        let d = av.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::new();
        let mut margin = f64::INFINITY;
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| o * extent * inner + e * inner + i;
                match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let mut acc = T::zero();
                        for e in 0..extent {
                            acc += d[at(e)];
                        }
                        if op == ReduceOp::Mean {
                            acc /= T::of(extent as f64);
                        }
                        out.push(acc);
                    }
                    ReduceOp::Max => {
                        let mut best = at(0);
                        let mut runner_up = f64::NEG_INFINITY;
                        for e in 1..extent {
                            let idx = at(e);
                            if d[idx] > d[best] {
                                runner_up = d[best].f64();
                                best = idx;
                            } else {
                                runner_up = runner_up.max(d[idx].f64());
                            }
                        }
                        margin = margin.min(d[best].f64() - runner_up);
                        argmax.push(best);
                        out.push(d[best]);
                    }
                }
            }
        }
        if op == ReduceOp::Max {
            self.note_kink(margin);
        }
        let t = Tensor::new(out_shape, out)?;
        self.push(name, t, Op::Reduce { op, a, axis, argmax }, &[a])
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(ReduceOp::Sum, a, axis)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(ReduceOp::Mean, a, axis)
    }

    pub fn max(&mut self, a: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(ReduceOp::Max, a, axis)
    }

    /// Replicates a length-N vector into an N x m matrix, `out[i][j] = a[i]`.
    pub fn expand_cols(&mut self, a: Var, m: usize) -> Result<Var, TensorError> {
        let av = self.value(a);
        if av.rank() != 1 {
            return Err(shape_err("expand_cols", format!("expected a vector, got {:?}", av.shape())));
        }
        let n = av.numel();
        let mut out = Vec::with_capacity(n * m);
        for &x in av.data() {
            out.extend(std::iter::repeat_n(x, m));
        }
        let t = Tensor::new(vec![n, m], out)?;
        self.push("expand_cols", t, Op::ExpandCols { a, m }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).clone().with_requires_grad(false).reshaped(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape { a }, &[a])
    }

    /// Mean softmax cross-entropy of `logits[N x K]` against integer labels.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let (n, k) = lv.dims2()?;
        if labels.len() != n || n == 0 {
            return Err(shape_err("softmax_ce", format!("{} labels for {} rows", labels.len(), n)));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(TensorError::LabelOutOfRange { label: bad, classes: k });
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0f64;
        for (row, &y) in lv.data().chunks(k).zip(labels) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&z| (z - mx).exp()).collect();
            let z: T = exps.iter().copied().sum();
            let lse = mx + z.ln();
            total += (lse - row[y]).f64();
            probs.extend(exps.into_iter().map(|e| e / z));
        }
        let t = Tensor::scalar(T::of(total / n as f64));
        self.push("softmax_ce", t, Op::SoftmaxCe { logits, labels: labels.to_vec(), probs }, &[logits])
    }

    /// 3x3, stride-1, zero-padded convolution of `x[N,Ci,H,W]` with
    /// `w[Co,Ci,3,3]` and bias `b[Co]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let geom = match (xs, ws, bs) {
            (&[n, ci, h, wd], &[co, ci2, 3, 3], &[co2]) if ci == ci2 && co == co2 => {
                ConvGeom { n, ci, co, h, w: wd }
            }
            _ => return Err(shape_err("conv3x3", format!("x {xs:?}, w {ws:?}, b {bs:?}"))),
        };
        let ConvGeom { n, ci, co, h, w: wd } = geom;
        let hw = h * wd;
        let k = ci * 9;
        let mut cols = vec![T::zero(); n * k * hw];
        let mut out = vec![T::zero(); n * co * hw];
        let (xd, wdat, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        for s in 0..n {
            let col = &mut cols[s * k * hw..(s + 1) * k * hw];
            kernels::im2col3x3(&xd[s * ci * hw..(s + 1) * ci * hw], ci, h, wd, col);
            let o = &mut out[s * co * hw..(s + 1) * co * hw];
            for (c, plane) in o.chunks_mut(hw).enumerate() {
                plane.fill(bd[c]);
            }
            kernels::matmul_acc(wdat, col, co, k, hw, o);
        }
        let t = Tensor::new(vec![n, co, h, wd], out)?;
        self.push("conv3x3", t, Op::Conv3x3 { x, w, b, cols, geom }, &[x, w, b])
    }

    /// 2x2 stride-2 max pool over `[N,C,H,W]`; odd trailing rows/cols are dropped.
    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let &[n, c, h, w] = xv.shape() else {
            return Err(shape_err("max_pool2x2", format!("expected rank 4, got {:?}", xv.shape())));
        };
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(TensorError::EmptyReduction { op: "max_pool2x2" });
        }
        let d = xv.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let mut margin = f64::INFINITY;
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let idx = [
                        base + 2 * y * w + 2 * xx,
                        base + 2 * y * w + 2 * xx + 1,
                        base + (2 * y + 1) * w + 2 * xx,
                        base + (2 * y + 1) * w + 2 * xx + 1,
                    ];
                    let mut best = idx[0];
                    for &i in &idx[1..] {
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                    let runner_up = idx
                        .iter()
                        .filter(|&&i| i != best)
                        .map(|&i| d[i].f64())
                        .fold(f64::NEG_INFINITY, f64::max);
                    margin = margin.min(d[best].f64() - runner_up);
                    argmax.push(best);
                    out.push(d[best]);
                }
            }
        }
        self.note_kink(margin);
        let t = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push("max_pool2x2", t, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// Spatial mean per channel: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let &[n, c, h, w] = xv.shape() else {
            return Err(shape_err("global_avg_pool", format!("expected rank 4, got {:?}", xv.shape())));
        };
        let hw = h * w;
        if hw == 0 {
            return Err(TensorError::EmptyReduction { op: "global_avg_pool" });
        }
        let inv = T::of(1.0 / hw as f64);
        let out = xv.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let t = Tensor::new(vec![n, c], out)?;
        self.push("global_avg_pool", t, Op::GlobalAvgPool { x, hw }, &[x])
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`. A graph can be differentiated once;
    /// a second call returns [`TensorError::StaleTape`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::StaleTape);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: op_name(&self.nodes[i].op) });
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<(), TensorError> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, p } => {
                if self.needs(a) {
                    let da = kernels::matmul_bt(g, self.value(b).data(), m, p, k);
                    self.send(grads, a, da);
                }
                if self.needs(b) {
                    let db = kernels::matmul_at(self.value(a).data(), g, m, k, p);
                    self.send(grads, b, db);
                }
            }
            &Op::Transpose { a, rows, cols } => {
                self.send(grads, a, kernels::transpose(g, cols, rows));
            }
            &Op::Binary { op, a, b, row_broadcast } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let width = bv.len();
                let bi = |j: usize| if row_broadcast { j % width } else { j };
                if self.needs(a) {
                    let da = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gj)| match op {
                            BinaryOp::Add | BinaryOp::Sub => gj,
                            BinaryOp::Mul => gj * bv[bi(j)],
                            BinaryOp::Div => gj / bv[bi(j)],
                        })
                        .collect();
                    self.send(grads, a, da);
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); width];
                    for (j, &gj) in g.iter().enumerate() {
                        let y = bv[bi(j)];
                        db[bi(j)] += match op {
                            BinaryOp::Add => gj,
                            BinaryOp::Sub => -gj,
                            BinaryOp::Mul => gj * av[j],
                            BinaryOp::Div => -gj * av[j] / (y * y),
                        };
                    }
                    self.send(grads, b, db);
                }
            }
            &Op::Unary { op, a } => {
                let x = self.value(a).data();
                let y = node.value.data();
                let two = T::of(2.0);
                let da = g
                    .iter()
                    .enumerate()
                    .map(|(j, &gj)| match op {
                        UnaryOp::Relu => {
                            if x[j] > T::zero() {
                                gj
                            } else {
                                T::zero()
                            }
                        }
                        UnaryOp::Sigmoid => gj * y[j] * (T::one() - y[j]),
                        UnaryOp::Square => gj * two * x[j],
                    })
                    .collect();
                self.send(grads, a, da);
            }
            &Op::Scale { a, factor } => {
                self.send(grads, a, g.iter().map(|&v| v * factor).collect());
            }
            &Op::AddScalar { a } => self.send(grads, a, g.to_vec()),
            &Op::ClampMinZero { a } => {
                let x = self.value(a).data();
                let da = g.iter().zip(x).map(|(&gj, &xj)| if xj > T::zero() { gj } else { T::zero() }).collect();
                self.send(grads, a, da);
            }
            Op::Reduce { op, a, axis, argmax } => {
                let a = *a;
                let av = self.value(a);
                let (outer, extent, inner, _) = axis_split(av.shape(), *axis)?;
                let mut da = vec![T::zero(); av.numel()];
                match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let s = if *op == ReduceOp::Mean { T::one() / T::of(extent as f64) } else { T::one() };
                        for o in 0..outer {
                            for e in 0..extent {
                                for ii in 0..inner {
                                    da[o * extent * inner + e * inner + ii] = g[o * inner + ii] * s;
                                }
                            }
                        }
                    }
                    ReduceOp::Max => {
                        for (&src, &gj) in argmax.iter().zip(g) {
                            da[src] += gj;
                        }
                    }
                }
                self.send(grads, a, da);
            }
            &Op::ExpandCols { a, m } => {
                let da = g.chunks(m).map(|row| row.iter().copied().sum()).collect();
                self.send(grads, a, da);
            }
            &Op::Reshape { a } => self.send(grads, a, g.to_vec()),
            Op::SoftmaxCe { logits, labels, probs } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / T::of(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * k + y] -= scale;
                }
                self.send(grads, *logits, d);
            }
            Op::Conv3x3 { x, w, b, cols, geom } => {
                let ConvGeom { n, ci, co, h, w: wd } = *geom;
                let hw = h * wd;
                let k = ci * 9;
                let wdat = self.value(*w).data();
                let mut dw = vec![T::zero(); co * k];
                let mut db = vec![T::zero(); co];
                let mut dx = if self.needs(*x) { Some(vec![T::zero(); n * ci * hw]) } else { None };
                for s in 0..n {
                    let gs = &g[s * co * hw..(s + 1) * co * hw];
                    let col = &cols[s * k * hw..(s + 1) * k * hw];
                    for (c, plane) in gs.chunks(hw).enumerate() {
                        db[c] += plane.iter().copied().sum();
                    }
                    let dws = kernels::matmul_bt(gs, col, co, hw, k);
                    for (acc, v) in dw.iter_mut().zip(dws) {
                        *acc += v;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dcol = kernels::matmul_at(wdat, gs, co, k, hw);
                        kernels::col2im3x3(&dcol, ci, h, wd, &mut dx[s * ci * hw..(s + 1) * ci * hw]);
                    }
                }
                self.send(grads, *w, dw);
                self.send(grads, *b, db);
                if let Some(dx) = dx {
                    self.send(grads, *x, dx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&src, &gj) in argmax.iter().zip(g) {
                    dx[src] += gj;
                }
                self.send(grads, *x, dx);
            }
            &Op::GlobalAvgPool { x, hw } => {
                let inv = T::of(1.0 / hw as f64);
                let mut dx = Vec::with_capacity(g.len() * hw);
                for &gj in g {
                    dx.extend(std::iter::repeat_n(gj * inv, hw));
                }
                self.send(grads, x, dx);
            }
        }
        Ok(())
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Binary { .. } => "binary",
        Op::Unary { .. } => "unary",
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::ClampMinZero { .. } => "clamp_min_zero",
        Op::Reduce { .. } => "reduce",
        Op::ExpandCols { .. } => "expand_cols",
        Op::Reshape { .. } => "reshape",
        Op::SoftmaxCe { .. } => "softmax_ce",
        Op::Conv3x3 { .. } => "conv3x3",
        Op::MaxPool2 { .. } => "max_pool2x2",
        Op::GlobalAvgPool { .. } => "global_avg_pool",
    }
}

/// `1 / (1 + e^-x)`, evaluated as `e^x / (1 + e^x)` for negative `x` so the
/// exponential never overflows.
pub fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::eye(2));
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = g.matmul(i, a).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn row_times_column() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn relu_sigmoid_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).item(), 0.5);
        // far negative input stays finite and positive
        assert!(stable_sigmoid(-800.0f64) >= 0.0);
        assert_eq!(stable_sigmoid(800.0f64), 1.0);
    }

    #[test]
    fn broadcast_mul() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2], &[10.0, 100.0]));
        let c = g.elementwise(ElementwiseOp::Mul, a, Some(b)).unwrap();
        assert_eq!(g.value(c).data(), &[10.0, 200.0, 30.0, 400.0]);
    }

    #[test]
    fn incompatible_and_zero_division() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, b), Err(TensorError::Shape { .. })));
        let one = g.constant(Tensor::filled(&[2, 2], 1.0));
        assert!(matches!(g.div(one, a), Err(TensorError::DivByZero { .. })));
        assert!(g.elementwise(ElementwiseOp::Add, a, None).is_err());
    }

    #[test]
    fn reductions() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = g.sum(a, Some(1)).unwrap();
        assert_eq!(g.value(s).data(), &[3.0, 7.0]);
        let v = g.constant(t(&[3], &[2.0, 4.0, 6.0]));
        let m = g.mean(v, None).unwrap();
        assert_eq!(g.value(m).item(), 4.0);
        let mx = g.max(a, Some(0)).unwrap();
        assert_eq!(g.value(mx).data(), &[3.0, 4.0]);
        assert!(matches!(g.sum(a, Some(2)), Err(TensorError::InvalidAxis { .. })));
        let empty = g.constant(Tensor::zeros(&[2, 0]));
        assert!(matches!(g.max(empty, Some(1)), Err(TensorError::EmptyReduction { .. })));
    }

    #[test]
    fn linear_and_quadratic_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 5.0]).with_requires_grad(true));
        let s = g.sum(x, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let sq = g.square(x).unwrap();
        let s = g.sum(sq, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
        let s = g.sum(x, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(TensorError::StaleTape));
        g.reset();
        assert!(g.is_empty());
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::scalar(f64::MAX));
        assert!(matches!(g.square(x), Err(TensorError::NonFinite { op: "square" })));
    }

    #[test]
    fn softmax_ce_uniform_and_saturated() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[1, 10]));
        let l = g.softmax_ce(z, &[3]).unwrap();
        assert!((g.value(l).item() - 10f64.ln()).abs() < 1e-12);
        let z = g.constant(t(&[1, 3], &[0.0, 1000.0, 0.0]));
        let l = g.softmax_ce(z, &[1]).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
        assert!(matches!(g.softmax_ce(z, &[3]), Err(TensorError::LabelOutOfRange { .. })));
    }

    #[test]
    fn expand_and_pool_shapes() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(t(&[2], &[1.0, 2.0]));
        let e = g.expand_cols(v, 3).unwrap();
        assert_eq!(g.value(e).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 4.0, 2.0, 3.0]));
        let p = g.max_pool2x2(x).unwrap();
        assert_eq!(g.value(p).data(), &[4.0]);
        let a = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(a).data(), &[2.5]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(t(&[1, 1, 3, 3], &k));
        let b = g.constant(t(&[1], &[0.5]));
        let y = g.conv3x3(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 2.5, 3.5, 4.5, 5.5, 6.5]);
    }
}
