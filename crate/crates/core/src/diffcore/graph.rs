use super::{ShapeError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Concat(Vec<Var>, Axis),
    Slice(Var, Axis, usize),
    SumAll(Var),
    Sum(Var),
    MeanAll(Var),
    Mean(Var, Axis),
    LogSumExp(Var),
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Node ids are assigned in creation order, so the tape is topologically
/// sorted by construction and [`Graph::backward`] is a single reverse sweep.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every leaf that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn broadcast_shape(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Result<[usize; 2], ShapeError> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a[0], b[0]), dim(a[1], b[1])) {
        (Some(r), Some(c)) => Ok([r, c]),
        _ => Err(ShapeError::new(op, a, b)),
    }
}

fn broadcast_binary(a: &Tensor, b: &Tensor, shape: [usize; 2], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let [r, c] = shape;
    if a.shape() == shape && b.shape() == shape {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(r, c, data).expect("shape");
    }
    let mut data = Vec::with_capacity(r * c);
    let (ar, ac, br, bc) = (a.rows() == 1, a.cols() == 1, b.rows() == 1, b.cols() == 1);
    for i in 0..r {
        for j in 0..c {
            let x = a.at(if ar { 0 } else { i }, if ac { 0 } else { j });
            let y = b.at(if br { 0 } else { i }, if bc { 0 } else { j });
            data.push(f(x, y));
        }
    }
    Tensor::new(r, c, data).expect("shape")
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(grad: &Tensor, shape: [usize; 2]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape[0], shape[1]);
    let (rr, rc) = (shape[0] == 1, shape[1] == 1);
    let cols = shape[1];
    let buf = out.data_mut();
    for i in 0..grad.rows() {
        for j in 0..grad.cols() {
            let oi = if rr { 0 } else { i };
            let oj = if rc { 0 } else { j };
            buf[oi * cols + oj] += grad.at(i, j);
        }
    }
    out
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(op, value, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, ShapeError> {
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let value = broadcast_binary(self.value(a), self.value(b), shape, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, value, rg))
    }

    /// Elementwise sum with broadcasting of unit dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Op::Scale(x, k), |v| v * k)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + k)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Natural log; non-positive inputs produce `-inf`/NaN which
    /// [`Tensor::is_finite`] reports.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    /// Absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var, ShapeError> {
        let first = *parts.first().ok_or_else(|| ShapeError::new("concat", [0, 0], [0, 0]))?;
        let base = self.shape(first);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = match axis {
                Axis::Rows => s[1] == base[1],
                Axis::Cols => s[0] == base[0],
            };
            if !ok {
                return Err(ShapeError::new("concat", base, s));
            }
            total += match axis {
                Axis::Rows => s[0],
                Axis::Cols => s[1],
            };
        }
        let value = match axis {
            Axis::Rows => {
                let mut data = Vec::with_capacity(total * base[1]);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::new(total, base[1], data)?
            }
            Axis::Cols => {
                let rows = base[0];
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(r));
                    }
                }
                Tensor::new(rows, total, data)?
            }
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::Concat(parts.to_vec(), axis), value, rg))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, end: usize) -> Result<Var, ShapeError> {
        let t = self.value(x);
        let [r, c] = t.shape();
        let limit = if axis == Axis::Rows { r } else { c };
        if start >= end || end > limit {
            return Err(ShapeError::new("slice", [r, c], [start, end]));
        }
        let value = match axis {
            Axis::Rows => Tensor::new(end - start, c, t.data()[start * c..end * c].to_vec())?,
            Axis::Cols => {
                let mut data = Vec::with_capacity(r * (end - start));
                for i in 0..r {
                    data.extend_from_slice(&t.row_slice(i)[start..end]);
                }
                Tensor::new(r, end - start, data)?
            }
        };
        let rg = self.rg(x);
        Ok(self.push(Op::Slice(x, axis, start), value, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Op::SumAll(x), Tensor::scalar(s), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Op::MeanAll(x), Tensor::scalar(s), rg)
    }

    fn reduce_axis(t: &Tensor, axis: Axis, f: impl Fn(&[f64]) -> f64) -> Tensor {
        let [r, c] = t.shape();
        match axis {
            Axis::Cols => Tensor::column((0..r).map(|i| f(t.row_slice(i))).collect()),
            Axis::Rows => {
                let tt = t.transpose();
                Tensor::row((0..c).map(|j| f(tt.row_slice(j))).collect())
            }
        }
    }

    /// Sum along `axis`: `Axis::Cols` collapses columns to an `r x 1` result.
    pub fn sum(&mut self, x: Var, axis: Axis) -> Var {
        let value = Self::reduce_axis(self.value(x), axis, |s| s.iter().sum());
        let rg = self.rg(x);
        self.push(Op::Sum(x), value, rg)
    }

    pub fn mean(&mut self, x: Var, axis: Axis) -> Var {
        let value = Self::reduce_axis(self.value(x), axis, |s| s.iter().sum::<f64>() / s.len() as f64);
        let rg = self.rg(x);
        self.push(Op::Mean(x, axis), value, rg)
    }

    /// `log Σ exp` along `axis`, computed with max subtraction.
    pub fn log_sum_exp(&mut self, x: Var, axis: Axis) -> Var {
        let value = Self::reduce_axis(self.value(x), axis, lse);
        let rg = self.rg(x);
        self.push(Op::LogSumExp(x), value, rg)
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, ShapeError> {
        let t = self.value(x);
        let [r, c] = t.shape();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(ShapeError::new("gather_rows", [r, c], [i, 0]));
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let value = Tensor::new(idx.len(), c, data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::GatherRows(x, idx.to_vec()), value, rg))
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Result<Gradients, ShapeError> {
        let shape = self.shape(out);
        if shape != [1, 1] {
            return Err(ShapeError::new("backward (output must be scalar)", shape, [1, 1]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::scalar(1.0));
        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            // interior gradients are released once propagated; leaves keep theirs
            let Some(g) = grads[id].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.matmul_nt(self.value(*b)));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], self.value(*a).matmul_tn(&g));
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if self.rg(*v) {
                            accumulate(&mut grads[v.0], reduce_to(&g, self.shape(*v)));
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], reduce_to(&g, self.shape(*a)));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], reduce_to(&g.map(|v| -v), self.shape(*b)));
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let full = broadcast_binary(&g, self.value(*b), g.shape(), |x, y| x * y);
                        accumulate(&mut grads[a.0], reduce_to(&full, self.shape(*a)));
                    }
                    if self.rg(*b) {
                        let full = broadcast_binary(&g, self.value(*a), g.shape(), |x, y| x * y);
                        accumulate(&mut grads[b.0], reduce_to(&full, self.shape(*b)));
                    }
                }
                Op::Neg(x) => accumulate(&mut grads[x.0], g.map(|v| -v)),
                Op::Scale(x, k) => {
                    let k = *k;
                    accumulate(&mut grads[x.0], g.map(|v| v * k));
                }
                Op::AddScalar(x) => accumulate(&mut grads[x.0], g),
                Op::Sigmoid(x) => {
                    accumulate(&mut grads[x.0], zip(&g, y, |gv, s| gv * s * (1.0 - s)));
                }
                Op::Tanh(x) => accumulate(&mut grads[x.0], zip(&g, y, |gv, t| gv * (1.0 - t * t))),
                Op::Exp(x) => accumulate(&mut grads[x.0], zip(&g, y, |gv, e| gv * e)),
                Op::Log(x) => accumulate(&mut grads[x.0], zip(&g, self.value(*x), |gv, v| gv / v)),
                Op::Softplus(x) => {
                    accumulate(&mut grads[x.0], zip(&g, self.value(*x), |gv, v| gv * sigmoid(v)));
                }
                Op::Abs(x) => {
                    accumulate(
                        &mut grads[x.0],
                        zip(&g, self.value(*x), |gv, v| {
                            if v > 0.0 {
                                gv
                            } else if v < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        }),
                    );
                }
                Op::Square(x) => accumulate(&mut grads[x.0], zip(&g, self.value(*x), |gv, v| 2.0 * gv * v)),
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for p in parts {
                        let [pr, pc] = self.shape(*p);
                        if self.rg(*p) {
                            let piece = match axis {
                                Axis::Rows => Tensor::new(pr, pc, g.data()[offset * pc..(offset + pr) * pc].to_vec())?,
                                Axis::Cols => {
                                    let mut d = Vec::with_capacity(pr * pc);
                                    for i in 0..pr {
                                        d.extend_from_slice(&g.row_slice(i)[offset..offset + pc]);
                                    }
                                    Tensor::new(pr, pc, d)?
                                }
                            };
                            accumulate(&mut grads[p.0], piece);
                        }
                        offset += if *axis == Axis::Rows { pr } else { pc };
                    }
                }
                Op::Slice(x, axis, start) => {
                    let [xr, xc] = self.shape(*x);
                    let mut full = Tensor::zeros(xr, xc);
                    let buf = full.data_mut();
                    match axis {
                        Axis::Rows => buf[start * xc..start * xc + g.len()].copy_from_slice(g.data()),
                        Axis::Cols => {
                            for i in 0..g.rows() {
                                buf[i * xc + start..i * xc + start + g.cols()].copy_from_slice(g.row_slice(i));
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], full);
                }
                Op::SumAll(x) => {
                    let [r, c] = self.shape(*x);
                    accumulate(&mut grads[x.0], Tensor::full(r, c, g.data()[0]));
                }
                Op::MeanAll(x) => {
                    let [r, c] = self.shape(*x);
                    accumulate(&mut grads[x.0], Tensor::full(r, c, g.data()[0] / (r * c) as f64));
                }
                Op::Sum(x) => {
                    let [r, c] = self.shape(*x);
                    let full = broadcast_binary(&Tensor::full(r, c, 1.0), &g, [r, c], |a, b| a * b);
                    accumulate(&mut grads[x.0], full);
                }
                Op::Mean(x, axis) => {
                    let [r, c] = self.shape(*x);
                    let n = if *axis == Axis::Cols { c } else { r } as f64;
                    let full = broadcast_binary(&Tensor::full(r, c, 1.0 / n), &g, [r, c], |a, b| a * b);
                    accumulate(&mut grads[x.0], full);
                }
                Op::LogSumExp(x) => {
                    // d lse / dx = softmax = exp(x - lse)
                    let xv = self.value(*x);
                    let sm = broadcast_binary(xv, y, xv.shape(), |a, l| (a - l).exp());
                    let full = broadcast_binary(&sm, &g, xv.shape(), |s, gv| s * gv);
                    accumulate(&mut grads[x.0], full);
                }
                Op::GatherRows(x, idx) => {
                    let [xr, xc] = self.shape(*x);
                    let mut full = Tensor::zeros(xr, xc);
                    let buf = full.data_mut();
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, v) in buf[i * xc..(i + 1) * xc].iter_mut().zip(g.row_slice(k)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[x.0], full);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("shape")
}

/// Stable `log Σ exp` of a slice.
pub fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}
