//! Tape-based reverse-mode differentiation.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! tape from the root towards the leaves and returns fresh gradient
//! accumulators, so repeated calls on the same tape give identical results.

use crate::error::{contract, Error, Result};
use crate::numerics::Tensor;
use crate::Scalar;

/// Negative-side slope of `leaky_relu`.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    DivScalar(Var, S),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    Recip(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    LeakyRelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        gold: usize,
        probs: Vec<S>,
    },
    Sum(Var),
    MeanRows(Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        x: Var,
        idx: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    PairwiseDiff(Var),
    /// Cached `z`, `r`, `n` and the hidden candidate block, `h` each.
    GruStep {
        xw: Var,
        row: usize,
        state: Var,
        w: Var,
        b: Var,
        gates: Vec<S>,
    },
}

#[derive(Clone, Debug)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// `None` when the node does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Single-owner tape of recorded operations.
#[derive(Clone, Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Splits `shape` around `axis` into (outer, n, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> Result<S> {
        self.value(v).item()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push_checked(&mut self, op: Op<S>, value: Tensor<S>, inputs: &[Var], name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        let rg = self.rg(inputs);
        Ok(self.push(op, value, rg))
    }

    /// Trainable leaf; receives a gradient.
    pub fn param(&mut self, t: Tensor<S>) -> Result<Var> {
        let t = t.check_finite("param")?;
        Ok(self.push(Op::Leaf, t, true))
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Result<Var> {
        let t = t.check_finite("constant")?;
        Ok(self.push(Op::Leaf, t, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push_checked(Op::MatMul(a, b), out, &[a, b], "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push_checked(Op::Add(a, b), out, &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push_checked(Op::Sub(a, b), out, &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push_checked(Op::Mul(a, b), out, &[a, b], "mul")
    }

    /// `x[m×n] + b[n]` with `b` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("add_row")?;
        let bv = self.value(b);
        if bv.len() != n || bv.rank() > 2 {
            return Err(Error::Shape { op: "add_row", left: self.shape(x).to_vec(), right: bv.shape().to_vec() });
        }
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bv.data()[j];
            }
        }
        let out = Tensor::from_parts(vec![m, n], data);
        self.push_checked(Op::AddRow(x, b), out, &[x, b], "add_row")
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push_checked(Op::Scale(x, c), out, &[x], "scale")
    }

    /// `x / c` for a nonzero constant `c`.
    pub fn div_scalar(&mut self, x: Var, c: S) -> Result<Var> {
        if c == S::zero() {
            return Err(Error::Domain { op: "div_scalar", detail: "division by zero".into() });
        }
        let out = self.value(x).map(|v| v / c);
        self.push_checked(Op::DivScalar(x, c), out, &[x], "div_scalar")
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.push_checked(Op::AddScalar(x), out, &[x], "add_scalar")
    }

    /// `x * s` where `s` is a one-element node.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let out = self.value(x).map(|v| v * sv);
        self.push_checked(Op::MulScalarVar(x, s), out, &[x, s], "mul_scalar_var")
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v == S::zero()) {
            return Err(Error::Domain { op: "recip", detail: "division by zero".into() });
        }
        let out = self.value(x).map(|v| v.recip());
        self.push_checked(Op::Recip(x), out, &[x], "recip")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push_checked(Op::Sigmoid(x), out, &[x], "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(S::tanh);
        self.push_checked(Op::Tanh(x), out, &[x], "tanh")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(S::exp);
        self.push_checked(Op::Exp(x), out, &[x], "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= S::zero()) {
            return Err(Error::Domain { op: "log", detail: format!("nonpositive input {bad}") });
        }
        let out = self.value(x).map(S::ln);
        self.push_checked(Op::Log(x), out, &[x], "log")
    }

    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        let slope = S::lit(LEAKY_SLOPE);
        let out = self.value(x).map(|v| if v > S::zero() { v } else { v * slope });
        self.push_checked(Op::LeakyRelu(x), out, &[x], "leaky_relu")
    }

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::Shape { op: "softmax", left: t.shape().to_vec(), right: vec![axis] });
        }
        let out = softmax_along(t, axis);
        self.push_checked(Op::Softmax { x, axis }, out, &[x], "softmax")
    }

    /// `-log softmax(logits)[gold]` over a flat logit vector.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, gold: usize) -> Result<Var> {
        let t = self.value(logits);
        let n = t.len();
        if gold >= n {
            return Err(Error::Index { index: gold, len: n });
        }
        let flat = Tensor::from_parts(vec![n], t.data().to_vec());
        let probs = softmax_along(&flat, 0).into_data();
        let max = flat.data().iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + flat.data().iter().map(|&v| (v - max).exp()).sum::<S>().ln();
        let out = Tensor::scalar(lse - flat.data()[gold]);
        self.push_checked(Op::CrossEntropy { logits, gold, probs }, out, &[logits], "cross_entropy")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_checked(Op::Sum(x), out, &[x], "sum")
    }

    /// Column means of a matrix, `[m×n] -> [n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2("mean_rows")?;
        let inv = S::one() / S::from_usize_lossy(m);
        let mut data = vec![S::zero(); n];
        for i in 0..m {
            for (d, &v) in data.iter_mut().zip(t.row(i)) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d *= inv);
        let out = Tensor::from_parts(vec![n], data);
        self.push_checked(Op::MeanRows(x), out, &[x], "mean_rows")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        self.push_checked(Op::Transpose(x), out, &[x], "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push_checked(Op::Reshape(x), out, &[x], "reshape")
    }

    /// Concatenation of rank-1 tensors (`axis` 0) or rank-2 tensors (`axis` 0 or 1).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| contract("concat of zero parts"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() || base.len() > 2 {
            return Err(Error::Shape { op: "concat", left: base, right: vec![axis] });
        }
        let mut shape = base.clone();
        shape[axis] = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len() && s.iter().enumerate().all(|(d, &e)| d == axis || e == base[d]);
            if !compatible {
                return Err(Error::Shape { op: "concat", left: base, right: s.to_vec() });
            }
            shape[axis] += s[axis];
        }
        let data = if axis == 0 {
            parts.iter().flat_map(|p| self.value(*p).data().iter().copied()).collect()
        } else {
            let rows = base[0];
            let mut data = Vec::with_capacity(shape.iter().product());
            for i in 0..rows {
                for p in parts {
                    data.extend_from_slice(self.value(*p).row(i));
                }
            }
            data
        };
        let out = Tensor::from_parts(shape, data);
        self.push_checked(Op::Concat { parts: parts.to_vec(), axis }, out, parts, "concat")
    }

    /// Contiguous range `[start, start+len)` along `axis` of a matrix.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2("slice")?;
        let extent = if axis == 0 { m } else { n };
        if axis > 1 || len == 0 || start + len > extent {
            return Err(Error::Shape { op: "slice", left: vec![m, n], right: vec![axis, start, len] });
        }
        let out = if axis == 0 {
            Tensor::from_parts(vec![len, n], t.data()[start * n..(start + len) * n].to_vec())
        } else {
            let mut data = Vec::with_capacity(m * len);
            for i in 0..m {
                data.extend_from_slice(&t.row(i)[start..start + len]);
            }
            Tensor::from_parts(vec![m, len], data)
        };
        self.push_checked(Op::Slice { x, axis, start }, out, &[x], "slice")
    }

    /// One recurrent step: `xw[row]` holds the input gate pre-activations
    /// `[z | r | n]` and `state` is `[1×h]`. Gates use `w[h×3h]` and `b[3h]`.
    /// Computes `h' = n + z·(h − n)` with `n = tanh(x_n + r·(h·W_n + b_n))`.
    pub fn gru_step(&mut self, xw: Var, row: usize, state: Var, w: Var, b: Var) -> Result<Var> {
        let (m, width) = self.value(xw).dims2("gru_step")?;
        let (one, h) = self.value(state).dims2("gru_step")?;
        let bad = || Error::Shape { op: "gru_step", left: vec![m, width], right: vec![row, one, h] };
        if row >= m || one != 1 || width != 3 * h || self.shape(w) != [h, 3 * h] || self.value(b).len() != 3 * h {
            return Err(bad());
        }
        let mut hu = self.value(state).matmul(self.value(w))?;
        for (v, &bj) in hu.data_mut().iter_mut().zip(self.value(b).data()) {
            *v += bj;
        }
        let x = &self.value(xw).row(row);
        let hv = self.value(state).data();
        let hu = hu.data();
        let mut gates = vec![S::zero(); 4 * h];
        let mut out = vec![S::zero(); h];
        for j in 0..h {
            let z = sigmoid(x[j] + hu[j]);
            let r = sigmoid(x[h + j] + hu[h + j]);
            let n = (x[2 * h + j] + r * hu[2 * h + j]).tanh();
            out[j] = n + z * (hv[j] - n);
            gates[j] = z;
            gates[h + j] = r;
            gates[2 * h + j] = n;
            gates[3 * h + j] = hu[2 * h + j];
        }
        let out = Tensor::from_parts(vec![1, h], out);
        self.push_checked(Op::GruStep { xw, row, state, w, b, gates }, out, &[xw, state, w, b], "gru_step")
    }

    /// Gathers entries (rank 1) or rows (rank 2) along the first axis.
    pub fn index_select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if idx.is_empty() || t.rank() == 0 || t.rank() > 2 {
            return Err(Error::Shape { op: "index_select", left: t.shape().to_vec(), right: vec![idx.len()] });
        }
        let rows = t.shape()[0];
        let width = if t.rank() == 2 { t.shape()[1] } else { 1 };
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index { index: i, len: rows });
            }
            data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let out = Tensor::from_parts(shape, data);
        self.push_checked(Op::IndexSelect { x, idx: idx.to_vec() }, out, &[x], "index_select")
    }

    /// Row-wise layer normalisation of `x[m×d]` with scale and shift `[d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let t = self.value(x);
        let (m, d) = t.dims2("layer_norm")?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::Shape { op: "layer_norm", left: vec![m, d], right: self.shape(gamma).to_vec() });
        }
        let dn = S::from_usize_lossy(d);
        let mut xhat = Vec::with_capacity(m * d);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = t.row(i);
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let inv = (var + eps).sqrt().recip();
            inv_std.push(inv);
            xhat.extend(row.iter().map(|&v| (v - mean) * inv));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let data = xhat.iter().enumerate().map(|(k, &h)| h * g[k % d] + b[k % d]).collect();
        let out = Tensor::from_parts(vec![m, d], data);
        let op = Op::LayerNorm { x, gamma, beta, xhat, inv_std };
        self.push_checked(op, out, &[x, gamma, beta], "layer_norm")
    }

    /// `out[i][j] = x[i] - x[j]` for a vector `x`.
    pub fn pairwise_diff(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 {
            return Err(Error::Shape { op: "pairwise_diff", left: t.shape().to_vec(), right: vec![] });
        }
        let n = t.len();
        let v = t.data();
        let data = (0..n * n).map(|k| v[k / n] - v[k % n]).collect();
        let out = Tensor::from_parts(vec![n, n], data);
        self.push_checked(Op::PairwiseDiff(x), out, &[x], "pairwise_diff")
    }

    /// Dot product of two equal-shape nodes, as a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(contract(format!("backward root must be scalar, got shape {:?}", rv.shape())));
        }
        self.backward_with_seed(root, Tensor::from_parts(rv.shape().to_vec(), vec![S::one()]))
    }

    fn backward_with_seed(&self, root: Var, seed: Tensor<S>) -> Result<Gradients<S>> {
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.propagate(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    /// The gradient buffer of `v`, created as zeros on first use.
    fn grad_slot<'a>(&self, grads: &'a mut [Option<Tensor<S>>], v: Var) -> Option<&'a mut Tensor<S>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| self.value(v).zeros_like()))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<S>, gy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let ga = gy.matmul_nt(self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if let Some(slot) = self.grad_slot(grads, *b) {
                    self.value(*a).matmul_tn_into(gy, slot)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let ga = gy.zip_map(self.value(*b), "mul", |g, v| g * v)?;
                let gb = gy.zip_map(self.value(*a), "mul", |g, v| g * v)?;
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, gy.clone());
                let n = gy.shape()[1];
                let mut gb = vec![S::zero(); n];
                for i in 0..gy.shape()[0] {
                    for (acc, &g) in gb.iter_mut().zip(gy.row(i)) {
                        *acc += g;
                    }
                }
                let shape = self.shape(*b).to_vec();
                self.accumulate(grads, *b, Tensor::from_parts(shape, gb));
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, gy.map(|g| g * c));
            }
            Op::DivScalar(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, gy.map(|g| g / c));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, gy.data().to_vec()));
            }
            Op::MulScalarVar(x, s) => {
                let sv = self.value(*s).item()?;
                self.accumulate(grads, *x, gy.map(|g| g * sv));
                let gs: S = gy.data().iter().zip(self.value(*x).data()).map(|(&g, &v)| g * v).sum();
                let shape = self.shape(*s).to_vec();
                self.accumulate(grads, *s, Tensor::from_parts(shape, vec![gs]));
            }
            Op::Recip(x) => {
                let g = gy.zip_map(y, "recip", |g, r| -g * r * r)?;
                self.accumulate(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let g = gy.zip_map(y, "sigmoid", |g, s| g * s * (S::one() - s))?;
                self.accumulate(grads, *x, g);
            }
            Op::Tanh(x) => {
                let g = gy.zip_map(y, "tanh", |g, t| g * (S::one() - t * t))?;
                self.accumulate(grads, *x, g);
            }
            Op::Exp(x) => {
                let g = gy.zip_map(y, "exp", |g, e| g * e)?;
                self.accumulate(grads, *x, g);
            }
            Op::Log(x) => {
                let g = gy.zip_map(self.value(*x), "log", |g, v| g / v)?;
                self.accumulate(grads, *x, g);
            }
            Op::LeakyRelu(x) => {
                let slope = S::lit(LEAKY_SLOPE);
                let g = gy.zip_map(self.value(*x), "leaky_relu", |g, v| if v > S::zero() { g } else { g * slope })?;
                self.accumulate(grads, *x, g);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_extents(y.shape(), *axis);
                let mut gx = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let dot: S = (0..n).map(|k| gy.data()[at(k)] * y.data()[at(k)]).sum();
                        for k in 0..n {
                            gx[at(k)] = y.data()[at(k)] * (gy.data()[at(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), gx));
            }
            Op::CrossEntropy { logits, gold, probs } => {
                let g = gy.item()?;
                let mut gx: Vec<S> = probs.iter().map(|&p| p * g).collect();
                gx[*gold] -= g;
                let shape = self.shape(*logits).to_vec();
                self.accumulate(grads, *logits, Tensor::from_parts(shape, gx));
            }
            Op::Sum(x) => {
                let g = gy.item()?;
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(shape, g));
            }
            Op::MeanRows(x) => {
                let (m, n) = self.value(*x).dims2("mean_rows")?;
                let inv = S::one() / S::from_usize_lossy(m);
                let row: Vec<S> = gy.data().iter().map(|&g| g * inv).collect();
                let data = (0..m).flat_map(|_| row.iter().copied()).collect();
                self.accumulate(grads, *x, Tensor::from_parts(vec![m, n], data));
            }
            Op::Transpose(x) => {
                self.accumulate(grads, *x, gy.transpose()?);
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for p in parts {
                        let shape = self.shape(*p).to_vec();
                        let len = self.value(*p).len();
                        let g = Tensor::from_parts(shape, gy.data()[offset..offset + len].to_vec());
                        offset += len;
                        self.accumulate(grads, *p, g);
                    }
                } else {
                    let (rows, total) = gy.dims2("concat")?;
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.shape(*p)[1];
                        let mut data = Vec::with_capacity(rows * cols);
                        for i in 0..rows {
                            data.extend_from_slice(&gy.data()[i * total + offset..i * total + offset + cols]);
                        }
                        offset += cols;
                        self.accumulate(grads, *p, Tensor::from_parts(vec![rows, cols], data));
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let n = self.value(*x).dims2("slice")?.1;
                let (rows, cols) = gy.dims2("slice")?;
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let gx = gx.data_mut();
                    for i in 0..rows {
                        for j in 0..cols {
                            let (si, sj) = if *axis == 0 { (i + start, j) } else { (i, j + start) };
                            gx[si * n + sj] += gy.data()[i * cols + j];
                        }
                    }
                }
            }
            Op::IndexSelect { x, idx } => {
                let xt = self.value(*x);
                let width = if xt.rank() == 2 { xt.shape()[1] } else { 1 };
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let gx = gx.data_mut();
                    for (k, &i) in idx.iter().enumerate() {
                        for w in 0..width {
                            gx[i * width + w] += gy.data()[k * width + w];
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (m, d) = gy.dims2("layer_norm")?;
                let g = self.value(*gamma).data();
                let dn = S::from_usize_lossy(d);
                let mut gx = vec![S::zero(); m * d];
                let mut ggamma = vec![S::zero(); d];
                let mut gbeta = vec![S::zero(); d];
                for i in 0..m {
                    let gyr = gy.row(i);
                    let xh = &xhat[i * d..(i + 1) * d];
                    let dxhat: Vec<S> = (0..d).map(|j| gyr[j] * g[j]).collect();
                    let sum_d: S = dxhat.iter().copied().sum();
                    let sum_dx: S = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[i * d + j] = inv_std[i] / dn * (dn * dxhat[j] - sum_d - xh[j] * sum_dx);
                        ggamma[j] += gyr[j] * xh[j];
                        gbeta[j] += gyr[j];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![m, d], gx));
                let gs = self.shape(*gamma).to_vec();
                self.accumulate(grads, *gamma, Tensor::from_parts(gs, ggamma));
                let bs = self.shape(*beta).to_vec();
                self.accumulate(grads, *beta, Tensor::from_parts(bs, gbeta));
            }
            Op::GruStep { xw, row, state, w, b, gates } => {
                let h = gy.len();
                let hv = self.value(*state).data();
                let (z, rest) = gates.split_at(h);
                let (r, rest) = rest.split_at(h);
                let (n, hn) = rest.split_at(h);
                let mut pre = vec![S::zero(); 3 * h];
                let mut dhu = vec![S::zero(); 3 * h];
                let mut dstate = vec![S::zero(); h];
                for j in 0..h {
                    let g = gy.data()[j];
                    let dn = g * (S::one() - z[j]) * (S::one() - n[j] * n[j]);
                    let dz = g * (hv[j] - n[j]) * z[j] * (S::one() - z[j]);
                    let dr = dn * hn[j] * r[j] * (S::one() - r[j]);
                    pre[j] = dz;
                    pre[h + j] = dr;
                    pre[2 * h + j] = dn;
                    dhu[j] = dz;
                    dhu[h + j] = dr;
                    dhu[2 * h + j] = dn * r[j];
                    dstate[j] = g * z[j];
                }
                if let Some(gx) = self.grad_slot(grads, *xw) {
                    let width = 3 * h;
                    for (acc, &d) in gx.data_mut()[row * width..(row + 1) * width].iter_mut().zip(&pre) {
                        *acc += d;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for (acc, &d) in gb.data_mut().iter_mut().zip(&dhu) {
                        *acc += d;
                    }
                }
                if let Some(gw) = self.grad_slot(grads, *w) {
                    let gw = gw.data_mut();
                    for (i, &hi) in hv.iter().enumerate() {
                        for (acc, &d) in gw[i * 3 * h..(i + 1) * 3 * h].iter_mut().zip(&dhu) {
                            *acc += hi * d;
                        }
                    }
                }
                if self.nodes[state.0].requires_grad {
                    let wv = self.value(*w).data();
                    for (i, ds) in dstate.iter_mut().enumerate() {
                        let wr = &wv[i * 3 * h..(i + 1) * 3 * h];
                        *ds += wr.iter().zip(&dhu).map(|(&a, &d)| a * d).sum::<S>();
                    }
                    self.accumulate(grads, *state, Tensor::from_parts(vec![1, h], dstate));
                }
            }
            Op::PairwiseDiff(x) => {
                let n = self.value(*x).len();
                let mut gx = vec![S::zero(); n];
                for i in 0..n {
                    for j in 0..n {
                        let g = gy.data()[i * n + j];
                        gx[i] += g;
                        gx[j] -= g;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![n], gx));
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

fn softmax_along<S: Scalar>(t: &Tensor<S>, axis: usize) -> Tensor<S> {
    let (outer, n, inner) = axis_extents(t.shape(), axis);
    let src = t.data();
    let mut out = vec![S::zero(); t.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let max = (0..n).map(|k| src[at(k)]).fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for k in 0..n {
                let e = (src[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..n {
                out[at(k)] /= total;
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}
