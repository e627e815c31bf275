//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of a forward pass as a node holding
//! its value. Nodes are appended in evaluation order, so walking the tape
//! backwards is a valid topological order for [`Graph::backward`].
//!
//! Parameters enter through [`Graph::param`], which deduplicates by name so
//! a weight used several times accumulates all of its contributions. A graph
//! built with [`Graph::frozen`] records parameters as constants; nothing in
//! it can receive a gradient.

use std::collections::HashMap;

use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MaxPoolGroups {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SmoothL1 {
        a: Var,
        b: Var,
        delta: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording tape for one forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    trainable: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter the graph touched, by name. Parameters
    /// that do not influence the loss get a zero tensor of their shape via
    /// [`Gradients::param_grads_for`].
    pub fn param_grads(&self) -> HashMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.get(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    /// One gradient per entry of `store`, zero-filled where no gradient flowed.
    pub fn param_grads_for(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        let by_name: HashMap<&str, Var> =
            self.params.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        store
            .iter()
            .map(|(name, t)| {
                by_name
                    .get(name)
                    .and_then(|v| self.get(*v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
            })
            .collect()
    }
}

const GELU_K: f64 = 0.044_715;
// sqrt(2/pi)
const GELU_C: f64 = 0.797_884_560_802_865_4;

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph whose parameters are trainable.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            trainable: true,
        }
    }

    /// A graph whose parameters are recorded as constants.
    pub fn frozen() -> Self {
        Self {
            trainable: false,
            ..Self::new()
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf that is not a named parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Named parameter from `store`; repeated calls return the same node.
    ///
    /// Panics if the store has no such parameter.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = self.push(value, Op::Leaf, self.trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMulBt(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    fn zip(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "{what}: shape mismatch");
        Tensor::from_vec(
            x.rows(),
            x.cols(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, "add", |p, q| p + q);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, "sub", |p, q| p - q);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, "mul", |p, q| p * q);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    fn row_broadcast(&self, a: Var, row: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows(), 1, "broadcast operand must be a row vector");
        assert_eq!(x.cols(), r.cols(), "broadcast column mismatch");
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o = f(*o, b);
            }
        }
        out
    }

    /// Adds a `1×C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.row_broadcast(a, row, |p, q| p + q);
        let rg = self.rg(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1×C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.row_broadcast(a, row, |p, q| p * q);
        let rg = self.rg(&[a, row]);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
        let value = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with affine `1×C` gamma and beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let input = self.value(x);
        let (rows, cols) = input.shape();
        let n = T::of(cols as f64);
        let eps = T::of(eps);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = input.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, cols), "layer_norm gamma shape");
        assert_eq!(b.shape(), (1, cols), "layer_norm beta shape");
        let mut value = xhat.clone();
        for r in 0..rows {
            for (c, o) in value.row_mut(r).iter_mut().enumerate() {
                *o = *o * g.data()[c] + b.data()[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut value = Tensor::zeros(x.rows(), len);
        for r in 0..x.rows() {
            value.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[off..off + x.cols()].copy_from_slice(x.row(r));
            }
            off += x.cols();
        }
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors);
        let rg = self.rg(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Rows of `a` selected by `idx` (repeats allowed; gradients accumulate).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).gather_rows(idx);
        let rg = self.rg(&[a]);
        self.push(value, Op::GatherRows(a, idx.to_vec()), rg)
    }

    /// Channel-wise max over consecutive blocks of `group` rows:
    /// `(G·group)×C → G×C`. Ties resolve to the first row.
    pub fn max_pool_groups(&mut self, x: Var, group: usize) -> Var {
        let input = self.value(x);
        let (rows, cols) = input.shape();
        assert!(group > 0 && rows % group == 0, "max_pool_groups: ragged groups");
        let groups = rows / group;
        let mut value = Tensor::zeros(groups, cols);
        let mut argmax = vec![0usize; groups * cols];
        for g in 0..groups {
            for c in 0..cols {
                let mut best = g * group;
                for r in g * group + 1..(g + 1) * group {
                    if input.get(r, c) > input.get(best, c) {
                        best = r;
                    }
                }
                value.set(g, c, input.get(best, c));
                argmax[g * cols + c] = best;
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::MaxPoolGroups { x, argmax }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Mean over all entries; the mean of an empty tensor is 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = if x.is_empty() {
            T::zero()
        } else {
            x.sum() / T::of(x.len() as f64)
        };
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(value), Op::Mean(a), rg)
    }

    /// Mean squared error between `a` and `b`; 0 when both are empty.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Mean Smooth-L1 (Huber with threshold `delta`) between `a` and `b`.
    pub fn smooth_l1(&mut self, a: Var, b: Var, delta: f64) -> Var {
        let delta = T::of(delta);
        let half = T::of(0.5);
        let x = self.zip(a, b, "smooth_l1", |p, q| {
            let d = (p - q).abs();
            if d < delta {
                half * d * d / delta
            } else {
                d - half * delta
            }
        });
        let value = if x.is_empty() {
            T::zero()
        } else {
            x.sum() / T::of(x.len() as f64)
        };
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(value), Op::SmoothL1 { a, b, delta }, rg)
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward requires a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params: Vec<(String, Var)> =
            self.params.iter().map(|(n, v)| (n.clone(), *v)).collect();
        params.sort();
        Gradients { grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul_bt(y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, x.matmul_at(g));
                }
            }
            Op::MatMulBt(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul(y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.matmul_at(x));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let ga = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect(),
                );
                let gb = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(x.data()).map(|(&p, &q)| p * q).collect(),
                );
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*row) {
                    self.accumulate(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let (x, r) = (self.value(*a), self.value(*row));
                if self.requires_grad(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (o, &s) in ga.row_mut(i).iter_mut().zip(r.data()) {
                            *o = *o * s;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*row) {
                    let mut gr = Tensor::zeros(1, r.cols());
                    for i in 0..g.rows() {
                        for ((o, &gv), &xv) in gr.data_mut().iter_mut().zip(g.row(i)).zip(x.row(i))
                        {
                            *o = *o + gv * xv;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
                let three = T::of(3.0);
                let ga = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| {
                            let t = (c * (xv + k * xv * xv * xv)).tanh();
                            let du = c * (T::one() + three * k * xv * xv);
                            gv * (half * (T::one() + t) + half * xv * (T::one() - t * t) * du)
                        })
                        .collect(),
                );
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma);
                let (rows, cols) = xhat.shape();
                if self.requires_grad(*x) {
                    let n = T::of(cols as f64);
                    let mut gx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let dxhat: Vec<T> = g
                            .row(r)
                            .iter()
                            .zip(gam.data())
                            .map(|(&gv, &w)| gv * w)
                            .collect();
                        let s1: T = dxhat.iter().copied().sum();
                        let s2: T = dxhat.iter().zip(xhat.row(r)).map(|(&d, &h)| d * h).sum();
                        let scale = inv_std[r] / n;
                        for ((o, &d), &h) in gx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat.row(r))
                        {
                            *o = scale * (n * d - s1 - h * s2);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.requires_grad(*gamma) {
                    let mut gg = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for ((o, &gv), &h) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r))
                        {
                            *o = *o + gv * h;
                        }
                    }
                    self.accumulate(grads, *gamma, gg);
                }
                if self.requires_grad(*beta) {
                    self.accumulate(grads, *beta, column_sums(g));
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: T = g.row(r).iter().zip(y.row(r)).map(|(&p, &q)| p * q).sum();
                    for ((o, &gv), &yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                let w = g.cols();
                for r in 0..rows {
                    ga.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.requires_grad(p) {
                        let mut gp = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    off += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.requires_grad(p) && rows > 0 {
                        let data = g.data()[off * g.cols()..(off + rows) * g.cols()].to_vec();
                        self.accumulate(grads, p, Tensor::from_vec(rows, cols, data));
                    }
                    off += rows;
                }
            }
            Op::GatherRows(a, idx) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for (o, &i) in idx.iter().enumerate() {
                    for (d, &s) in ga.row_mut(i).iter_mut().zip(g.row(o)) {
                        *d = *d + s;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::MaxPoolGroups { x, argmax } => {
                let (rows, cols) = self.shape(*x);
                let mut gx = Tensor::zeros(rows, cols);
                for (slot, &src) in argmax.iter().enumerate() {
                    let (gi, c) = (slot / cols, slot % cols);
                    let cur = gx.get(src, c);
                    gx.set(src, c, cur + g.get(gi, c));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(rows, cols, g.item()));
            }
            Op::Mean(a) => {
                let (rows, cols) = self.shape(*a);
                if rows * cols > 0 {
                    let v = g.item() / T::of((rows * cols) as f64);
                    self.accumulate(grads, *a, Tensor::full(rows, cols, v));
                }
            }
            Op::SmoothL1 { a, b, delta } => {
                let (x, y) = (self.value(*a), self.value(*b));
                if x.is_empty() {
                    return;
                }
                let scale = g.item() / T::of(x.len() as f64);
                let delta = *delta;
                let ga = Tensor::from_vec(
                    x.rows(),
                    x.cols(),
                    x.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&p, &q)| {
                            let d = p - q;
                            let dl = if d.abs() < delta { d / delta } else { d.signum() };
                            dl * scale
                        })
                        .collect(),
                );
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, ga.map(|v| -v));
                }
                self.accumulate(grads, *a, ga);
            }
        }
    }
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o = *o + v;
        }
    }
    out
}
