//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already a topological order and backward is a single reverse sweep. A graph
//! and the values it owns stay on one thread; independent graphs may run on
//! different threads.
//!
//! Gradients are not accumulated across backward passes: a second call to
//! [`Graph::backward`] without [`Graph::reset_grads`] is a contract error.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    BroadcastRows(Var),
    Sum(Var),
    WeightedSum { x: Var, weights: Vec<T> },
    LstmGates { z: Var, c_prev: Var },
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Option<Vec<Option<Vec<T>>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds a tensor as a leaf; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are consistent")
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == T::zero() {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bb) in orow.iter_mut().zip(brow) {
                    *o += x * bb;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let out: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, shape, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `x[..., n] + b[n]`, the only broadcast the tape supports.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().expect("non-empty shape");
        let bshape = self.shape(b);
        let bn: usize = bshape.iter().product();
        if bn != n || bshape.iter().rev().skip(1).any(|&d| d != 1) {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(b)));
        }
        let bv = &self.nodes[b.0].value;
        let out: Vec<T> = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % n])
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, shape, Op::AddBias(x, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(out, shape, Op::Scale(x, c), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(out, shape, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(out, shape, Op::Tanh(x), ng)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::dim(op, self.shape(x), &[axis]));
        }
        Ok(())
    }

    fn check_finite(&self, op: &str, x: Var) -> Result<()> {
        if self.nodes[x.0].value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{op} received a non-finite input")));
        }
        Ok(())
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        self.check_finite("softmax", x)?;
        let shape = self.shape(x).to_vec();
        let out = softmax_along(&self.nodes[x.0].value, &shape, axis, false);
        let ng = self.ng(x);
        Ok(self.push(out, shape, Op::Softmax { x, axis }, ng))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        self.check_finite("log_softmax", x)?;
        let shape = self.shape(x).to_vec();
        let out = softmax_along(&self.nodes[x.0].value, &shape, axis, true);
        let ng = self.ng(x);
        Ok(self.push(out, shape, Op::LogSoftmax { x, axis }, ng))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let s = &self.nodes[p.0].shape;
                let chunk = s[axis] * inner;
                out.extend_from_slice(&self.nodes[p.0].value[o * chunk..(o + 1) * chunk]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            out,
            shape,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::dim("slice", &shape, &[start, len]));
        }
        let (outer, alen, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        let xv = &self.nodes[x.0].value;
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(out, oshape, Op::Slice { x, axis, start }, ng))
    }

    /// Row `i` of a matrix as a `[1 × n]` tensor.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice(x, 0, i, 1)
    }

    /// Stacks `[1 × n]` rows (or any matrices with equal width) vertically.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        self.concat(rows, 0)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let out = self.nodes[x.0].value.clone();
        let ng = self.ng(x);
        Ok(self.push(out, shape.to_vec(), Op::Reshape(x), ng))
    }

    /// Repeats a `[1 × n]` row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (r, n) = self.rank2("broadcast_rows", x)?;
        if r != 1 || rows == 0 {
            return Err(Error::dim("broadcast_rows", self.shape(x), &[rows, n]));
        }
        let v = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(v);
        }
        let ng = self.ng(x);
        Ok(self.push(out, vec![rows, n], Op::BroadcastRows(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().copied().sum();
        let ng = self.ng(x);
        self.push(vec![s], vec![1], Op::Sum(x), ng)
    }

    /// `Σ_i w_i · x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.nodes[x.0].value.len() {
            return Err(Error::dim("weighted_sum", self.shape(x), &[weights.len()]));
        }
        let s = self
            .nodes[x.0]
            .value
            .iter()
            .zip(&weights)
            .map(|(&a, &w)| a * w)
            .sum();
        let ng = self.ng(x);
        Ok(self.push(vec![s], vec![1], Op::WeightedSum { x, weights }, ng))
    }

    /// Fused LSTM gate nonlinearity.
    ///
    /// `z` holds pre-activations `[rows × 4h]` in gate order input, forget,
    /// cell candidate, output; `c_prev` is `[rows × h]`. Returns `[rows × 2h]`
    /// laid out as `[h_new, c_new]` per row.
    pub fn lstm_gates(&mut self, z: Var, c_prev: Var) -> Result<Var> {
        let (rows, four_h) = self.rank2("lstm_gates", z)?;
        let (crow, h) = self.rank2("lstm_gates", c_prev)?;
        if four_h != 4 * h || crow != rows {
            return Err(Error::dim("lstm_gates", self.shape(z), self.shape(c_prev)));
        }
        let zv = &self.nodes[z.0].value;
        let cv = &self.nodes[c_prev.0].value;
        let mut out = vec![T::zero(); rows * 2 * h];
        for r in 0..rows {
            let zr = &zv[r * 4 * h..(r + 1) * 4 * h];
            for j in 0..h {
                let i = sigmoid(zr[j]);
                let f = sigmoid(zr[h + j]);
                let g = zr[2 * h + j].tanh();
                let o = sigmoid(zr[3 * h + j]);
                let c = f * cv[r * h + j] + i * g;
                out[r * 2 * h + j] = o * c.tanh();
                out[r * 2 * h + h + j] = c;
            }
        }
        let ng = self.ng(z) || self.ng(c_prev);
        Ok(self.push(out, vec![rows, 2 * h], Op::LstmGates { z, c_prev }, ng))
    }

    /// Runs backward from a scalar `loss`, filling gradients of every node that
    /// depends on a `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Contract(
                "gradients already present; call reset_grads before a second backward".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        grads.resize(self.nodes.len(), None);
        self.grads = Some(grads);
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    pub fn has_grads(&self) -> bool {
        self.grads.is_some()
    }

    /// Gradient of the last backward pass with respect to `v`, if it has one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads
            .as_ref()
            .and_then(|g| g.get(v.0))
            .and_then(|g| g.as_deref())
    }

    fn backprop_node(&self, idx: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        let gyr = &gy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let mut s = T::zero();
                            for (&g, &bb) in gyr.iter().zip(brow) {
                                s += g * bb;
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        let gyr = &gy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == T::zero() {
                                continue;
                            }
                            for (o, &g) in gb[p * n..(p + 1) * n].iter_mut().zip(gyr) {
                                *o += x * g;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(o, &d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                acc(*a, &mut |g| {
                    for ((o, &d), &bb) in g.iter_mut().zip(gy).zip(bv) {
                        *o += d * bb;
                    }
                });
                acc(*b, &mut |g| {
                    for ((o, &d), &aa) in g.iter_mut().zip(gy).zip(av) {
                        *o += d * aa;
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| {
                    let n = g.len();
                    for (i, &d) in gy.iter().enumerate() {
                        g[i % n] += d;
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(o, &d)| *o += d * *c));
            }
            Op::Sigmoid(x) => acc(*x, &mut |g| {
                for ((o, &d), &s) in g.iter_mut().zip(gy).zip(y) {
                    *o += d * s * (T::one() - s);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |g| {
                for ((o, &d), &t) in g.iter_mut().zip(gy).zip(y) {
                    *o += d * (T::one() - t * t);
                }
            }),
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: T = (0..n).map(|j| gy[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                g[at(j)] += y[at(j)] * (gy[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let total: T = (0..n).map(|j| gy[at(j)]).sum();
                            for j in 0..n {
                                g[at(j)] += gy[at(j)] - y[at(j)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].shape[*axis];
                    acc(p, &mut |g| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            add_into(&mut g[dst..dst + len * inner], &gy[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = &self.nodes[x.0].shape;
                let (outer, alen, inner) = split_axis(xs, *axis);
                let len = node.shape[*axis];
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        let dst = o * alen * inner + start * inner;
                        let src = o * len * inner;
                        add_into(&mut g[dst..dst + len * inner], &gy[src..src + len * inner]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gy)),
            Op::BroadcastRows(x) => acc(*x, &mut |g| {
                let n = g.len();
                for (i, &d) in gy.iter().enumerate() {
                    g[i % n] += d;
                }
            }),
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|o| *o += gy[0])),
            Op::WeightedSum { x, weights } => acc(*x, &mut |g| {
                for (o, &w) in g.iter_mut().zip(weights) {
                    *o += gy[0] * w;
                }
            }),
            Op::LstmGates { z, c_prev } => {
                let rows = node.shape[0];
                let h = node.shape[1] / 2;
                let zv = &self.nodes[z.0].value;
                let cv = &self.nodes[c_prev.0].value;
                let mut dz = vec![T::zero(); rows * 4 * h];
                let mut dcp = vec![T::zero(); rows * h];
                for r in 0..rows {
                    let zr = &zv[r * 4 * h..(r + 1) * 4 * h];
                    for j in 0..h {
                        let i = sigmoid(zr[j]);
                        let f = sigmoid(zr[h + j]);
                        let gc = zr[2 * h + j].tanh();
                        let o = sigmoid(zr[3 * h + j]);
                        let c = y[r * 2 * h + h + j];
                        let tc = c.tanh();
                        let dh = gy[r * 2 * h + j];
                        let dc = gy[r * 2 * h + h + j] + dh * o * (T::one() - tc * tc);
                        let cp = cv[r * h + j];
                        dz[r * 4 * h + j] = dc * gc * i * (T::one() - i);
                        dz[r * 4 * h + h + j] = dc * cp * f * (T::one() - f);
                        dz[r * 4 * h + 2 * h + j] = dc * i * (T::one() - gc * gc);
                        dz[r * 4 * h + 3 * h + j] = dh * tc * o * (T::one() - o);
                        dcp[r * h + j] = dc * f;
                    }
                }
                acc(*z, &mut |g| add_into(g, &dz));
                acc(*c_prev, &mut |g| add_into(g, &dcp));
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

fn softmax_along<T: Scalar>(x: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..n {
                mx = mx.max(x[at(j)]);
            }
            let mut z = T::zero();
            for j in 0..n {
                z += (x[at(j)] - mx).exp();
            }
            if log {
                let lz = z.ln();
                for j in 0..n {
                    out[at(j)] = x[at(j)] - mx - lz;
                }
            } else {
                for j in 0..n {
                    out[at(j)] = (x[at(j)] - mx).exp() / z;
                }
            }
        }
    }
    out
}

/// Composed LSTM step: `z = x·W_x + h·W_h + b`, then [`Graph::lstm_gates`].
///
/// `x` is `[1 × d_in]`, `h_prev`/`c_prev` are `[1 × d_h]`; `w_x` is
/// `[d_in × 4d_h]`, `w_h` is `[d_h × 4d_h]`, `b` is `[4d_h]`.
pub fn lstm_cell<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    w_x: Var,
    w_h: Var,
    b: Var,
) -> Result<(Var, Var)> {
    let xw = g.matmul(x, w_x)?;
    let hw = g.matmul(h_prev, w_h)?;
    let z = g.add(xw, hw)?;
    let z = g.add_bias(z, b)?;
    lstm_from_preact(g, z, c_prev)
}

/// Splits the fused gate output into `(h, c)`.
pub fn lstm_from_preact<T: Scalar>(g: &mut Graph<T>, z: Var, c_prev: Var) -> Result<(Var, Var)> {
    let hc = g.lstm_gates(z, c_prev)?;
    let d_h = g.shape(c_prev)[1];
    let h = g.slice(hc, 1, 0, d_h)?;
    let c = g.slice(hc, 1, d_h, d_h)?;
    Ok((h, c))
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient(
    x: &Tensor<f64>,
    step: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let up = f(&probe);
            probe.data_mut()[i] = orig - step;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Relative error used by gradient checks: `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Denominator floor for [`relative_error`] in gradient checks.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small_product() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(&t(&[2, 1], &[1., 1.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[3., 7.]);
        assert_eq!(g.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&Tensor::zeros(&[2, 3]));
        let b = g.constant(&Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn identity_matmul_is_noop() {
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5 - 1.0);
        let mut g = Graph::new();
        let i3 = g.constant(&Tensor::identity(3));
        let xv = g.constant(&x);
        let y = g.matmul(i3, xv).unwrap();
        assert_eq!(g.value(y), x.data());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[3], &[0., 0., 0.]));
        let s = g.softmax(a, 0).unwrap();
        for &v in g.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = g.constant(&t(&[3], &[1000., 0., 0.]));
        let s = g.softmax(b, 0).unwrap();
        let v = g.value(s);
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300 && v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[2], &[f64::NAN, 0.]));
        assert!(matches!(g.softmax(a, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_sum_and_quadratic() {
        let w = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5).with_grad(true);
        let mut g = Graph::new();
        let wv = g.leaf(&w);
        let s = g.sum(wv);
        g.backward(s).unwrap();
        assert!(g.grad(wv).unwrap().iter().all(|&x| x == 1.0));

        let mut g = Graph::new();
        let wv = g.leaf(&w);
        let sq = g.mul(wv, wv).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(wv).unwrap(), w.data());
    }

    #[test]
    fn second_backward_without_reset_is_error() {
        let w = Tensor::from_fn(&[3], |i| i as f64).with_grad(true);
        let mut g = Graph::new();
        let wv = g.leaf(&w);
        let s = g.sum(wv);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
        let first = g.grad(wv).unwrap().to_vec();
        g.reset_grads();
        g.backward(s).unwrap();
        assert_eq!(first, g.grad(wv).unwrap());
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let w = Tensor::from_fn(&[3], |i| i as f64).with_grad(true);
        let mut g = Graph::new();
        let wv = g.leaf(&w);
        assert!(matches!(g.backward(wv), Err(Error::Contract(_))));
    }

    #[test]
    fn lstm_zero_params_give_zero_state() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::from_fn(&[1, 3], |i| i as f64 + 1.0));
        let h = g.constant(&Tensor::zeros(&[1, 2]));
        let c = g.constant(&Tensor::zeros(&[1, 2]));
        let wx = g.constant(&Tensor::zeros(&[3, 8]));
        let wh = g.constant(&Tensor::zeros(&[2, 8]));
        let b = g.constant(&Tensor::zeros(&[8]));
        let (h1, c1) = lstm_cell(&mut g, x, h, c, wx, wh, b).unwrap();
        assert!(g.value(h1).iter().all(|&v| v == 0.0));
        assert!(g.value(c1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_carry_keeps_cell() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::from_fn(&[1, 3], |i| i as f64 - 1.0));
        let h = g.constant(&t(&[1, 2], &[0.3, -0.2]));
        let c = g.constant(&t(&[1, 2], &[0.7, -1.3]));
        let wx = g.constant(&Tensor::zeros(&[3, 8]));
        let wh = g.constant(&Tensor::zeros(&[2, 8]));
        // input gate closed, forget gate open
        let mut bias = vec![0.0; 8];
        bias[..2].copy_from_slice(&[-60.0, -60.0]);
        bias[2..4].copy_from_slice(&[60.0, 60.0]);
        let b = g.constant(&t(&[8], &bias));
        let (_, c1) = lstm_cell(&mut g, x, h, c, wx, wh, b).unwrap();
        assert_eq!(g.value(c1), &[0.7, -1.3]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(&t(&[2, 1], &[5., 6.]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), &[1., 2., 5., 3., 4., 6.]);
        let s = g.slice(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(s), &[5., 6.]);
        let r = g.concat(&[a, a], 0).unwrap();
        assert_eq!(g.shape(r), &[4, 2]);
    }
}
