//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass as a node that
//! holds its value and its parents. [`Tape::backward`] walks the nodes in
//! reverse recording order, which is a valid reverse topological order
//! because a node can only reference nodes recorded before it.
//!
//! Leaves come in two kinds: trainable parameters registered with
//! [`Tape::param`] under a caller-chosen key, and constants. Gradients are
//! only propagated through nodes that depend on a parameter. A tape serves
//! exactly one backward pass; training builds a fresh tape per step.

use std::collections::BTreeMap;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// keeps the per-row norms of the input
    L2NormalizeRows(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    traced: bool,
}

pub type Gradients<K> = BTreeMap<K, Matrix>;

pub struct Tape<K: Ord + Clone> {
    nodes: Vec<Node>,
    params: BTreeMap<K, Var>,
    consumed: bool,
}

impl<K: Ord + Clone> Default for Tape<K> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K: Ord + Clone> Tape<K> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    pub fn is_traced(&self, v: Var) -> bool {
        self.nodes[v.0].traced
    }

    pub fn param_keys(&self) -> impl Iterator<Item = &K> {
        self.params.keys()
    }

    fn push(&mut self, value: Matrix, op: Op, traced: bool) -> Var {
        self.nodes.push(Node { value, op, traced });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a trainable leaf. Registering the same key twice returns
    /// the existing handle.
    pub fn param(&mut self, key: K, value: &Matrix) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(key, v);
        v
    }

    fn traced1(&self, a: Var) -> bool {
        self.nodes[a.0].traced
    }

    fn traced2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].traced || self.nodes[b.0].traced
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let t = self.traced2(a, b);
        Ok(self.push(value, Op::MatMul(a, b), t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let t = self.traced2(a, b);
        Ok(self.push(value, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let t = self.traced2(a, b);
        Ok(self.push(value, Op::Sub(a, b), t))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let t = self.traced2(a, b);
        Ok(self.push(value, Op::Mul(a, b), t))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let t = self.traced1(a);
        self.push(value, Op::Scale(a, c), t)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        let t = self.traced1(a);
        self.push(value, Op::AddScalar(a), t)
    }

    /// Broadcast-adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row(self.value(bias))?;
        let t = self.traced2(a, bias);
        Ok(self.push(value, Op::AddRow(a, bias), t))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        let t = self.traced1(a);
        self.push(value, Op::Relu(a), t)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let t = self.traced1(a);
        self.push(value, Op::Abs(a), t)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        let t = self.traced1(a);
        self.push(value, Op::Square(a), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let t = self.traced1(a);
        self.push(value, Op::Transpose(a), t)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        let t = self.traced1(a);
        self.push(value, Op::SoftmaxRows(a), t)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).log_softmax_rows();
        let t = self.traced1(a);
        self.push(value, Op::LogSoftmaxRows(a), t)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).l2_normalize_rows()?;
        let norms = self.value(a).row_norms();
        let t = self.traced1(a);
        Ok(self.push(value, Op::L2NormalizeRows(a, norms), t))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let t = self.traced1(a);
        self.push(value, Op::Sum(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = (m.rows() * m.cols()).max(1) as f64;
        let value = Matrix::scalar(m.sum() / n);
        let t = self.traced1(a);
        self.push(value, Op::Mean(a), t)
    }

    /// Reverse pass from a scalar `loss`. Returns one gradient per
    /// registered parameter; parameters the loss does not depend on get an
    /// exact zero matrix. The tape cannot be reused afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<K>> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        let (rows, cols) = self.value(loss).shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].traced {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.traced1(a) {
                        let ga = g.matmul(&self.value(b).transpose())?;
                        accumulate(&mut grads, a, ga);
                    }
                    if self.traced1(b) {
                        let gb = self.value(a).transpose().matmul(&g)?;
                        accumulate(&mut grads, b, gb);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.traced1(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if self.traced1(b) {
                        accumulate(&mut grads, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.traced1(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if self.traced1(b) {
                        accumulate(&mut grads, b, g.scale(-1.0));
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.traced1(a) {
                        let ga = g.zip_map(self.value(b), "mul", |x, y| x * y)?;
                        accumulate(&mut grads, a, ga);
                    }
                    if self.traced1(b) {
                        let gb = g.zip_map(self.value(a), "mul", |x, y| x * y)?;
                        accumulate(&mut grads, b, gb);
                    }
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    accumulate(&mut grads, a, g.scale(c));
                }
                Op::AddScalar(a) => {
                    let a = *a;
                    accumulate(&mut grads, a, g);
                }
                Op::AddRow(a, bias) => {
                    let (a, bias) = (*a, *bias);
                    if self.traced1(bias) {
                        let mut gb = Matrix::zeros(1, g.cols());
                        for row in g.row_iter() {
                            for (acc, v) in gb.as_mut_slice().iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, bias, gb);
                    }
                    if self.traced1(a) {
                        accumulate(&mut grads, a, g);
                    }
                }
                Op::Relu(a) => {
                    let a = *a;
                    let ga = g.zip_map(self.value(a), "relu", |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut grads, a, ga);
                }
                Op::Abs(a) => {
                    let a = *a;
                    let ga = g.zip_map(self.value(a), "abs", |gv, x| {
                        if x > 0.0 {
                            gv
                        } else if x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads, a, ga);
                }
                Op::Square(a) => {
                    let a = *a;
                    let ga = g.zip_map(self.value(a), "square", |gv, x| 2.0 * x * gv)?;
                    accumulate(&mut grads, a, ga);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    accumulate(&mut grads, a, g.transpose());
                }
                Op::SoftmaxRows(a) => {
                    // dx = y * (g - <g, y>) per row
                    let a = *a;
                    let y = &node.value;
                    let mut ga = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = ga.row_mut(r);
                        let inner: f64 = gr.iter().zip(yr).map(|(gv, yv)| gv * yv).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = yv * (*gv - inner);
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    // dx = g - softmax(x) * sum(g) per row
                    let a = *a;
                    let p = self.value(a).softmax_rows();
                    let mut ga = g;
                    for r in 0..p.rows() {
                        let pr = p.row(r);
                        let gr = ga.row_mut(r);
                        let total: f64 = gr.iter().sum();
                        for (gv, pv) in gr.iter_mut().zip(pr) {
                            *gv -= pv * total;
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::L2NormalizeRows(a, norms) => {
                    // dx = (g - y <y, g>) / ||x|| per row
                    let a = *a;
                    let y = &node.value;
                    let mut ga = g;
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = ga.row_mut(r);
                        let inner: f64 = gr.iter().zip(yr).map(|(gv, yv)| gv * yv).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = (*gv - yv * inner) / n;
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Sum(a) => {
                    let a = *a;
                    let (r, c) = self.value(a).shape();
                    accumulate(&mut grads, a, Matrix::filled(r, c, g.as_slice()[0]));
                }
                Op::Mean(a) => {
                    let a = *a;
                    let (r, c) = self.value(a).shape();
                    let n = (r * c).max(1) as f64;
                    accumulate(&mut grads, a, Matrix::filled(r, c, g.as_slice()[0] / n));
                }
            }
        }

        let mut out = Gradients::new();
        for (key, v) in &self.params {
            let grad = grads[v.0].take().unwrap_or_else(|| {
                let (r, c) = self.value(*v).shape();
                Matrix::zeros(r, c)
            });
            out.insert(key.clone(), grad);
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
