//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into every node that depends on a parameter.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::tensor::{mm_nn, mm_nt, mm_tn, Real, Tensor};
use super::weights::Weights;
use crate::error::{invalid, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather(Var, Arc<[usize]>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    SumLast(Var),
    MaxRows(Var, Vec<usize>),
    BceLogits(Var, Vec<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Row count and width of the last axis, treating 1-D tensors as one row.
fn row_split(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let total: usize = shape.iter().product();
    (if cols == 0 { 0 } else { total / cols }, cols)
}

fn matrix_dims(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n] => Some((1, *n)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let a = T::c(0.044715);
    let half = T::c(0.5);
    let inner = k * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * k * (T::one() + T::c(3.0) * a * x * x);
    (y, dy)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf, registered under `name`.
    pub fn param(&mut self, name: &str, t: Tensor<T>) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(invalid(format!("parameter {name} bound twice")));
        }
        let v = self.push(t, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds every parameter of `weights` as a graph leaf.
    pub fn bind(&mut self, weights: &Weights<T>) -> Result<()> {
        for (name, t) in weights.iter() {
            self.param(name, t.clone())?;
        }
        Ok(())
    }

    /// Looks up a bound parameter.
    pub fn p(&self, name: &str) -> Result<Var> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("unknown parameter {name}")))
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a length-`d` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (_, cols) = row_split(ta.shape());
        if tr.len() != cols {
            return Err(Error::shape("add_row", ta.shape(), tr.shape()));
        }
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tr.data()[i % cols])
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::c(s);
        let ta = self.value(a);
        let out = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x * s).collect())?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Scale(a, s), ng))
    }

    /// `[m, k] @ [k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (matrix_dims(ta.shape()), matrix_dims(tb.shape())) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(Error::shape("matmul", ta.shape(), tb.shape())),
        };
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut c = vec![T::zero(); m * n];
        mm_nn(ta.data(), tb.data(), &mut c, m, k, n);
        let out = Tensor::new(&[m, n], c)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `[m, k] @ [n, k]^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = match (matrix_dims(ta.shape()), matrix_dims(tb.shape())) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(Error::shape("matmul_nt", ta.shape(), tb.shape())),
        };
        if k != k2 {
            return Err(Error::shape("matmul_nt", ta.shape(), tb.shape()));
        }
        let mut c = vec![T::zero(); m * n];
        mm_nt(ta.data(), tb.data(), &mut c, m, k, n);
        let out = Tensor::new(&[m, n], c)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulNT(a, b), ng))
    }

    /// Softmax over the last axis. Entries where `mask` is false get
    /// probability exactly zero; every row must keep at least one entry.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = row_split(ta.shape());
        if let Some(m) = mask {
            if m.len() != ta.len() {
                return Err(Error::shape("softmax mask", ta.shape(), &[m.len()]));
            }
        }
        let allowed = |i: usize| mask.is_none_or(|m| m[i]);
        let mut out = vec![T::zero(); ta.len()];
        for r in 0..rows {
            let base = r * cols;
            let row = &ta.data()[base..base + cols];
            let mut max = T::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if allowed(base + j) && x > max {
                    max = x;
                }
            }
            if max == T::neg_infinity() {
                return Err(invalid(format!("softmax row {r} is fully masked")));
            }
            let mut sum = T::zero();
            for (j, &x) in row.iter().enumerate() {
                if allowed(base + j) {
                    let e = (x - max).exp();
                    out[base + j] = e;
                    sum = sum + e;
                }
            }
            let inv = T::one() / sum;
            for v in &mut out[base..base + cols] {
                *v = *v * inv;
            }
        }
        let out = Tensor::new(ta.shape(), out)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = row_split(ta.shape());
        let mut out = vec![T::zero(); ta.len()];
        for r in 0..rows {
            let row = &ta.data()[r * cols..(r + 1) * cols];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let out = Tensor::new(ta.shape(), out)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::LogSoftmax(a), ng))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape(), ta.data().iter().map(|&x| gelu_parts(x).0).collect())?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Gelu(a), ng))
    }

    /// Normalizes the last axis, then applies `gamma * x + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, d) = row_split(tx.shape());
        if tg.len() != d || tb.len() != d {
            return Err(Error::shape("layernorm", tx.shape(), tg.shape()));
        }
        let eps = T::c(LAYERNORM_EPS);
        let dn = T::c(d as f64);
        let mut xhat = vec![T::zero(); tx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`. Covers
    /// embedding lookups, slices, broadcasts and permutations.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("gather", shape, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= ta.len()) {
            return Err(invalid(format!("gather index {bad} out of range {}", ta.len())));
        }
        let data = index.iter().map(|&i| ta.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Gather(a, index), ng))
    }

    /// Selects rows `ids` of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, d) = matrix_dims(tt.shape())
            .ok_or_else(|| Error::shape("embedding", tt.shape(), &[ids.len()]))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(invalid(format!("embedding id {bad} out of range {vocab}")));
        }
        let index: Arc<[usize]> = ids.iter().flat_map(|&i| i * d..(i + 1) * d).collect();
        self.gather(table, index, &[ids.len(), d])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = matrix_dims(&shape).ok_or_else(|| Error::shape("slice_rows", &shape, &[]))?;
        if start + len > rows {
            return Err(Error::shape("slice_rows", &shape, &[start + len]));
        }
        let index: Arc<[usize]> = (start * cols..(start + len) * cols).collect();
        self.gather(a, index, &[len, cols])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = matrix_dims(&shape).ok_or_else(|| Error::shape("slice_cols", &shape, &[]))?;
        if start + len > cols {
            return Err(Error::shape("slice_cols", &shape, &[start + len]));
        }
        let index: Arc<[usize]> = (0..rows)
            .flat_map(|r| r * cols + start..r * cols + start + len)
            .collect();
        self.gather(a, index, &[rows, len])
    }

    /// Repeats a `[1, d]` (or `[d]`) row `n` times.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let d = self.value(a).len();
        let index: Arc<[usize]> = (0..n).flat_map(|_| 0..d).collect();
        self.gather(a, index, &[n, d])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        let (_, cols) = matrix_dims(self.shape(*first))
            .ok_or_else(|| Error::shape("concat_rows", self.shape(*first), &[]))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            match matrix_dims(t.shape()) {
                Some((r, c)) if c == cols => rows += r,
                _ => return Err(Error::shape("concat_rows", self.shape(*first), t.shape())),
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(&[rows, cols], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        let (rows, _) = matrix_dims(self.shape(*first))
            .ok_or_else(|| Error::shape("concat_cols", self.shape(*first), &[]))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match matrix_dims(self.shape(p)) {
                Some((r, c)) if r == rows => widths.push(c),
                _ => return Err(Error::shape("concat_cols", self.shape(*first), self.shape(p))),
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(&[rows, total], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let ng = self.needs(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = row_split(ta.shape());
        let data = (0..rows)
            .map(|r| ta.data()[r * cols..(r + 1) * cols].iter().copied().sum::<T>())
            .collect();
        let shape = if ta.shape().len() > 1 {
            ta.shape()[..ta.shape().len() - 1].to_vec()
        } else {
            vec![1]
        };
        let out = Tensor::new(&shape, data)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::SumLast(a), ng))
    }

    /// Column-wise max over the rows of `[n, d]`, shape `[1, d]`. The
    /// gradient goes to the first maximal row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = matrix_dims(ta.shape()).ok_or_else(|| Error::shape("max_rows", ta.shape(), &[]))?;
        if rows == 0 {
            return Err(invalid("max over zero rows"));
        }
        let mut arg = vec![0usize; cols];
        let mut out = ta.data()[..cols].to_vec();
        for r in 1..rows {
            for c in 0..cols {
                let v = ta.data()[r * cols + c];
                if v > out[c] {
                    out[c] = v;
                    arg[c] = r;
                }
            }
        }
        let out = Tensor::new(&[1, cols], out)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::MaxRows(a, arg), ng))
    }

    /// Elementwise binary cross-entropy of `sigmoid(a)` against `target`.
    pub fn bce_with_logits(&mut self, a: Var, target: &[f64]) -> Result<Var> {
        let ta = self.value(a);
        if ta.len() != target.len() {
            return Err(Error::shape("bce_with_logits", ta.shape(), &[target.len()]));
        }
        let target: Vec<T> = target.iter().map(|&t| T::c(t)).collect();
        let data = ta
            .data()
            .iter()
            .zip(&target)
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln())
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::BceLogits(a, target), ng))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.value(out).len() != 1 {
            return Err(Error::shape("backward", self.shape(out), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![T::one()]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s + g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s + g);
                }
                if let Some(s) = self.slot(grads, *row) {
                    let cols = s.len();
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % cols] = s[i % cols] + gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * vb[i];
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s + g * *k);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = matrix_dims(ta.shape()).unwrap();
                let (_, n) = matrix_dims(tb.shape()).unwrap();
                if let Some(s) = self.slot(grads, *a) {
                    mm_nt(g, tb.data(), s, m, n, k);
                }
                if let Some(s) = self.slot(grads, *b) {
                    mm_tn(ta.data(), g, s, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = matrix_dims(ta.shape()).unwrap();
                let (n, _) = matrix_dims(tb.shape()).unwrap();
                if let Some(s) = self.slot(grads, *a) {
                    mm_nn(g, tb.data(), s, m, n, k);
                }
                if let Some(s) = self.slot(grads, *b) {
                    mm_tn(g, ta.data(), s, m, n, k);
                }
            }
            Op::Softmax(a) => {
                let (rows, cols) = row_split(node.value.shape());
                if let Some(s) = self.slot(grads, *a) {
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let dotp: T = y[span.clone()].iter().zip(&g[span.clone()]).map(|(&p, &q)| p * q).sum();
                        for j in span {
                            s[j] = s[j] + y[j] * (g[j] - dotp);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = row_split(node.value.shape());
                if let Some(s) = self.slot(grads, *a) {
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let gsum: T = g[span.clone()].iter().copied().sum();
                        for j in span {
                            s[j] = s[j] + g[j] - y[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * gelu_parts(x[i]).1;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, d) = row_split(node.value.shape());
                let gam = self.value(*gamma).data();
                if let Some(s) = self.slot(grads, *gamma) {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % d] = s[i % d] + gv * xhat[i];
                    }
                }
                if let Some(s) = self.slot(grads, *beta) {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % d] = s[i % d] + gv;
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    let dn = T::c(d as f64);
                    for r in 0..rows {
                        let base = r * d;
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..d {
                            let dh = g[base + j] * gam[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * xhat[base + j];
                        }
                        let k = rstd[r] / dn;
                        for j in 0..d {
                            let dh = g[base + j] * gam[j];
                            s[base + j] = s[base + j] + k * (dn * dh - sum_dh - xhat[base + j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Gather(a, index) => {
                if let Some(s) = self.slot(grads, *a) {
                    for (&src, &gv) in index.iter().zip(g) {
                        s[src] = s[src] + gv;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(s) = self.slot(grads, p) {
                        s.iter_mut().zip(&g[offset..offset + len]).for_each(|(s, &g)| *s = *s + g);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = matrix_dims(node.value.shape()).unwrap();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(s) = self.slot(grads, p) {
                        for r in 0..rows {
                            for j in 0..w {
                                s[r * w + j] = s[r * w + j] + g[r * total + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s + g);
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|s| *s = *s + g[0]);
                }
            }
            Op::SumLast(a) => {
                let (_, cols) = row_split(self.shape(*a));
                if let Some(s) = self.slot(grads, *a) {
                    for (i, s) in s.iter_mut().enumerate() {
                        *s = *s + g[i / cols];
                    }
                }
            }
            Op::MaxRows(a, arg) => {
                let cols = arg.len();
                if let Some(s) = self.slot(grads, *a) {
                    for (c, &r) in arg.iter().enumerate() {
                        s[r * cols + c] = s[r * cols + c] + g[c];
                    }
                }
            }
            Op::BceLogits(a, target) => {
                let x = self.value(*a).data();
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..s.len() {
                        let sig = T::one() / (T::one() + (-x[i]).exp());
                        s[i] = s[i] + g[i] * (sig - target[i]);
                    }
                }
            }
        }
    }

    /// Gradients of every bound parameter, zero-filled where unreached.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let shape = self.shape(v);
                let t = match grads.get(v) {
                    Some(g) => Tensor::new(shape, g.to_vec()).unwrap(),
                    None => Tensor::zeros(shape),
                };
                (name.clone(), t)
            })
            .collect()
    }
}
