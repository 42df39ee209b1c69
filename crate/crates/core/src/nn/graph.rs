//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes that do not depend
//! on a trainable input never receive a gradient, so [`Graph::detach`] cuts a
//! value out of the differentiable path completely.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-item index map used for reshapes, transposes, patch extraction and
/// padding. `out[j] = in[index[j]]`, or zero when `index[j] == GatherMap::ZERO`.
#[derive(Clone, Debug)]
pub struct GatherMap {
    in_len: usize,
    out_shape: Vec<usize>,
    index: Vec<u32>,
}

impl GatherMap {
    pub const ZERO: u32 = u32::MAX;

    pub fn new(in_len: usize, out_shape: Vec<usize>, index: Vec<u32>) -> Self {
        assert_eq!(out_shape.iter().product::<usize>(), index.len());
        assert!(index.iter().all(|&i| i == Self::ZERO || (i as usize) < in_len));
        Self { in_len, out_shape, index }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.index.len()
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    /// Applies the map to every item of a batch laid out contiguously.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.is_empty() || x.len() % self.in_len != 0 {
            return Err(Error::Shape(format!(
                "gather map expects items of {} elements, got tensor {:?}",
                self.in_len,
                x.shape()
            )));
        }
        let batch = x.len() / self.in_len;
        let src = x.data();
        let mut out = Vec::with_capacity(batch * self.index.len());
        for b in 0..batch {
            let item = &src[b * self.in_len..(b + 1) * self.in_len];
            out.extend(self.index.iter().map(|&i| if i == Self::ZERO { 0.0 } else { item[i as usize] }));
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&self.out_shape);
        Tensor::new(shape, out)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MulBias(Var, Var),
    Relu(Var),
    Gelu(Var),
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gather { x: Var, map: Arc<GatherMap> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    SumAll(Var),
    SumLast(Var),
    CrossEntropy { logits: Var, targets: Arc<Vec<usize>>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter, or `None` when no path from the loss reached it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.get(*v))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store: Some(store), nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn without_params() -> Graph<'static> {
        Graph { store: None, nodes: Vec::new(), params: HashMap::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A differentiable leaf (its gradient is reported by `backward`).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Stop-gradient: same value, no path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::config("graph was built without a parameter store"))?;
        let t = store.get(id).clone();
        let v = self.push(t, Op::Leaf, true);
        self.params.insert(id, v);
        Ok(v)
    }

    /// `x[..., k] @ w[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", xs, ws)));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).len() / k;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, false);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(x, w), ng))
    }

    /// Batched `a[B, m, k] @ b[B, k, n]`, or `a @ b^T` for `b[B, n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(Error::Shape(format!("bmm {:?} x {:?}", as_, bs)));
        }
        let (batch, m, k) = (as_[0], as_[1], as_[2]);
        let (bk, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if bk != k {
            return Err(Error::Shape(format!("bmm inner dims {:?} x {:?} (trans_b={trans_b})", as_, bs)));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new([batch, m, n], out)?, Op::BatchMatMul { a, b, trans_b }, ng))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), f)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    fn check_row_vector(&self, x: Var, v: Var) -> Result<usize> {
        let d = self.value(x).last_dim();
        if self.value(v).len() != d {
            return Err(Error::Shape(format!(
                "row vector {:?} does not broadcast over {:?}",
                self.shape(v),
                self.shape(x)
            )));
        }
        Ok(d)
    }

    /// Adds a `[d]` vector to every row of `x[..., d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.check_row_vector(x, bias)?;
        let mut t = self.value(x).clone();
        let bv = self.value(bias).data();
        for row in t.data_mut().chunks_mut(d) {
            for (a, b) in row.iter_mut().zip(bv) {
                *a += b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(t, Op::AddBias(x, bias), ng))
    }

    /// Multiplies every row of `x[..., d]` by a `[d]` vector.
    pub fn mul_bias(&mut self, x: Var, gain: Var) -> Result<Var> {
        let d = self.check_row_vector(x, gain)?;
        let mut t = self.value(x).clone();
        let gv = self.value(gain).data();
        for row in t.data_mut().chunks_mut(d) {
            for (a, g) in row.iter_mut().zip(gv) {
                *a *= g;
            }
        }
        let ng = self.ng(x) || self.ng(gain);
        Ok(self.push(t, Op::MulBias(x, gain), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Tanh-approximated GELU (smooth everywhere, so finite differences apply).
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()), Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x / (1.0 + (-x).exp()), Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let d = self.value(a).last_dim();
        let mut t = self.value(a).clone();
        for row in t.data_mut().chunks_mut(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let ng = self.ng(a);
        self.push(t, Op::Softmax(a), ng)
    }

    /// Normalizes the last dimension to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let d = self.value(x).last_dim();
        let mut t = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(t.len() / d);
        for row in t.data_mut().chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(x);
        self.push(t, Op::LayerNorm { x, inv_std }, ng)
    }

    pub fn gather(&mut self, x: Var, map: &Arc<GatherMap>) -> Result<Var> {
        let t = map.apply(self.value(x))?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Gather { x, map: Arc::clone(map) }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat(&vals, axis)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).narrow(axis, start, len)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Narrow { x, axis, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums the last dimension away.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let data: Vec<f64> = self.value(x).data().chunks(d).map(|r| r.iter().sum()).collect();
        let out_shape = if shape.len() > 1 { shape[..shape.len() - 1].to_vec() } else { vec![1] };
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::SumLast(x), ng))
    }

    /// Mean over rows of the negative log-likelihood of `targets` under
    /// softmax(`logits[..., C]`).
    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<Vec<usize>>) -> Result<Var> {
        let c = self.value(logits).last_dim();
        let rows = self.value(logits).len() / c;
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "cross entropy: {} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Shape(format!("cross entropy target {bad} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &tgt) in probs.chunks_mut(c).zip(targets.iter()) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
            loss -= row[tgt].max(1e-300).ln();
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss / rows as f64),
            Op::CrossEntropy { logits, targets, probs },
            ng,
        ))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dout) = grads[i].take() else { continue };
            self.backprop_node(node, &dout, &mut grads);
            grads[i] = Some(dout);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn backprop_node(&self, node: &Node, dout: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, g: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let with_shape = |v: Var, data: Vec<f64>| {
            Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape")
        };
        let dy = dout.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(x, w) => {
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let m = self.value(*x).len() / k;
                if self.ng(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, dy, false, self.value(*w).data(), true, &mut dx, false);
                    acc(grads, *x, with_shape(*x, dx));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*x).data(), true, dy, false, &mut dw, false);
                    acc(grads, *w, with_shape(*w, dw));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let as_ = self.shape(*a);
                let (batch, m, k) = (as_[0], as_[1], as_[2]);
                let n = dout.shape()[2];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        // da = dy * op(b)^T
                        gemm(
                            m,
                            n,
                            k,
                            &dy[i * m * n..(i + 1) * m * n],
                            false,
                            &bd[i * k * n..(i + 1) * k * n],
                            !*trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    acc(grads, *a, with_shape(*a, da));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let (dyi, ai) = (&dy[i * m * n..(i + 1) * m * n], &ad[i * m * k..(i + 1) * m * k]);
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, dyi, true, ai, false, dbi, false);
                        } else {
                            gemm(k, m, n, ai, true, dyi, false, dbi, false);
                        }
                    }
                    acc(grads, *b, with_shape(*b, db));
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, dout.clone());
                acc(grads, *b, dout.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, dout.clone());
                acc(grads, *b, dout.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, dout.zip_map(self.value(*b), |g, y| g * y).unwrap());
                }
                if self.ng(*b) {
                    acc(grads, *b, dout.zip_map(self.value(*a), |g, x| g * x).unwrap());
                }
            }
            Op::Scale(a, s) => acc(grads, *a, dout.scale(*s)),
            Op::AddBias(x, bias) => {
                acc(grads, *x, dout.clone());
                if self.ng(*bias) {
                    let d = self.value(*bias).len();
                    let mut db = vec![0.0; d];
                    for row in dy.chunks(d) {
                        for (s, g) in db.iter_mut().zip(row) {
                            *s += g;
                        }
                    }
                    acc(grads, *bias, with_shape(*bias, db));
                }
            }
            Op::MulBias(x, gain) => {
                let d = self.value(*gain).len();
                let gv = self.value(*gain).data();
                if self.ng(*x) {
                    let mut dx = dy.to_vec();
                    for row in dx.chunks_mut(d) {
                        for (v, g) in row.iter_mut().zip(gv) {
                            *v *= g;
                        }
                    }
                    acc(grads, *x, with_shape(*x, dx));
                }
                if self.ng(*gain) {
                    let mut dg = vec![0.0; d];
                    for (row, xr) in dy.chunks(d).zip(self.value(*x).data().chunks(d)) {
                        for ((s, g), xv) in dg.iter_mut().zip(row).zip(xr) {
                            *s += g * xv;
                        }
                    }
                    acc(grads, *gain, with_shape(*gain, dg));
                }
            }
            Op::Relu(a) => {
                let g = dout.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }).unwrap();
                acc(grads, *a, g);
            }
            Op::Gelu(a) => {
                let g = dout
                    .zip_map(self.value(*a), |g, x| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
                    })
                    .unwrap();
                acc(grads, *a, g);
            }
            Op::Silu(a) => {
                let g = dout
                    .zip_map(self.value(*a), |g, x| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        g * (s + x * s * (1.0 - s))
                    })
                    .unwrap();
                acc(grads, *a, g);
            }
            Op::Tanh(a) => {
                let g = dout.zip_map(&node.value, |g, y| g * (1.0 - y * y)).unwrap();
                acc(grads, *a, g);
            }
            Op::Exp(a) => {
                let g = dout.zip_map(&node.value, |g, y| g * y).unwrap();
                acc(grads, *a, g);
            }
            Op::Square(a) => {
                let g = dout.zip_map(self.value(*a), |g, x| 2.0 * g * x).unwrap();
                acc(grads, *a, g);
            }
            Op::Softmax(a) => {
                let d = node.value.last_dim();
                let mut dx = vec![0.0; dy.len()];
                for ((dxr, dyr), yr) in dx.chunks_mut(d).zip(dy.chunks(d)).zip(node.value.data().chunks(d)) {
                    let dot: f64 = dyr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in dxr.iter_mut().zip(dyr).zip(yr) {
                        *o = y * (g - dot);
                    }
                }
                acc(grads, *a, with_shape(*a, dx));
            }
            Op::LayerNorm { x, inv_std } => {
                let d = node.value.last_dim();
                let mut dx = vec![0.0; dy.len()];
                for (((dxr, dyr), xh), is) in dx
                    .chunks_mut(d)
                    .zip(dy.chunks(d))
                    .zip(node.value.data().chunks(d))
                    .zip(inv_std)
                {
                    let mean_g = dyr.iter().sum::<f64>() / d as f64;
                    let mean_gx = dyr.iter().zip(xh).map(|(g, h)| g * h).sum::<f64>() / d as f64;
                    for ((o, g), h) in dxr.iter_mut().zip(dyr).zip(xh) {
                        *o = is * (g - mean_g - h * mean_gx);
                    }
                }
                acc(grads, *x, with_shape(*x, dx));
            }
            Op::Gather { x, map } => {
                let in_len = map.in_len();
                let out_len = map.out_len();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (b, gout) in dy.chunks(out_len).enumerate() {
                    let item = &mut dx[b * in_len..(b + 1) * in_len];
                    for (&i, g) in map.index.iter().zip(gout) {
                        if i != GatherMap::ZERO {
                            item[i as usize] += g;
                        }
                    }
                }
                acc(grads, *x, with_shape(*x, dx));
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.ng(p) {
                        acc(grads, p, dout.narrow(*axis, offset, len).unwrap());
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let full = xs[*axis] * inner;
                let len = dout.shape()[*axis];
                let mut dx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let dst = o * full + start * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&dy[src..src + len * inner]);
                }
                acc(grads, *x, with_shape(*x, dx));
            }
            Op::Reshape(x) => acc(grads, *x, with_shape(*x, dy.to_vec())),
            Op::SumAll(x) => acc(grads, *x, Tensor::full(self.shape(*x).to_vec(), dy[0])),
            Op::SumLast(x) => {
                let d = self.value(*x).last_dim();
                let mut dx = Vec::with_capacity(self.value(*x).len());
                for &g in dy {
                    dx.extend(std::iter::repeat_n(g, d));
                }
                acc(grads, *x, with_shape(*x, dx));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).last_dim();
                let scale = dy[0] / targets.len() as f64;
                let mut dx = probs.clone();
                for (row, &t) in dx.chunks_mut(c).zip(targets.iter()) {
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                acc(grads, *logits, with_shape(*logits, dx));
            }
        }
    }
}
