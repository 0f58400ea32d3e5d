//! Reverse-mode tape. Every forward op appends one node holding its output
//! value; `backward` walks the nodes in reverse and applies each op's
//! vector-Jacobian product. A fresh tape is built for every forward pass.

use std::collections::HashSet;

use super::kernels::{self, ConvGeom};
use super::tensor::gemm;
use super::{NumericsError, ParamId, ParamStore, Real, StatUpdate, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    BiasAdd { x: Var, b: Var },
    Add { a: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    MatMul { a: Var, b: Var },
    SpatialMax { x: Var, argmax: Vec<usize> },
    SpatialMean { x: Var },
    CellsToRows { x: Var },
    Reshape { x: Var },
    SoftmaxRows { x: Var },
    WeightedCellSum { a: Var, e: Var },
    Sum { x: Var },
    Bce { h: Var, labels: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`] for grad-requiring leaves and
/// for any node marked with [`Tape::retain_grad`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Clamp applied to probabilities before taking logs in the BCE loss.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    retained: HashSet<usize>,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), retained: HashSet::new(), stat_updates: Vec::new() }
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

    /// Keep this node's gradient available after `backward`.
    pub fn retain_grad(&mut self, v: Var) {
        self.retained.insert(v.0);
    }

    pub fn push_stat_update(&mut self, update: StatUpdate<T>) {
        self.stat_updates.push(update);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let value = value.with_requires_grad(false);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input. Its `requires_grad` flag decides whether a
    /// gradient is reported for it.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var, NumericsError> {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg, "leaf")
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var, NumericsError> {
        let p = store.get(id);
        self.push(p.tensor.clone(), Op::Param(id), p.trainable, "param")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var, NumericsError> {
        let geom = kernels::conv2d_geom(self.value(x), self.value(w), stride, padding)?;
        let out = kernels::conv2d_forward(self.value(x), self.value(w), &geom);
        let rg = self.rg(x) || self.rg(w);
        self.push(out, Op::Conv2d { x, w, geom }, rg, "conv2d")
    }

    /// Adds a per-channel bias `[C]` to `[N,C,...]`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let (xs, bs) = (self.value(x).shape(), self.value(b).shape());
        if xs.len() < 2 || bs != [xs[1]] {
            return Err(NumericsError::Dimension(format!("bias_add: input {xs:?} with bias {bs:?}")));
        }
        let c = xs[1];
        let inner: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bias[(i / inner) % c];
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::BiasAdd { x, b }, rg, "bias_add")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericsError::Dimension(format!("add: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        out.data_mut().iter_mut().zip(tb.data()).for_each(|(o, &v)| *o += v);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add { a, b }, rg, "add")
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        out
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.map(x, |v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.map(x, sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid { x }, rg, "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.map(x, |v| v.tanh());
        let rg = self.rg(x);
        self.push(out, Op::Tanh { x }, rg, "tanh")
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var, NumericsError> {
        let (out, argmax) = kernels::max_pool_forward(self.value(x), k, stride, padding)?;
        let rg = self.rg(x);
        self.push(out, Op::MaxPool2d { x, argmax }, rg, "max_pool2d")
    }

    /// Normalization with the statistics of the current batch. Returns the
    /// output together with the batch mean and unbiased variance so the
    /// caller can refresh running averages.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>), NumericsError> {
        let (mean, var) = kernels::channel_stats(self.value(x))?;
        let [n, _, h, w] = self.value(x).dims4()?;
        let m = n * h * w;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        let out = self.normalize(x, gamma, beta, &mean, &inv_std, eps, true)?;
        let unbiased = if m > 1 {
            let r = T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap();
            var.iter().map(|&v| v * r).collect()
        } else {
            var
        };
        Ok((out, mean, unbiased))
    }

    /// Normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        self.normalize(x, gamma, beta, mean, &inv_std, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var, NumericsError> {
        if eps <= 0.0 {
            return Err(NumericsError::Contract("batch_norm: eps must be positive".into()));
        }
        let [_, c, h, w] = self.value(x).dims4()?;
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(NumericsError::Dimension(format!(
                    "batch_norm: {what} {:?} for input {:?}",
                    self.value(v).shape(),
                    self.value(x).shape()
                )));
            }
        }
        if mean.len() != c || inv_std.len() != c {
            return Err(NumericsError::Dimension(format!("batch_norm: statistics for {} channels, input has {c}", mean.len())));
        }
        let hw = h * w;
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let xs = self.value(x).data();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for (i, &v) in xs.iter().enumerate() {
            let ch = (i / hw) % c;
            let xh = (v - mean[ch]) * inv_std[ch];
            xhat.push(xh);
            out.push(g[ch] * xh + b[ch]);
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std: inv_std.to_vec(), batch_stats };
        self.push(out, op, rg, "batch_norm")
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let [m, k] = self.value(a).dims2()?;
        let [k2, n] = self.value(b).dims2()?;
        if k != k2 {
            return Err(NumericsError::Dimension(format!(
                "matmul: {:?} · {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg, "matmul")
    }

    /// `[N,C,H,W] → [N,C]`, maximum over cells. Ties resolve to the first
    /// cell in row-major order; only that cell receives gradient.
    pub fn spatial_max(&mut self, x: Var) -> Result<Var, NumericsError> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        if hw == 0 {
            return Err(NumericsError::Dimension("spatial_max over an empty grid".into()));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for plane in xs.chunks(hw) {
            let (bi, bv) = first_argmax(plane);
            out.push(bv);
            argmax.push(bi);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, c], out)?, Op::SpatialMax { x, argmax }, rg, "spatial_max")
    }

    /// `[N,C,H,W] → [N,C]`, mean over cells.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        if hw == 0 {
            return Err(NumericsError::Dimension("spatial_mean over an empty grid".into()));
        }
        let denom = T::from_usize(hw).unwrap();
        let out: Vec<T> = self.value(x).data().chunks(hw).map(|p| p.iter().copied().sum::<T>() / denom).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, c], out)?, Op::SpatialMean { x }, rg, "spatial_mean")
    }

    /// `[N,C,H,W] → [N·H·W, C]`: one row per cell embedding.
    pub fn cells_to_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        for i in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(i * hw + p) * c + ch] = xs[(i * c + ch) * hw + p];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n * hw, c], out)?, Op::CellsToRows { x }, rg, "cells_to_rows")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        self.push(out, Op::Reshape { x }, rg, "reshape")
    }

    /// Row-wise softmax of a 2-d tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let [_, k] = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(k) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows { x }, rg, "softmax_rows")
    }

    /// `out[n,c] = Σ_p weights[n,p] · cells[n,c,p]` with weights `[N,H·W]`.
    pub fn weighted_cell_sum(&mut self, weights: Var, cells: Var) -> Result<Var, NumericsError> {
        let [n, c, h, w] = self.value(cells).dims4()?;
        let hw = h * w;
        if self.value(weights).shape() != [n, hw] {
            return Err(NumericsError::Dimension(format!(
                "weighted_cell_sum: weights {:?} for cells {:?}",
                self.value(weights).shape(),
                self.value(cells).shape()
            )));
        }
        let (a, e) = (self.value(weights).data(), self.value(cells).data());
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            for ch in 0..c {
                let plane = &e[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                out[i * c + ch] = plane.iter().zip(&a[i * hw..(i + 1) * hw]).map(|(&ev, &av)| ev * av).sum();
            }
        }
        let rg = self.rg(weights) || self.rg(cells);
        self.push(Tensor::new(vec![n, c], out)?, Op::WeightedCellSum { a: weights, e: cells }, rg, "weighted_cell_sum")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg, "sum")
    }

    /// Mean binary cross-entropy `−[y·ln h + (1−y)·ln(1−h)]` over a batch of
    /// probabilities `h` (any shape with one value per label). `h` is
    /// clamped to `[ε, 1−ε]` inside the logs.
    pub fn bce_mean(&mut self, h: Var, labels: &[T]) -> Result<Var, NumericsError> {
        let hv = self.value(h);
        if hv.numel() != labels.len() || labels.is_empty() {
            return Err(NumericsError::Dimension(format!(
                "bce: {} probabilities for {} labels",
                hv.numel(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != T::zero() && y != T::one()) {
            return Err(NumericsError::Contract(format!("bce: label {bad} is not 0 or 1")));
        }
        let eps = T::lit(BCE_EPS);
        let mut total = T::zero();
        for (&p, &y) in hv.data().iter().zip(labels) {
            let pc = p.max(eps).min(T::one() - eps);
            total -= y * pc.ln() + (T::one() - y) * (T::one() - pc).ln();
        }
        let loss = total / T::from_usize(labels.len()).unwrap();
        let rg = self.rg(h);
        self.push(Tensor::scalar(loss), Op::Bce { h, labels: labels.to_vec() }, rg, "bce")
    }

    /// Replays the tape in reverse from the scalar `loss`. Parameter
    /// gradients are accumulated into `store`; the tape is consumed.
    pub fn backward(self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>, NumericsError> {
        if self.nodes.is_empty() {
            return Err(NumericsError::Contract("backward on an empty tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n_nodes).map(|_| None).collect();
        let mut kept: Vec<Option<Vec<T>>> = (0..n_nodes).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                if let Op::Param(id) = node.op {
                    if store.get(id).trainable {
                        store.get_mut(id).tensor.accumulate_grad(&vec![T::zero(); node.value.numel()])?;
                    }
                }
                continue;
            };
            if dy.iter().any(|v| !v.is_finite()) {
                return Err(NumericsError::NonFinite { op: "backward" });
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => store.get_mut(*id).tensor.accumulate_grad(&dy)?,
                op => self.propagate(op, &node.value, &dy, &mut grads),
            }
            if self.retained.contains(&idx) || matches!(node.op, Op::Leaf | Op::Param(_)) {
                kept[idx] = Some(dy);
            }
        }
        Ok(Gradients { grads: kept })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<T>, y: &Tensor<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(self.value(*x), self.value(*w), geom, dy, self.rg(*x), self.rg(*w));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::BiasAdd { x, b } => {
                let xs = self.value(*x).shape();
                let c = xs[1];
                let inner: usize = xs[2..].iter().product();
                if self.rg(*b) {
                    let mut db = vec![T::zero(); c];
                    for (i, &g) in dy.iter().enumerate() {
                        db[(i / inner) % c] += g;
                    }
                    self.accumulate(grads, *b, db);
                }
                self.accumulate(grads, *x, dy.to_vec());
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, dy.to_vec());
                self.accumulate(grads, *b, dy.to_vec());
            }
            Op::Relu { x } => {
                let g = dy.iter().zip(y.data()).map(|(&g, &o)| if o > T::zero() { g } else { T::zero() }).collect();
                self.accumulate(grads, *x, g);
            }
            Op::Sigmoid { x } => {
                let g = dy.iter().zip(y.data()).map(|(&g, &o)| g * o * (T::one() - o)).collect();
                self.accumulate(grads, *x, g);
            }
            Op::Tanh { x } => {
                let g = dy.iter().zip(y.data()).map(|(&g, &o)| g * (T::one() - o * o)).collect();
                self.accumulate(grads, *x, g);
            }
            Op::MaxPool2d { x, argmax } | Op::SpatialMax { x, argmax } => {
                let in_len = self.value(*x).numel();
                let mut g = vec![T::zero(); in_len];
                match op {
                    Op::MaxPool2d { .. } => {
                        for (&gi, &src) in dy.iter().zip(argmax) {
                            g[src] += gi;
                        }
                    }
                    _ => {
                        let hw = in_len / dy.len();
                        for (plane, (&gi, &cell)) in dy.iter().zip(argmax).enumerate() {
                            g[plane * hw + cell] += gi;
                        }
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let [n, c, h, w] = self.value(*x).dims4().expect("checked in forward");
                let hw = h * w;
                let gam = self.value(*gamma).data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for (i, (&g, &xh)) in dy.iter().zip(xhat).enumerate() {
                    let ch = (i / hw) % c;
                    sum_dy[ch] += g;
                    sum_dy_xhat[ch] += g * xh;
                }
                if self.rg(*x) {
                    let m = T::from_usize(n * hw).unwrap();
                    let dx = dy
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(i, (&g, &xh))| {
                            let ch = (i / hw) % c;
                            let k = gam[ch] * inv_std[ch];
                            if *batch_stats {
                                k * (g - sum_dy[ch] / m - xh * sum_dy_xhat[ch] / m)
                            } else {
                                k * g
                            }
                        })
                        .collect();
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, sum_dy_xhat);
                self.accumulate(grads, *beta, sum_dy);
            }
            Op::MatMul { a, b } => {
                let [m, k] = self.value(*a).dims2().expect("checked");
                let [_, n] = self.value(*b).dims2().expect("checked");
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, dy, false, self.value(*b).data(), true, &mut da, false);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, self.value(*a).data(), true, dy, false, &mut db, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::SpatialMean { x } => {
                let in_len = self.value(*x).numel();
                let hw = in_len / dy.len();
                let denom = T::from_usize(hw).unwrap();
                let g = (0..in_len).map(|i| dy[i / hw] / denom).collect();
                self.accumulate(grads, *x, g);
            }
            Op::CellsToRows { x } => {
                let [n, c, h, w] = self.value(*x).dims4().expect("checked");
                let hw = h * w;
                let mut g = vec![T::zero(); dy.len()];
                for i in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            g[(i * c + ch) * hw + p] = dy[(i * hw + p) * c + ch];
                        }
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Reshape { x } => self.accumulate(grads, *x, dy.to_vec()),
            Op::SoftmaxRows { x } => {
                let k = y.shape()[1];
                let mut g = Vec::with_capacity(dy.len());
                for (drow, yrow) in dy.chunks(k).zip(y.data().chunks(k)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&d, &s)| d * s).sum();
                    g.extend(drow.iter().zip(yrow).map(|(&d, &s)| s * (d - dot)));
                }
                self.accumulate(grads, *x, g);
            }
            Op::WeightedCellSum { a, e } => {
                let [n, c, h, w] = self.value(*e).dims4().expect("checked");
                let hw = h * w;
                let (av, ev) = (self.value(*a).data(), self.value(*e).data());
                if self.rg(*a) {
                    let mut da = vec![T::zero(); n * hw];
                    for i in 0..n {
                        for ch in 0..c {
                            let g = dy[i * c + ch];
                            let plane = &ev[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                            for (d, &v) in da[i * hw..(i + 1) * hw].iter_mut().zip(plane) {
                                *d += g * v;
                            }
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*e) {
                    let mut de = vec![T::zero(); ev.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let g = dy[i * c + ch];
                            for p in 0..hw {
                                de[(i * c + ch) * hw + p] = g * av[i * hw + p];
                            }
                        }
                    }
                    self.accumulate(grads, *e, de);
                }
            }
            Op::Sum { x } => {
                let g = vec![dy[0]; self.value(*x).numel()];
                self.accumulate(grads, *x, g);
            }
            Op::Bce { h, labels } => {
                let eps = T::lit(BCE_EPS);
                let scale = dy[0] / T::from_usize(labels.len()).unwrap();
                // Derivative taken at the clamped value so saturated
                // predictions still receive a finite, signed gradient.
                let g = self
                    .value(*h)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&p, &yv)| {
                        let pc = p.max(eps).min(T::one() - eps);
                        scale * (-(yv / pc) + (T::one() - yv) / (T::one() - pc))
                    })
                    .collect();
                self.accumulate(grads, *h, g);
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Index and value of the maximum; first index wins ties.
pub fn first_argmax<T: Real>(values: &[T]) -> (usize, T) {
    let mut bi = 0;
    let mut bv = values[0];
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > bv {
            bi = i;
            bv = v;
        }
    }
    (bi, bv)
}
