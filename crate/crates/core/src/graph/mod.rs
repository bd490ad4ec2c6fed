//! Recorded computation graph with reverse-mode differentiation.
//!
//! Every operation appends one node holding its value and enough saved state
//! to replay its adjoint. Nodes are only ever appended, so node order is a
//! topological order; [`Graph::backward`] walks it in reverse and visits each
//! node at most once. A graph belongs to one thread of execution.

mod conv;

use std::collections::HashMap;
use std::sync::Arc;

use conv::ConvGeometry;
pub use conv::{Conv2dSpec, Padding2d};

use crate::error::{Error, Result};
use crate::tensor::{broadcast_index, broadcast_shape, permute_index, Element, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named model tensor. Non-trainable entries (batch-norm running
/// statistics) are carried alongside parameters but never receive gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

impl<T: Element> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
            trainable: false,
        }
    }
}

/// Batch statistics produced by a train-mode batch norm, to be folded into the
/// owning layer's running statistics.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub name: String,
    pub mean: Vec<T>,
    /// Unbiased (n - 1) variance.
    pub var: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    Train,
    Eval { mean: &'a [T], var: &'a [T] },
}

enum Op<T> {
    Leaf,
    Reshape(Var),
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Softmax(Var),
    Gelu(Var),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geo: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    MeanPoolHw(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    track_params: bool,
    validate: bool,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar w.r.t. every leaf that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<String, Var>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&v| self.get(v))
    }
}

fn check_same_len(a: usize, b: usize, what: &str) {
    debug_assert_eq!(a, b, "{what}: gradient length mismatch");
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            track_params: true,
            validate: false,
            stat_updates: Vec::new(),
        }
    }

    /// Graph whose parameters are constants; nothing needs a gradient unless
    /// an input asks for one.
    pub fn inference() -> Self {
        Graph {
            track_params: false,
            ..Self::new()
        }
    }

    /// Fail any operation whose result contains NaN or infinity.
    pub fn with_validation(mut self, on: bool) -> Self {
        self.validate = on;
        self
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.validate && !matches!(op, Op::Leaf) && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "input")
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.input(value, false)
    }

    /// Bind a named model tensor. Binding the same name twice returns the
    /// first node, so shared weights accumulate one gradient.
    pub fn param(&mut self, p: &Param<T>) -> Result<Var> {
        if let Some(&v) = self.params.get(&p.name) {
            return Ok(v);
        }
        let v = self.push(p.value.clone(), Op::Leaf, self.track_params && p.trainable, "param")?;
        self.params.insert(p.name.clone(), v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn record_stat_update(&mut self, update: StatUpdate<T>) {
        self.stat_updates.push(update);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Reshape(x), rg, "reshape")
    }

    /// `out.data[i] = x.data[index[i]]`, shaped as `shape`. Every data
    /// movement (permutes, window partitions, spatial shuffles) goes through this.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).gather(&index, shape.to_vec())?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Gather { x, index }, rg, "gather")
    }

    pub fn permute(&mut self, x: Var, axis_order: &[usize]) -> Result<Var> {
        let (index, shape) = permute_index(self.shape(x), axis_order)?;
        self.gather(x, index.into(), &shape)
    }

    pub fn reshape_permute(&mut self, x: Var, new_shape: &[usize], axis_order: &[usize]) -> Result<Var> {
        let r = self.reshape(x, new_shape)?;
        self.permute(r, axis_order)
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(&sa, &sb)?;
        let (da, db) = (self.data(a), self.data(b));
        let f = |x: T, y: T| if mul { x * y } else { x + y };
        let data: Vec<T> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(&shape, &sa);
            let ib = broadcast_index(&shape, &sb);
            ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a, b]);
        if mul {
            self.push(value, Op::Mul { a, b }, rg, "mul")
        } else {
            self.push(value, Op::Add { a, b }, rg, "add")
        }
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, false)
    }

    /// Elementwise product with trailing-axis broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, true)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, factor }, rg, "scale")
    }

    /// Matrix product over the last two axes. Both operands may carry one
    /// leading batch axis; a 2-D right operand is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mm = MatmulDims::new(&sa, &sb)?;
        let mut out = vec![T::zero(); mm.batch * mm.m * mm.n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..mm.batch {
            T::gemm(
                mm.m,
                mm.k,
                mm.n,
                T::one(),
                &da[i * mm.m * mm.k..][..mm.m * mm.k],
                (mm.k, 1),
                &db[mm.b_offset(i)..][..mm.k * mm.n],
                (mm.n, 1),
                T::zero(),
                &mut out[i * mm.m * mm.n..][..mm.m * mm.n],
                (mm.n, 1),
            );
        }
        let value = Tensor::new(mm.out_shape(&sa), out)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul { a, b }, rg, "matmul")
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if self.validate && !t.is_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let cols = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg, "softmax")
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let half = T::of(0.5);
        let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        let value = self.value(x).map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()));
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg, "gelu")
    }

    /// 2-D convolution of a `(batch, c_in, h, w)` map with a
    /// `(c_out, c_in / groups, kh, kw)` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(w), spec)?;
        if let Some(b) = bias {
            if self.shape(b) != [geo.c_out] {
                return Err(Error::InvalidShape(format!(
                    "conv2d bias must have shape [{}], got {:?}",
                    geo.c_out,
                    self.shape(b)
                )));
            }
        }
        let out = conv::forward(&geo, self.data(x), self.data(w), bias.map(|b| self.data(b)));
        let value = Tensor::new(geo.out_shape(), out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        let rg = self.rg(&parents);
        self.push(value, Op::Conv2d { x, w, bias, geo }, rg, "conv2d")
    }

    /// Per-channel batch normalization of a `(batch, c, h, w)` map.
    /// In train mode the batch mean and unbiased variance are returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let shape = self.shape(x).to_vec();
        let &[batch, channels, h, w] = shape.as_slice() else {
            return Err(Error::InvalidShape(format!(
                "batch norm expects (batch, c, h, w), got {shape:?}"
            )));
        };
        for p in [gamma, beta] {
            if self.shape(p) != [channels] {
                return Err(Error::InvalidShape(format!(
                    "batch norm affine parameter must have shape [{channels}], got {:?}",
                    self.shape(p)
                )));
            }
        }
        let plane = h * w;
        let count = batch * plane;
        let xd = self.data(x);
        let (mean, var_biased, stats) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(Error::DegenerateBatch(count));
                }
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                let n = T::of(count as f64);
                for c in 0..channels {
                    let mut s = T::zero();
                    for b in 0..batch {
                        s += xd[(b * channels + c) * plane..][..plane].iter().copied().sum::<T>();
                    }
                    mean[c] = s / n;
                    let mut ss = T::zero();
                    for b in 0..batch {
                        for &v in &xd[(b * channels + c) * plane..][..plane] {
                            ss += (v - mean[c]) * (v - mean[c]);
                        }
                    }
                    var[c] = ss / n;
                }
                let unbiased = var.iter().map(|&v| v * n / (n - T::one())).collect();
                (mean.clone(), var, Some((mean, unbiased)))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::InvalidShape(format!(
                        "running statistics must have {channels} entries"
                    )));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut normalized = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for (i, chunk) in xd.chunks(plane).enumerate() {
            let c = i % channels;
            for (j, &v) in chunk.iter().enumerate() {
                let xhat = (v - mean[c]) * inv_std[c];
                normalized[i * plane + j] = xhat;
                out[i * plane + j] = g[c] * xhat + bt[c];
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let train = matches!(mode, BnMode::Train);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                train,
            },
            rg,
            "batch_norm",
        )?;
        Ok((v, stats))
    }

    /// Average over the spatial axes: `(batch, c, h, w) -> (batch, c)`.
    pub fn mean_pool_hw(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let &[batch, channels, h, w] = shape.as_slice() else {
            return Err(Error::InvalidShape(format!(
                "mean pool expects (batch, c, h, w), got {shape:?}"
            )));
        };
        let n = T::of((h * w) as f64);
        let out = self
            .data(x)
            .chunks(h * w)
            .map(|c| c.iter().copied().sum::<T>() / n)
            .collect();
        let value = Tensor::new([batch, channels], out)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::MeanPoolHw(x), rg, "mean_pool_hw")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg, "sum")
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let &[batch, classes] = shape.as_slice() else {
            return Err(Error::InvalidShape(format!(
                "cross entropy expects (batch, classes) logits, got {shape:?}"
            )));
        };
        if labels.len() != batch {
            return Err(Error::InvalidShape(format!(
                "{} labels for a batch of {batch}",
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidConfig(format!("label {l} outside {classes} classes")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = T::zero();
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            softmax_in_place(row);
            let p = row[label];
            let floor = T::min_positive_value();
            loss -= if p < floor { floor } else { p }.ln();
        }
        let value = Tensor::scalar(loss / T::of(batch as f64));
        let rg = self.rg(&[logits]);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
            "cross_entropy",
        )
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::InvalidCall(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients {
            grads: leaf_grads,
            params: self.params.clone(),
        })
    }

    /// Zero-initialised gradient slot of `v`, or `None` if `v` needs no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}
            Op::Reshape(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    check_same_len(s.len(), g.len(), "reshape");
                    s.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Gather { x, index } => {
                if let Some(s) = self.slot(grads, *x) {
                    for (&i, &gi) in index.iter().zip(g) {
                        s[i] += gi;
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    let shape = self.shape(v).to_vec();
                    if let Some(s) = self.slot(grads, v) {
                        if shape == out.shape() {
                            s.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                        } else {
                            for (&i, &gi) in broadcast_index(out.shape(), &shape).iter().zip(g) {
                                s[i] += gi;
                            }
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let shape = self.shape(v).to_vec();
                    let oshape = self.shape(other).to_vec();
                    let od = self.data(other);
                    let iv = broadcast_index(out.shape(), &shape);
                    let io = broadcast_index(out.shape(), &oshape);
                    if let Some(s) = self.slot(grads, v) {
                        for k in 0..g.len() {
                            s[iv[k]] += g[k] * od[io[k]];
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *factor);
                }
            }
            Op::MatMul { a, b } => {
                let mm = MatmulDims::new(self.shape(*a), self.shape(*b)).expect("validated in forward");
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(s) = self.slot(grads, *a) {
                    // dA = dC B^T
                    for i in 0..mm.batch {
                        T::gemm(
                            mm.m,
                            mm.n,
                            mm.k,
                            T::one(),
                            &g[i * mm.m * mm.n..][..mm.m * mm.n],
                            (mm.n, 1),
                            &bd[mm.b_offset(i)..][..mm.k * mm.n],
                            (1, mm.n),
                            T::one(),
                            &mut s[i * mm.m * mm.k..][..mm.m * mm.k],
                            (mm.k, 1),
                        );
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    // dB = A^T dC
                    for i in 0..mm.batch {
                        let off = mm.b_offset(i);
                        T::gemm(
                            mm.k,
                            mm.m,
                            mm.n,
                            T::one(),
                            &ad[i * mm.m * mm.k..][..mm.m * mm.k],
                            (1, mm.k),
                            &g[i * mm.m * mm.n..][..mm.m * mm.n],
                            (mm.n, 1),
                            T::one(),
                            &mut s[off..][..mm.k * mm.n],
                            (mm.n, 1),
                        );
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    let cols = *out.shape().last().unwrap_or(&1);
                    for ((y, gy), sx) in out.data().chunks(cols).zip(g.chunks(cols)).zip(s.chunks_mut(cols)) {
                        let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            sx[j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                if let Some(s) = self.slot(grads, *x) {
                    let half = T::of(0.5);
                    let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt_2pi = T::of(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
                    for k in 0..g.len() {
                        let v = xd[k];
                        let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                        s[k] += g[k] * (cdf + v * pdf);
                    }
                }
            }
            Op::Conv2d { x, w, bias, geo } => {
                let need = (
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                    bias.is_some_and(|b| self.requires_grad(b)),
                );
                let cg = conv::backward(geo, self.data(*x), self.data(*w), g, need);
                for (v, d) in [(Some(*x), cg.dx), (Some(*w), cg.dw), (*bias, cg.db)] {
                    if let (Some(v), Some(d)) = (v, d) {
                        if let Some(s) = self.slot(grads, v) {
                            s.iter_mut().zip(&d).for_each(|(a, &b)| *a += b);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                train,
            } => {
                let shape = self.shape(*x);
                let (batch, channels) = (shape[0], shape[1]);
                let plane = shape[2] * shape[3];
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                for (i, (gc, nc)) in g.chunks(plane).zip(normalized.chunks(plane)).enumerate() {
                    let c = i % channels;
                    for (&gv, &nv) in gc.iter().zip(nc) {
                        dgamma[c] += gv * nv;
                        dbeta[c] += gv;
                    }
                }
                let gam = self.data(*gamma).to_vec();
                if let Some(s) = self.slot(grads, *x) {
                    let n = T::of((batch * plane) as f64);
                    for (i, ((gc, nc), sc)) in g
                        .chunks(plane)
                        .zip(normalized.chunks(plane))
                        .zip(s.chunks_mut(plane))
                        .enumerate()
                    {
                        let c = i % channels;
                        let k = gam[c] * inv_std[c];
                        for j in 0..plane {
                            if *train {
                                sc[j] += k * (gc[j] - dbeta[c] / n - nc[j] * dgamma[c] / n);
                            } else {
                                sc[j] += k * gc[j];
                            }
                        }
                    }
                }
                for (v, d) in [(*gamma, dgamma), (*beta, dbeta)] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(&d).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::MeanPoolHw(x) => {
                let shape = self.shape(*x);
                let plane = shape[2] * shape[3];
                let n = T::of(plane as f64);
                if let Some(s) = self.slot(grads, *x) {
                    for (chunk, &gv) in s.chunks_mut(plane).zip(g) {
                        chunk.iter_mut().for_each(|v| *v += gv / n);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::CrossEntropy { logits, probs, labels } => {
                if let Some(s) = self.slot(grads, *logits) {
                    let classes = probs.len() / labels.len();
                    let scale = g[0] / T::of(labels.len() as f64);
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { T::one() } else { T::zero() };
                            s[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
}

impl MatmulDims {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let err = || Error::InvalidShape(format!("cannot multiply {sa:?} by {sb:?}"));
        let (batch, m, k) = match *sa {
            [m, k] => (1, m, k),
            [b, m, k] => (b, m, k),
            _ => return Err(err()),
        };
        let (b_batched, k2, n) = match *sb {
            [k2, n] => (false, k2, n),
            [bb, k2, n] if sa.len() == 3 && bb == batch => (true, k2, n),
            _ => return Err(err()),
        };
        if k != k2 {
            return Err(err());
        }
        Ok(MatmulDims {
            batch,
            m,
            k,
            n,
            b_batched,
        })
    }

    fn b_offset(&self, i: usize) -> usize {
        if self.b_batched {
            i * self.k * self.n
        } else {
            0
        }
    }

    fn out_shape(&self, sa: &[usize]) -> Vec<usize> {
        if sa.len() == 3 {
            vec![self.batch, self.m, self.n]
        } else {
            vec![self.m, self.n]
        }
    }
}

#[cfg(test)]
mod tests;
