//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Tape`] is scoped to one forward pass: every op appends a node holding
//! its value and the ids of its inputs, and [`Tape::backward`] walks the
//! nodes in reverse, accumulating vector-Jacobian products. Parameter leaves
//! remember their [`ParamId`] so the result maps straight back onto a
//! [`ParamStore`].

use std::sync::atomic::{AtomicU32, Ordering};

use crate::array::{log_softmax_slice, NdArray};
use crate::error::{NumericsError, Result};
use crate::kernels::{self, ConvSpec};
use crate::layer::{LayerHandle, LayerKind, ParamId, ParamStore};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    idx: u32,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, spec: ConvSpec },
    Relu(Var),
    Exp(Var),
    Square(Var),
    Softplus(Var),
    Scale(Var, f32),
    AddScalar(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Mean(Var),
    SpatialMean(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    LogSoftmax(Var),
    Pick(Var, usize),
    Clamp(Var, f32, f32),
    Minimum(Var, Var),
    Detach,
}

#[derive(Debug)]
struct Node {
    value: NdArray,
    op: Op,
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<NdArray>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: (0..store.len()).map(|i| NdArray::zeros(store.get(i).shape())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &NdArray {
        &self.grads[id]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NdArray> {
        self.grads.iter()
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(NumericsError::Invalid("gradient sets differ in length".into()));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.axpy(1.0, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f32) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(NdArray::is_finite)
    }

    /// Sum of a slice of gradient sets, accumulated in order.
    pub fn sum_ordered(parts: &[Gradients]) -> Result<Option<Gradients>> {
        let mut iter = parts.iter();
        let Some(first) = iter.next() else {
            return Ok(None);
        };
        let mut total = first.clone();
        for g in iter {
            total.add_assign(g)?;
        }
        Ok(Some(total))
    }
}

/// One forward computation, recorded for differentiation.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx as usize >= self.nodes.len() {
            return Err(NumericsError::ForeignVar);
        }
        Ok(v.idx as usize)
    }

    fn push(&mut self, value: NdArray, op: Op, what: &'static str) -> Result<Var> {
        value.ensure_finite(what)?;
        self.nodes.push(Node { value, op });
        Ok(Var { tape: self.id, idx: (self.nodes.len() - 1) as u32 })
    }

    /// The recorded value of `v`.
    pub fn value(&self, v: Var) -> Result<&NdArray> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<f32> {
        self.value(v)?
            .item()
            .ok_or_else(|| NumericsError::NonScalarLoss(self.value(v).map(|a| a.shape().to_vec()).unwrap_or_default()))
    }

    /// A constant input; receives no gradient output.
    pub fn input(&mut self, value: NdArray) -> Result<Var> {
        self.push(value, Op::Input, "input")
    }

    /// A parameter leaf, copied from `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if id >= store.len() {
            return Err(NumericsError::Invalid(format!("parameter id {id} out of range")));
        }
        self.push(store.get(id).clone(), Op::Param(id), "param")
    }

    /// Applies a stored layer (no activation) to `x`.
    pub fn layer(&mut self, store: &ParamStore, handle: LayerHandle, x: Var) -> Result<Var> {
        let w = self.param(store, handle.weights)?;
        let b = self.param(store, handle.bias)?;
        match handle.kind {
            LayerKind::Dense => self.dense(x, w, b),
            LayerKind::Conv2d(spec) => self.conv2d(x, w, b, spec),
        }
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x)?, self.value(w)?, self.value(b)?);
        if wv.rank() != 2 || xv.shape() != [wv.shape()[1]] || bv.shape() != [wv.shape()[0]] {
            return Err(NumericsError::ShapeMismatch {
                op: "dense",
                left: wv.shape().to_vec(),
                right: xv.shape().to_vec(),
            });
        }
        let (o, i) = (wv.shape()[0], wv.shape()[1]);
        let out = kernels::dense_forward(wv.data(), bv.data(), xv.data(), o, i);
        self.push(NdArray::from_vec(out), Op::Dense { x, w, b }, "dense")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x)?, self.value(w)?, self.value(b)?);
        let mismatch =
            || NumericsError::ShapeMismatch { op: "conv2d", left: wv.shape().to_vec(), right: xv.shape().to_vec() };
        if xv.rank() != 3 || wv.rank() != 4 || wv.shape()[1] != xv.shape()[0] || bv.shape() != [wv.shape()[0]] {
            return Err(mismatch());
        }
        let (c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let o = wv.shape()[0];
        let oh = spec.out_extent(h).ok_or_else(mismatch)?;
        let ow = spec.out_extent(wd).ok_or_else(mismatch)?;
        let out = kernels::conv2d_forward(xv.data(), c, h, wd, wv.data(), bv.data(), o, spec, oh, ow);
        let value = NdArray::new(vec![o, oh, ow], out)?;
        self.push(value, Op::Conv2d { x, w, b, spec }, "conv2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?.map(|a| a.max(0.0));
        self.push(v, Op::Relu(x), "relu")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?.map(f32::exp);
        self.push(v, Op::Exp(x), "exp")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?.map(|a| a * a);
        self.push(v, Op::Square(x), "square")
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?.map(softplus);
        self.push(v, Op::Softplus(x), "softplus")
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let v = self.value(x)?.map(|a| a * factor);
        self.push(v, Op::Scale(x, factor), "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Result<Var> {
        let v = self.value(x)?.map(|a| a + c);
        self.push(v, Op::AddScalar(x), "add_scalar")
    }

    fn binary(&mut self, a: Var, b: Var, what: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<NdArray> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        if av.shape() != bv.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: what,
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        NdArray::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    /// Elementwise minimum; on ties the gradient goes to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "minimum", f32::min)?;
        self.push(v, Op::Minimum(a, b), "minimum")
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the input lies outside.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        let v = self.value(x)?.map(|a| a.clamp(lo, hi));
        self.push(v, Op::Clamp(x, lo, hi), "clamp")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = NdArray::scalar(self.value(x)?.sum());
        self.push(v, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x)?;
        if xv.is_empty() {
            return Err(NumericsError::Empty { op: "mean" });
        }
        let v = NdArray::scalar(xv.sum() / xv.len() as f32);
        self.push(v, Op::Mean(x), "mean")
    }

    /// `(C, H, W) -> (C,)` mean over spatial positions.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x)?;
        if xv.rank() != 3 || xv.is_empty() {
            return Err(NumericsError::Invalid(format!("spatial_mean expects (C,H,W), got {:?}", xv.shape())));
        }
        let c = xv.shape()[0];
        let n = xv.len() / c;
        let data = xv.data().chunks(n).map(|ch| ch.iter().map(|&a| a as f64).sum::<f64>() as f32 / n as f32).collect();
        self.push(NdArray::from_vec(data), Op::SpatialMean(x), "spatial_mean")
    }

    /// Concatenate along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values = parts.iter().map(|&p| self.value(p)).collect::<Result<Vec<_>>>()?;
        let v = NdArray::concat0(&values)?;
        self.push(v, Op::Concat(parts.to_vec()), "concat")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x)?.clone().reshape(shape)?;
        self.push(v, Op::Reshape(x), "reshape")
    }

    /// Log-softmax over a 1-D node.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x)?;
        if xv.rank() != 1 {
            return Err(NumericsError::Invalid(format!("log_softmax expects 1-D, got {:?}", xv.shape())));
        }
        if xv.is_empty() {
            return Err(NumericsError::Empty { op: "log_softmax" });
        }
        let v = NdArray::from_vec(log_softmax_slice(xv.data()));
        self.push(v, Op::LogSoftmax(x), "log_softmax")
    }

    /// Scalar element `index` of a flattened node.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x)?;
        let v = *xv
            .data()
            .get(index)
            .ok_or_else(|| NumericsError::Invalid(format!("pick index {index} out of range {}", xv.len())))?;
        self.push(NdArray::scalar(v), Op::Pick(x, index), "pick")
    }

    /// Copies `x` into a new leaf that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?.clone();
        self.push(v, Op::Detach, "detach")
    }

    /// Gradients of scalar `loss` with respect to every parameter of `store`
    /// that was read onto this tape. Parameters that did not influence the
    /// loss get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(NumericsError::BackwardBeforeForward);
        }
        let root = self.check(loss)?;
        let lv = &self.nodes[root].value;
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }

        let mut adj: Vec<Option<NdArray>> = vec![None; root + 1];
        adj[root] = Some(NdArray::full(lv.shape(), 1.0));
        let mut out = Gradients::zeros_like(store);

        for i in (0..=root).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Detach => {}
                Op::Param(id) => {
                    let slot = out
                        .grads
                        .get_mut(*id)
                        .ok_or_else(|| NumericsError::Invalid(format!("parameter {id} not in store")))?;
                    slot.axpy(1.0, &g)?;
                }
                Op::Dense { x, w, b } => {
                    let wv = &self.nodes[w.idx as usize].value;
                    let xv = &self.nodes[x.idx as usize].value;
                    let (o, n) = (wv.shape()[0], wv.shape()[1]);
                    let (dx, dw, db) = kernels::dense_backward(wv.data(), xv.data(), g.data(), o, n);
                    accumulate(&mut adj, *x, xv.shape(), dx)?;
                    accumulate(&mut adj, *w, wv.shape(), dw)?;
                    accumulate(&mut adj, *b, &[o], db)?;
                }
                Op::Conv2d { x, w, b, spec } => {
                    let wv = &self.nodes[w.idx as usize].value;
                    let xv = &self.nodes[x.idx as usize].value;
                    let (c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let (o, oh, ow) = (node.value.shape()[0], node.value.shape()[1], node.value.shape()[2]);
                    let (dx, dw, db) =
                        kernels::conv2d_backward(xv.data(), c, h, wd, wv.data(), o, *spec, oh, ow, g.data());
                    accumulate(&mut adj, *x, xv.shape(), dx)?;
                    accumulate(&mut adj, *w, wv.shape(), dw)?;
                    accumulate(&mut adj, *b, &[o], db)?;
                }
                Op::Relu(x) => {
                    let d = zip_map(&g, &node.value, |gi, yi| if yi > 0.0 { gi } else { 0.0 });
                    accumulate(&mut adj, *x, node.value.shape(), d)?;
                }
                Op::Exp(x) => {
                    let d = zip_map(&g, &node.value, |gi, yi| gi * yi);
                    accumulate(&mut adj, *x, node.value.shape(), d)?;
                }
                Op::Square(x) => {
                    let xv = &self.nodes[x.idx as usize].value;
                    let d = zip_map(&g, xv, |gi, xi| 2.0 * gi * xi);
                    accumulate(&mut adj, *x, xv.shape(), d)?;
                }
                Op::Softplus(x) => {
                    let xv = &self.nodes[x.idx as usize].value;
                    let d = zip_map(&g, xv, |gi, xi| gi * sigmoid(xi));
                    accumulate(&mut adj, *x, xv.shape(), d)?;
                }
                Op::Scale(x, f) => {
                    let d = g.data().iter().map(|&gi| gi * f).collect();
                    accumulate(&mut adj, *x, g.shape(), d)?;
                }
                Op::AddScalar(x) | Op::Reshape(x) => {
                    let shape = self.nodes[x.idx as usize].value.shape().to_vec();
                    accumulate(&mut adj, *x, &shape, g.into_data())?;
                }
                Op::Add(a, b) => {
                    let shape = g.shape().to_vec();
                    accumulate(&mut adj, *a, &shape, g.data().to_vec())?;
                    accumulate(&mut adj, *b, &shape, g.into_data())?;
                }
                Op::Sub(a, b) => {
                    let shape = g.shape().to_vec();
                    accumulate(&mut adj, *b, &shape, g.data().iter().map(|v| -v).collect())?;
                    accumulate(&mut adj, *a, &shape, g.into_data())?;
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.idx as usize].value;
                    let bv = &self.nodes[b.idx as usize].value;
                    accumulate(&mut adj, *a, g.shape(), zip_map(&g, bv, |gi, bi| gi * bi))?;
                    accumulate(&mut adj, *b, g.shape(), zip_map(&g, av, |gi, ai| gi * ai))?;
                }
                Op::Minimum(a, b) => {
                    let av = &self.nodes[a.idx as usize].value;
                    let bv = &self.nodes[b.idx as usize].value;
                    let mut da = vec![0.0; g.len()];
                    let mut db = vec![0.0; g.len()];
                    for k in 0..g.len() {
                        if av.data()[k] <= bv.data()[k] {
                            da[k] = g.data()[k];
                        } else {
                            db[k] = g.data()[k];
                        }
                    }
                    accumulate(&mut adj, *a, g.shape(), da)?;
                    accumulate(&mut adj, *b, g.shape(), db)?;
                }
                Op::Clamp(x, lo, hi) => {
                    let xv = &self.nodes[x.idx as usize].value;
                    let d = zip_map(&g, xv, |gi, xi| if xi >= *lo && xi <= *hi { gi } else { 0.0 });
                    accumulate(&mut adj, *x, xv.shape(), d)?;
                }
                Op::Sum(x) => {
                    let shape = self.nodes[x.idx as usize].value.shape().to_vec();
                    let n: usize = shape.iter().product();
                    accumulate(&mut adj, *x, &shape, vec![g.data()[0]; n])?;
                }
                Op::Mean(x) => {
                    let shape = self.nodes[x.idx as usize].value.shape().to_vec();
                    let n: usize = shape.iter().product();
                    accumulate(&mut adj, *x, &shape, vec![g.data()[0] / n as f32; n])?;
                }
                Op::SpatialMean(x) => {
                    let shape = self.nodes[x.idx as usize].value.shape().to_vec();
                    let per = shape[1] * shape[2];
                    let d = g.data().iter().flat_map(|&gc| std::iter::repeat_n(gc / per as f32, per)).collect();
                    accumulate(&mut adj, *x, &shape, d)?;
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let shape = self.nodes[p.idx as usize].value.shape().to_vec();
                        let n: usize = shape.iter().product();
                        accumulate(&mut adj, *p, &shape, g.data()[offset..offset + n].to_vec())?;
                        offset += n;
                    }
                }
                Op::LogSoftmax(x) => {
                    // dx = g - softmax * sum(g)
                    let total: f32 = g.data().iter().sum();
                    let d = zip_map(&g, &node.value, |gi, li| gi - li.exp() * total);
                    accumulate(&mut adj, *x, node.value.shape(), d)?;
                }
                Op::Pick(x, index) => {
                    let shape = self.nodes[x.idx as usize].value.shape().to_vec();
                    let n: usize = shape.iter().product();
                    let mut d = vec![0.0; n];
                    d[*index] = g.data()[0];
                    accumulate(&mut adj, *x, &shape, d)?;
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(adj: &mut [Option<NdArray>], v: Var, shape: &[usize], grad: Vec<f32>) -> Result<()> {
    let slot = &mut adj[v.idx as usize];
    match slot {
        Some(acc) => {
            for (a, g) in acc.data_mut().iter_mut().zip(&grad) {
                *a += g;
            }
        }
        None => *slot = Some(NdArray::new(shape.to_vec(), grad)?),
    }
    Ok(())
}

fn zip_map(a: &NdArray, b: &NdArray, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
