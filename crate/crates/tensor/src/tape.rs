//! Reverse-mode tape.
//!
//! A [`Tape`] records every differentiable operation of one forward pass.
//! [`Tape::backward`] walks the records in reverse and returns the
//! accumulated gradients. One training step owns one tape; the tape is
//! dropped after the optimizer update.

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::Arc;

use crate::conv::{conv3d, conv3d_backward, Conv3dSpec};
use crate::element::{el, Element};
use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{inverse_perm, layer_norm_forward, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-position rotation coefficients for [`Tape::rotate_pairs`].
///
/// `cos` and `sin` are `[rows, pairs]`; row `r` rotates the `r`-th vector
/// along the second-to-last axis of the input.
#[derive(Debug, Clone)]
pub struct PairRotation<E> {
    pub rows: usize,
    pub pairs: usize,
    pub cos: Vec<E>,
    pub sin: Vec<E>,
}

impl<E: Element> PairRotation<E> {
    pub fn apply(&self, x: &[E], out: &mut [E], inverse: bool) {
        let width = self.pairs * 2;
        for (i, (src, dst)) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)).enumerate() {
            let r = i % self.rows;
            let cs = &self.cos[r * self.pairs..(r + 1) * self.pairs];
            let sn = &self.sin[r * self.pairs..(r + 1) * self.pairs];
            for p in 0..self.pairs {
                let (a, b) = (src[2 * p], src[2 * p + 1]);
                let (c, s) = (cs[p], if inverse { -sn[p] } else { sn[p] });
                dst[2 * p] = a * c - b * s;
                dst[2 * p + 1] = a * s + b * c;
            }
        }
    }
}

enum Op<E> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    AddBias(Var, Var),
    Modulate { x: Var, scale: Var, shift: Var },
    Linear(Var, Var),
    Bmm { a: Var, b: Var, trans_a: bool, trans_b: bool },
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<E> },
    Gelu(Var),
    Silu(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    Rotate { x: Var, rot: Arc<PairRotation<E>> },
    Conv3d { x: Var, w: Var, b: Option<Var>, spec: Conv3dSpec },
    MeanLast(Var),
    Upsample { x: Var, factor: usize },
    Gather { table: Var, ids: Vec<usize> },
    Mse(Var, Var),
    MeanAll(Var),
}

struct Node<'p, E: Element> {
    value: Cow<'p, Tensor<E>>,
    op: Op<E>,
    needs_grad: bool,
}

pub struct Tape<'p, E: Element> {
    nodes: Vec<Node<'p, E>>,
    params: Option<&'p ParamStore<E>>,
    bound: HashMap<ParamId, Var>,
}

impl<E: Element> Default for Tape<'_, E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
    bound: HashMap<ParamId, Var>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<E>> {
        self.bound.get(&id).and_then(|&v| self.get(v))
    }

    /// Gradients for every parameter in store order; unused parameters get `None`.
    pub fn into_param_grads(mut self, n_params: usize) -> Vec<Option<Tensor<E>>> {
        let bound = std::mem::take(&mut self.bound);
        (0..n_params)
            .map(|i| bound.get(&ParamId(i)).and_then(|&v| self.grads[v.0].take()))
            .collect()
    }
}

impl<'p, E: Element> Tape<'p, E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: None, bound: HashMap::new() }
    }

    pub fn with_params(params: &'p ParamStore<E>) -> Self {
        Self { nodes: Vec::new(), params: Some(params), bound: HashMap::new() }
    }

    pub fn params(&self) -> Option<&'p ParamStore<E>> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.push_raw(Cow::Owned(t), Op::Leaf, false)
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        self.push_raw(Cow::Owned(t), Op::Leaf, true)
    }

    /// Binds a parameter of the attached store, once per tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let store = self.params.expect("tape has no parameter store attached");
        let trainable = store.param(id).trainable;
        let v = self.push_raw(Cow::Borrowed(store.get(id)), Op::Leaf, trainable);
        self.bound.insert(id, v);
        v
    }

    fn push_raw(&mut self, value: Cow<'p, Tensor<E>>, op: Op<E>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<E>, op: Op<E>, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(Cow::Owned(value), op, needs_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        self.push("add", y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        self.push("sub", y, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        self.push("mul", y, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s: E = el(s);
        let y = self.value(x).scale(s);
        self.push("scale", y, Op::Scale(x, s), &[x])
    }

    /// `x[.., n] + bias[n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = bv.numel();
        if bv.rank() != 1 || xv.shape().last() != Some(&n) {
            return Err(TensorError::dim(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut y = xv.clone();
        for row in y.data_mut().chunks_exact_mut(n) {
            row.iter_mut().zip(bv.data()).for_each(|(a, &b)| *a += b);
        }
        self.push("add_bias", y, Op::AddBias(x, bias), &[x, bias])
    }

    /// `x[b, s, d] * (1 + scale[b, d]) + shift[b, d]`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (xv, sc, sh) = (self.value(x), self.value(scale), self.value(shift));
        let [b, s, d] = xv.dims::<3>()?;
        if sc.shape() != [b, d] || sh.shape() != [b, d] {
            return Err(TensorError::dim(
                "modulate",
                format!("x {:?}, scale {:?}, shift {:?}", xv.shape(), sc.shape(), sh.shape()),
            ));
        }
        let mut y = xv.clone();
        for (i, row) in y.data_mut().chunks_exact_mut(d).enumerate() {
            let bi = i / s.max(1);
            let scr = &sc.data()[bi * d..(bi + 1) * d];
            let shr = &sh.data()[bi * d..(bi + 1) * d];
            for j in 0..d {
                row[j] = row[j] * (E::one() + scr[j]) + shr[j];
            }
        }
        self.push("modulate", y, Op::Modulate { x, scale, shift }, &[x, scale, shift])
    }

    /// `x[.., k] * w[k, n]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let [k, n] = wv.dims::<2>()?;
        if xv.shape().last() != Some(&k) {
            return Err(TensorError::dim(
                "linear",
                format!("input {:?} vs weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let rows = xv.numel() / k.max(1);
        let mut out = vec![E::zero(); rows * n];
        E::gemm(rows, k, n, xv.data(), false, wv.data(), false, &mut out, false);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let y = Tensor::new(&shape, out)?;
        self.push("linear", y, Op::Linear(x, w), &[x, w])
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        if self.value(a).rank() != self.value(b).rank() {
            return Err(TensorError::dim("bmm", "tape bmm requires equal ranks"));
        }
        let y = self.value(a).bmm(self.value(b), trans_a, trans_b)?;
        self.push("bmm", y, Op::Bmm { a, b, trans_a, trans_b }, &[a, b])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).softmax_lastdim()?;
        self.push("softmax", y, Op::Softmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (y, inv_std) = layer_norm_forward(self.value(x), eps)?;
        self.push("layer_norm", y, Op::LayerNorm { x, inv_std }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(gelu);
        self.push("gelu", y, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v * sigmoid(v));
        self.push("silu", y, Op::Silu(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        self.push("reshape", y, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let y = self.value(x).permute(axes)?;
        self.push("permute", y, Op::Permute(x, axes.to_vec()), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let parts: Vec<&Tensor<E>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = Tensor::concat(&parts, axis)?;
        self.push("concat", y, Op::Concat(xs.to_vec(), axis), xs)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).narrow(axis, start, len)?;
        self.push("narrow", y, Op::Narrow { x, axis, start }, &[x])
    }

    /// Rotates consecutive value pairs of `x[.., rows, 2 * pairs]`.
    pub fn rotate_pairs(&mut self, x: Var, rot: Arc<PairRotation<E>>) -> Result<Var> {
        let xv = self.value(x);
        let r = xv.rank();
        if r < 2 || xv.shape()[r - 1] != 2 * rot.pairs || xv.shape()[r - 2] != rot.rows {
            return Err(TensorError::dim(
                "rotate_pairs",
                format!("input {:?} vs rotation [{}, {}]", xv.shape(), rot.rows, rot.pairs),
            ));
        }
        let mut y = Tensor::zeros(xv.shape());
        rot.apply(xv.data(), y.data_mut(), false);
        self.push("rotate_pairs", y, Op::Rotate { x, rot }, &[x])
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv3dSpec) -> Result<Var> {
        let y = conv3d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv3d", y, Op::Conv3d { x, w, b, spec }, &inputs)
    }

    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let r = xv.rank();
        let n = *xv.shape().last().ok_or_else(|| TensorError::dim("mean_last", "rank 0"))?;
        if n == 0 {
            return Err(TensorError::dim("mean_last", "empty axis"));
        }
        let inv: E = el(1.0 / n as f64);
        let data = xv.data().chunks_exact(n).map(|row| row.iter().copied().sum::<E>() * inv).collect();
        let y = Tensor::new(&xv.shape()[..r - 1], data)?;
        self.push("mean_last", y, Op::MeanLast(x), &[x])
    }

    /// Nearest-neighbour upsampling of the last two axes.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xv = self.value(x);
        let r = xv.rank();
        if r < 2 || factor == 0 {
            return Err(TensorError::dim("upsample", format!("shape {:?}", xv.shape())));
        }
        let (h, w) = (xv.shape()[r - 2], xv.shape()[r - 1]);
        let (oh, ow) = (h * factor, w * factor);
        let planes = xv.numel() / (h * w).max(1);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let plane = &xv.data()[p * h * w..(p + 1) * h * w];
            for i in 0..oh {
                let src = &plane[(i / factor) * w..(i / factor + 1) * w];
                out.extend((0..ow).map(|j| src[j / factor]));
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let y = Tensor::new(&shape, out)?;
        self.push("upsample", y, Op::Upsample { x, factor }, &[x])
    }

    /// Row lookup `table[ids[i], :]`, output `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let [v, d] = tv.dims::<2>()?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(TensorError::Index(format!("row {} of table with {} rows", i, v)));
            }
            data.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let y = Tensor::new(&[ids.len(), d], data)?;
        self.push("gather_rows", y, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).sub(self.value(b))?;
        let n = d.numel().max(1);
        let y = Tensor::scalar(d.sq_norm() / el(n as f64));
        self.push("mse", y, Op::Mse(a, b), &[a, b])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).mean());
        self.push("mean_all", y, Op::MeanAll(x), &[x])
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients<E>> {
        if self.value(out).numel() != 1 {
            return Err(TensorError::dim("backward", "output must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::ones(self.value(out).shape()));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads, bound: self.bound.clone() })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<E>>], v: Var, g: Tensor<E>) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) -> Result<()> {
        let y = &*self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-E::one()))?;
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.scale(*s))?,
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.wants(*b) {
                    let n = self.value(*b).numel();
                    let mut gb = vec![E::zero(); n];
                    for row in g.data().chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    self.accumulate(grads, *b, Tensor::new(&[n], gb)?)?;
                }
            }
            Op::Modulate { x, scale, shift } => {
                let xv = self.value(*x);
                let sc = self.value(*scale);
                let [b, s, d] = xv.dims::<3>()?;
                let mut gx = g.clone();
                let mut gs = vec![E::zero(); b * d];
                let mut gh = vec![E::zero(); b * d];
                for (r, (gr, xr)) in g.data().chunks_exact(d).zip(xv.data().chunks_exact(d)).enumerate() {
                    let bi = r / s.max(1);
                    for j in 0..d {
                        gs[bi * d + j] += gr[j] * xr[j];
                        gh[bi * d + j] += gr[j];
                    }
                    let scr = &sc.data()[bi * d..(bi + 1) * d];
                    let gxr = &mut gx.data_mut()[r * d..(r + 1) * d];
                    gxr.iter_mut().zip(scr).for_each(|(v, &c)| *v *= E::one() + c);
                }
                self.accumulate(grads, *x, gx)?;
                self.accumulate(grads, *scale, Tensor::new(&[b, d], gs)?)?;
                self.accumulate(grads, *shift, Tensor::new(&[b, d], gh)?)?;
            }
            Op::Linear(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let [k, n] = wv.dims::<2>()?;
                let rows = xv.numel() / k.max(1);
                if self.wants(*x) {
                    let mut gx = vec![E::zero(); rows * k];
                    E::gemm(rows, n, k, g.data(), false, wv.data(), true, &mut gx, false);
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), gx)?)?;
                }
                if self.wants(*w) {
                    let mut gw = vec![E::zero(); k * n];
                    E::gemm(k, rows, n, xv.data(), true, g.data(), false, &mut gw, false);
                    self.accumulate(grads, *w, Tensor::new(&[k, n], gw)?)?;
                }
            }
            Op::Bmm { a, b, trans_a, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ta, tb) = (*trans_a, *trans_b);
                if self.wants(*a) {
                    let ga = if ta { bv.bmm(g, tb, true)? } else { g.bmm(bv, false, !tb)? };
                    self.accumulate(grads, *a, ga)?;
                }
                if self.wants(*b) {
                    let gb = if tb { g.bmm(av, true, ta)? } else { av.bmm(g, !ta, false)? };
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Softmax(x) => {
                let n = *y.shape().last().unwrap();
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_exact_mut(n).zip(y.data().chunks_exact(n)) {
                    let dot: E = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    gr.iter_mut().zip(yr).for_each(|(v, &p)| *v = p * (*v - dot));
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::LayerNorm { x, inv_std } => {
                let n = *y.shape().last().unwrap();
                let inv_n: E = el(1.0 / n as f64);
                let mut gx = g.clone();
                for ((gr, yr), &r) in gx.data_mut().chunks_exact_mut(n).zip(y.data().chunks_exact(n)).zip(inv_std) {
                    let mean_g = gr.iter().copied().sum::<E>() * inv_n;
                    let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<E>() * inv_n;
                    gr.iter_mut().zip(yr).for_each(|(v, &yy)| *v = r * (*v - mean_g - yy * mean_gy));
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Gelu(x) => {
                let gx = self.value(*x).zip_map(g, "gelu_backward", |v, gv| gv * gelu_grad(v))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Silu(x) => {
                let gx = self.value(*x).zip_map(g, "silu_backward", |v, gv| {
                    let s = sigmoid(v);
                    gv * s * (E::one() + v * (E::one() - s))
                })?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape)?)?;
            }
            Op::Permute(x, axes) => {
                self.accumulate(grads, *x, g.permute(&inverse_perm(axes))?)?;
            }
            Op::Concat(xs, axis) => {
                let sizes: Vec<usize> = xs.iter().map(|&v| self.value(v).shape()[*axis]).collect();
                for (v, part) in xs.iter().zip(g.split(*axis, &sizes)?) {
                    self.accumulate(grads, *v, part)?;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.value(*x).shape();
                let axis = *axis;
                let outer: usize = xs[..axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let len = g.shape()[axis];
                let mut gx = Tensor::zeros(xs);
                for o in 0..outer {
                    let dst = o * xs[axis] * inner + start * inner;
                    let src = o * len * inner;
                    gx.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Rotate { x, rot } => {
                let mut gx = Tensor::zeros(g.shape());
                rot.apply(g.data(), gx.data_mut(), true);
                self.accumulate(grads, *x, gx)?;
            }
            Op::Conv3d { x, w, b, spec } => {
                let cg = conv3d_backward(self.value(*x), self.value(*w), g, *spec)?;
                self.accumulate(grads, *x, cg.input)?;
                self.accumulate(grads, *w, cg.weight)?;
                if let Some(b) = b {
                    self.accumulate(grads, *b, cg.bias)?;
                }
            }
            Op::MeanLast(x) => {
                let xs = self.value(*x).shape();
                let n = *xs.last().unwrap();
                let inv: E = el(1.0 / n as f64);
                let mut gx = Vec::with_capacity(g.numel() * n);
                for &v in g.data() {
                    gx.extend(std::iter::repeat_n(v * inv, n));
                }
                self.accumulate(grads, *x, Tensor::new(xs, gx)?)?;
            }
            Op::Upsample { x, factor } => {
                let xs = self.value(*x).shape();
                let r = xs.len();
                let (h, w) = (xs[r - 2], xs[r - 1]);
                let (oh, ow) = (h * factor, w * factor);
                let mut gx = Tensor::zeros(xs);
                let planes = gx.numel() / (h * w).max(1);
                for p in 0..planes {
                    let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            dst[(i / factor) * w + j / factor] += src[i * ow + j];
                        }
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Gather { table, ids } => {
                let ts = self.value(*table).shape();
                let d = ts[1];
                let mut gt = Tensor::zeros(ts);
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut gt.data_mut()[id * d..(id + 1) * d];
                    dst.iter_mut().zip(&g.data()[row * d..(row + 1) * d]).for_each(|(a, &b)| *a += b);
                }
                self.accumulate(grads, *table, gt)?;
            }
            Op::Mse(a, b) => {
                let diff = self.value(*a).sub(self.value(*b))?;
                let k: E = g.item() * el(2.0 / diff.numel().max(1) as f64);
                let ga = diff.scale(k);
                if self.wants(*b) {
                    self.accumulate(grads, *b, ga.scale(-E::one()))?;
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::MeanAll(x) => {
                let xs = self.value(*x).shape();
                let n = self.value(*x).numel().max(1);
                self.accumulate(grads, *x, Tensor::full(xs, g.item() / el(n as f64)))?;
            }
        }
        Ok(())
    }
}

fn sigmoid<E: Element>(v: E) -> E {
    E::one() / (E::one() + (-v).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<E: Element>(x: E) -> E {
    let half: E = el(0.5);
    let u = el::<E>(GELU_C) * (x + el::<E>(GELU_K) * x * x * x);
    half * x * (E::one() + u.tanh())
}

fn gelu_grad<E: Element>(x: E) -> E {
    let half: E = el(0.5);
    let c: E = el(GELU_C);
    let k: E = el(GELU_K);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (E::one() + th) + half * x * (E::one() - th * th) * c * (E::one() + el::<E>(3.0) * k * x * x)
}
