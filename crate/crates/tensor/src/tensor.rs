use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::element::{el, Element};
use crate::error::{Result, TensorError};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::dim(
                "new",
                format!("shape {:?} needs {} values, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, E::one())
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn scalar(v: E) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            el(z * std)
        })
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| el(rng.random_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dims<const N: usize>(&self) -> Result<[usize; N]> {
        self.shape.as_slice().try_into().map_err(|_| {
            TensorError::dim("dims", format!("expected rank {}, got shape {:?}", N, self.shape))
        })
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn item(&self) -> E {
        self.data[0]
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        self.clone().into_reshape(shape)
    }

    pub fn into_reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(TensorError::dim(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: E) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::dim(
                "add_assign",
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    /// Compensated sum, so whole-tensor reductions stay within a few ulps.
    pub fn sum(&self) -> E {
        compensated_sum(self.data.iter().copied())
    }

    pub fn mean(&self) -> E {
        self.sum() / el(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> E {
        self.data.iter().fold(E::zero(), |m, v| m.max(v.abs()))
    }

    pub fn sq_norm(&self) -> E {
        compensated_sum(self.data.iter().map(|&v| v * v))
    }

    /// Plain 2-D product `[m, k] x [k, n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let [m, k] = self.dims::<2>().map_err(|_| rank_err("matmul", &self.shape))?;
        let [k2, n] = other.dims::<2>().map_err(|_| rank_err("matmul", &other.shape))?;
        if k != k2 {
            return Err(TensorError::dim(
                "matmul",
                format!("inner extents differ: {:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![E::zero(); m * n];
        E::gemm(m, k, n, &self.data, false, &other.data, false, &mut out, false);
        Ok(Self { shape: vec![m, n], data: out })
    }

    /// Batched product over all leading axes.
    ///
    /// `self` is `[.., m, k]` (or `[.., k, m]` with `trans_a`), `other` is
    /// `[.., k, n]` (or `[.., n, k]` with `trans_b`). A rank-2 `other` is
    /// shared across the batch.
    pub fn bmm(&self, other: &Self, trans_a: bool, trans_b: bool) -> Result<Self> {
        let (batch, m, k) = batch_mk(&self.shape, trans_a, "bmm")?;
        let (batch_b, kb, n) = batch_mk(&other.shape, trans_b, "bmm")?;
        let shared_b = other.rank() == 2;
        if kb != k || (!shared_b && batch_b != batch) || (!shared_b && self.rank() != other.rank()) {
            return Err(TensorError::dim(
                "bmm",
                format!("incompatible operands {:?} and {:?}", self.shape, other.shape),
            ));
        }
        let mut shape = self.shape[..self.rank() - 2].to_vec();
        shape.extend([m, n]);
        let mut out = vec![E::zero(); batch * m * n];
        for bi in 0..batch {
            let a = &self.data[bi * m * k..(bi + 1) * m * k];
            let b = if shared_b { &other.data[..] } else { &other.data[bi * k * n..(bi + 1) * k * n] };
            E::gemm(m, k, n, a, trans_a, b, trans_b, &mut out[bi * m * n..(bi + 1) * m * n], false);
        }
        Ok(Self { shape, data: out })
    }

    /// Materialized axis permutation.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::dim("permute", format!("bad axes {:?} for rank {}", axes, r)));
        }
        let in_strides = strides_of(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        if self.data.is_empty() {
            return Ok(Self { shape: out_shape, data });
        }
        // innermost run copied with a fixed source stride
        let inner = out_shape.last().copied().unwrap_or(1);
        let inner_stride = src_strides.last().copied().unwrap_or(1);
        let outer_shape = &out_shape[..r.saturating_sub(1)];
        let mut idx = vec![0usize; outer_shape.len()];
        loop {
            let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            if inner_stride == 1 {
                data.extend_from_slice(&self.data[base..base + inner]);
            } else {
                data.extend((0..inner).map(|j| self.data[base + j * inner_stride]));
            }
            if !increment(&mut idx, outer_shape) {
                break;
            }
        }
        Ok(Self { shape: out_shape, data })
    }

    pub fn transpose_last2(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(rank_err("transpose", &self.shape));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::dim("concat", "no inputs"))?;
        let r = first.rank();
        if axis >= r {
            return Err(TensorError::dim("concat", format!("axis {} out of range", axis)));
        }
        for p in parts {
            if p.rank() != r
                || p.shape.iter().enumerate().any(|(i, &d)| i != axis && d != first.shape[i])
            {
                return Err(TensorError::dim(
                    "concat",
                    format!("shape {:?} incompatible with {:?} on axis {}", p.shape, first.shape, axis),
                ));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let run = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * run..(o + 1) * run]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(TensorError::dim(
                "narrow",
                format!("range {}..{} on axis {} of {:?}", start, start + len, axis, self.shape),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Self>> {
        if axis >= self.rank() || sizes.iter().sum::<usize>() != self.shape[axis] {
            return Err(TensorError::dim(
                "split",
                format!("sizes {:?} do not cover axis {} of {:?}", sizes, axis, self.shape),
            ));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let t = self.narrow(axis, start, len);
                start += len;
                t
            })
            .collect()
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastdim(&self) -> Result<Self> {
        let n = *self.shape.last().ok_or_else(|| rank_err("softmax", &self.shape))?;
        if n == 0 {
            return Err(TensorError::dim("softmax", "empty last axis"));
        }
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(n) {
            let max = row.iter().fold(E::neg_infinity(), |m, &v| m.max(v));
            let mut sum = E::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = E::one() / sum;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(Self { shape: self.shape.clone(), data })
    }

    /// Layer normalization over the last axis without affine parameters.
    pub fn layer_norm_lastdim(&self, eps: f64) -> Result<Self> {
        Ok(layer_norm_forward(self, eps)?.0)
    }
}

/// Neumaier summation.
pub fn compensated_sum<E: Element>(values: impl Iterator<Item = E>) -> E {
    let mut sum = E::zero();
    let mut carry = E::zero();
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

pub(crate) fn layer_norm_forward<E: Element>(x: &Tensor<E>, eps: f64) -> Result<(Tensor<E>, Vec<E>)> {
    let n = *x.shape.last().ok_or_else(|| rank_err("layer_norm", &x.shape))?;
    if n == 0 {
        return Err(TensorError::dim("layer_norm", "empty last axis"));
    }
    let inv_n: E = el(1.0 / n as f64);
    let mut data = x.data.clone();
    let mut inv_std = Vec::with_capacity(data.len() / n);
    for row in data.chunks_exact_mut(n) {
        let mean = row.iter().copied().sum::<E>() * inv_n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() * inv_n;
        let r = E::one() / (var + el(eps)).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * r);
        inv_std.push(r);
    }
    Ok((Tensor { shape: x.shape.clone(), data }, inv_std))
}

pub(crate) fn rank_err(op: &'static str, shape: &[usize]) -> TensorError {
    TensorError::dim(op, format!("unsupported rank for shape {:?}", shape))
}

/// Returns (batch, rows, cols) of the logical matrix view of the last two axes.
fn batch_mk(shape: &[usize], trans: bool, op: &'static str) -> Result<(usize, usize, usize)> {
    let r = shape.len();
    if r < 2 {
        return Err(rank_err(op, shape));
    }
    let batch = shape[..r - 2].iter().product();
    let (a, b) = (shape[r - 2], shape[r - 1]);
    Ok(if trans { (batch, b, a) } else { (batch, a, b) })
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn increment(idx: &mut [usize], shape: &[usize]) -> bool {
    for i in (0..idx.len()).rev() {
        idx[i] += 1;
        if idx[i] < shape[i] {
            return true;
        }
        idx[i] = 0;
    }
    false
}

pub(crate) fn inverse_perm(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f32]) -> Tensor<f32> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        assert_eq!(eye.matmul(&b).unwrap(), b);
        let a = t(&[1, 2], &[1., 2.]);
        let c = t(&[2, 1], &[3., 4.]);
        assert_eq!(a.matmul(&c).unwrap().data(), &[11.]);
    }

    #[test]
    fn matmul_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f32>::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[7, 3], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0f32;
                for k in 0..7 {
                    s += a.data()[i * 7 + k] * b.data()[k * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn bmm_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[2, 5, 4], 1.0, &mut rng);
        let got = a.bmm(&b, false, true).unwrap();
        let want = a.bmm(&b.transpose_last2().unwrap(), false, false).unwrap();
        assert_eq!(got.shape(), &[2, 3, 5]);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let at = a.transpose_last2().unwrap();
        let got2 = at.bmm(&b, true, true).unwrap();
        assert_eq!(got2, got);
    }

    #[test]
    fn softmax_cases() {
        let s = t(&[3], &[0., 0., 0.]).softmax_lastdim().unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = t(&[2], &[1000., 1000.]).softmax_lastdim().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let x = [0.3f64, -1.2, 2.5, 0.0];
        let s = Tensor::new(&[4], x.to_vec()).unwrap().softmax_lastdim().unwrap();
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        for (i, v) in x.iter().enumerate() {
            assert!((s.data()[i] - v.exp() / z).abs() < 1e-7);
        }
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[6, 32], 3.0, &mut rng).map(|v| v + 5.0);
        let y = x.layer_norm_lastdim(1e-12).unwrap();
        for row in y.data().chunks(32) {
            let mean = row.iter().sum::<f64>() / 32.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 4, 5], |i| i as f32);
        let p = x.permute(&[2, 0, 3, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 5, 3]);
        // element (a,b,c,d) of x lands at (c,a,d,b)
        assert_eq!(p.data()[((1 * 2 + 1) * 5 + 2) * 3 + 2], x.data()[((1 * 3 + 2) * 4 + 1) * 5 + 2]);
        let back = p.permute(&inverse_perm(&[2, 0, 3, 1])).unwrap();
        assert_eq!(back, x);
    }

    proptest::proptest! {
        #[test]
        fn concat_then_split_is_identity(a in 1usize..4, b in 1usize..4, c in 1usize..4, axis in 0usize..3, cut in 1usize..4) {
            let mut shape = vec![a, b, c];
            let extra = cut;
            let x = Tensor::<f32>::from_fn(&shape, |i| i as f32);
            shape[axis] = extra;
            let y = Tensor::<f32>::from_fn(&shape, |i| -(i as f32));
            let joined = Tensor::concat(&[&x, &y], axis).unwrap();
            let parts = joined.split(axis, &[x.shape()[axis], extra]).unwrap();
            proptest::prop_assert_eq!(&parts[0], &x);
            proptest::prop_assert_eq!(&parts[1], &y);
        }
    }
}
