//! 3-D convolution through an im2col lowering onto the shared gemm kernel.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dSpec {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self { stride, padding }
    }
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Self { stride: [1; 3], padding: [0; 3] }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    spec: Conv3dSpec,
}

impl Geometry {
    fn new<E: Element>(x: &Tensor<E>, w: &Tensor<E>, spec: Conv3dSpec) -> Result<Self> {
        let [batch, cin, t, h, ww] = x.dims::<5>()?;
        let [cout, cin_w, kt, kh, kw] = w.dims::<5>()?;
        if cin != cin_w {
            return Err(TensorError::dim(
                "conv3d",
                format!("input channels {} but kernel expects {}", cin, cin_w),
            ));
        }
        let input = [t, h, ww];
        let kernel = [kt, kh, kw];
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * spec.padding[a];
            if kernel[a] > padded || kernel[a] == 0 {
                return Err(TensorError::dim(
                    "conv3d",
                    format!("kernel {:?} larger than padded input {:?}", kernel, input),
                ));
            }
            if spec.stride[a] == 0 {
                return Err(TensorError::dim("conv3d", "zero stride"));
            }
            output[a] = (padded - kernel[a]) / spec.stride[a] + 1;
        }
        Ok(Self { batch, cin, cout, input, kernel, output, spec })
    }

    fn k_len(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn in_len(&self) -> usize {
        self.cin * self.input.iter().product::<usize>()
    }

    /// Visits every (column buffer index, input index) pair that is not padding.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let [t, h, w] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [ot, oh, ow] = self.output;
        let [st, sh, sw] = self.spec.stride;
        let [pt, ph, pw] = self.spec.padding;
        let l = self.out_len();
        for c in 0..self.cin {
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let row = ((c * kt + dt) * kh + dh) * kw + dw;
                        for zt in 0..ot {
                            let it = (zt * st + dt) as isize - pt as isize;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            for zh in 0..oh {
                                let ih = (zh * sh + dh) as isize - ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let in_base = ((c * t + it as usize) * h + ih as usize) * w;
                                let col_base = (zt * oh + zh) * ow;
                                for zw in 0..ow {
                                    let iw = (zw * sw + dw) as isize - pw as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    f(row * l + col_base + zw, in_base + iw as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<E: Element>(&self, x: &[E], cols: &mut [E]) {
        cols.iter_mut().for_each(|v| *v = E::zero());
        self.for_each_tap(|ci, xi| cols[ci] = x[xi]);
    }

    fn col2im<E: Element>(&self, cols: &[E], dx: &mut [E]) {
        self.for_each_tap(|ci, xi| dx[xi] += cols[ci]);
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.output[0], self.output[1], self.output[2]]
    }
}

/// `x: [b, cin, t, h, w]`, `weight: [cout, cin, kt, kh, kw]`, `bias: [cout]`.
pub fn conv3d<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    spec: Conv3dSpec,
) -> Result<Tensor<E>> {
    let g = Geometry::new(x, weight, spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(TensorError::dim("conv3d", format!("bias shape {:?}", b.shape())));
        }
    }
    let (kl, l) = (g.k_len(), g.out_len());
    let mut cols = vec![E::zero(); kl * l];
    let mut out = vec![E::zero(); g.batch * g.cout * l];
    for bi in 0..g.batch {
        g.im2col(&x.data()[bi * g.in_len()..(bi + 1) * g.in_len()], &mut cols);
        let dst = &mut out[bi * g.cout * l..(bi + 1) * g.cout * l];
        E::gemm(g.cout, kl, l, weight.data(), false, &cols, false, dst, false);
        if let Some(b) = bias {
            for (co, row) in dst.chunks_exact_mut(l).enumerate() {
                let bv = b.data()[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(&g.out_shape(), out)
}

pub struct Conv3dGrads<E> {
    pub input: Tensor<E>,
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

pub fn conv3d_backward<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    grad_out: &Tensor<E>,
    spec: Conv3dSpec,
) -> Result<Conv3dGrads<E>> {
    let g = Geometry::new(x, weight, spec)?;
    if grad_out.shape() != g.out_shape().as_slice() {
        return Err(TensorError::dim("conv3d_backward", "gradient shape mismatch"));
    }
    let (kl, l) = (g.k_len(), g.out_len());
    let mut cols = vec![E::zero(); kl * l];
    let mut dcols = vec![E::zero(); kl * l];
    let mut dx = vec![E::zero(); x.numel()];
    let mut dw = vec![E::zero(); weight.numel()];
    let mut db = vec![E::zero(); g.cout];
    for bi in 0..g.batch {
        let go = &grad_out.data()[bi * g.cout * l..(bi + 1) * g.cout * l];
        g.im2col(&x.data()[bi * g.in_len()..(bi + 1) * g.in_len()], &mut cols);
        // dW += dOut * cols^T
        E::gemm(g.cout, l, kl, go, false, &cols, true, &mut dw, true);
        // dCols = W^T * dOut
        E::gemm(kl, g.cout, l, weight.data(), true, go, false, &mut dcols, false);
        g.col2im(&dcols, &mut dx[bi * g.in_len()..(bi + 1) * g.in_len()]);
        for (co, row) in go.chunks_exact(l).enumerate() {
            db[co] += row.iter().copied().sum::<E>();
        }
    }
    Ok(Conv3dGrads {
        input: Tensor::new(x.shape(), dx)?,
        weight: Tensor::new(weight.shape(), dw)?,
        bias: Tensor::new(&[g.cout], db)?,
    })
}
