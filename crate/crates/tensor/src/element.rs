use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Storage type of a tensor snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element usable by every kernel.
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn from_f64_lossy(v: f64) -> Self;

    fn to_le_vec(values: &[Self]) -> Vec<u8>;

    fn from_le_slice(bytes: &[u8]) -> Vec<Self>;

    /// `c = alpha * op(a) * op(b) + beta * c` on row-major storage.
    ///
    /// `a` is `m x k` after the optional transpose, `b` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // logical (rows x cols); stored as cols x rows when transposed
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr, $gemm:path, $n:expr) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;

            fn from_f64_lossy(v: f64) -> Self {
                v as $t
            }

            fn to_le_vec(values: &[Self]) -> Vec<u8> {
                let mut out = Vec::with_capacity(values.len() * $n);
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out
            }

            fn from_le_slice(bytes: &[u8]) -> Vec<Self> {
                bytes
                    .chunks_exact($n)
                    .map(|c| {
                        let mut buf = [0u8; $n];
                        buf.copy_from_slice(c);
                        <$t>::from_le_bytes(buf)
                    })
                    .collect()
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: extents checked above; strides describe dense row-major buffers.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, DType::F32, matrixmultiply::sgemm, 4);
impl_element!(f64, DType::F64, matrixmultiply::dgemm, 8);

/// Shorthand for converting an `f64` literal into `E`.
#[inline]
pub fn el<E: Element>(v: f64) -> E {
    E::from_f64_lossy(v)
}
