//! Minimal tensor algebra with reverse-mode automatic differentiation.
//!
//! Values flow through a [`Graph`] (a Wengert tape): every operation appends
//! a step with enough saved state to run its backward rule. One call to
//! [`Graph::backward`] populates the gradient of every `requires_grad` leaf
//! reachable from the loss. Training runs in `f32`; gradient checking
//! instantiates the same code at `f64`.

mod check;
mod conv;
mod graph;
mod tensor;

pub use check::{finite_diff_grad, grad_check, grad_check_subset, grad_check_value, max_rel_err};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Element type of tensors. Implemented for `f32` (training) and `f64`
/// (gradient-check mode).
pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const DTYPE: Dtype;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;

    /// C := alpha * A(m,k) * B(k,n) + beta * C(m,n), arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

/// Storage dtype tag, used by checkpoint headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

macro_rules! impl_scalar {
    ($ty:ty, $dtype:expr, $gemm:path) => {
        impl Scalar for $ty {
            const DTYPE: Dtype = $dtype;

            #[inline]
            fn zero() -> Self {
                0.0
            }
            #[inline]
            fn one() -> Self {
                1.0
            }
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $ty
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$ty>::is_finite(self)
            }
            #[inline]
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                debug_assert!(a.len() >= gemm_span(m, k, rsa, csa));
                debug_assert!(b.len() >= gemm_span(k, n, rsb, csb));
                debug_assert!(c.len() >= gemm_span(m, n, rsc, csc));
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

/// Number of elements a (rows, cols) view with the given strides spans.
fn gemm_span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    last as usize + 1
}

impl_scalar!(f32, Dtype::F32, matrixmultiply::sgemm);
impl_scalar!(f64, Dtype::F64, matrixmultiply::dgemm);

/// Geometry of a 2-d convolution layer.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        ConvSpec { in_channels, out_channels, kernel, stride: 1, padding: 0 }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    /// Output spatial extents for an (h, w) input.
    /// `floor((H + 2*pad - kh)/stride) + 1`, and analogously for `w`.
    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        if self.stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::config("conv kernel and stride must be >= 1"));
        }
        let padded_h = h + 2 * self.padding;
        let padded_w = w + 2 * self.padding;
        if padded_h < kh || padded_w < kw {
            return Err(Error::config(format!(
                "conv kernel {:?} larger than padded input {}x{}",
                self.kernel, padded_h, padded_w
            )));
        }
        Ok(((padded_h - kh) / self.stride + 1, (padded_w - kw) / self.stride + 1))
    }
}

/// Row-wise max-stabilized softmax of an (N, K) tensor; pure helper shared
/// by the grid decoder and tests.
pub fn softmax_rows<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, k) = t.dims2()?;
    let src = t.data();
    let mut out = Tensor::zeros(vec![n, k]);
    let od = out.data_mut();
    for row in 0..n {
        let r = &src[row * k..(row + 1) * k];
        let mut mx = r[0];
        for &v in r {
            mx = mx.maximum(v);
        }
        let mut denom = S::zero();
        for (j, &v) in r.iter().enumerate() {
            let e = (v - mx).exp();
            od[row * k + j] = e;
            denom += e;
        }
        for j in 0..k {
            od[row * k + j] = od[row * k + j] / denom;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
