//! A small, deterministic CPU neural-network engine.
//!
//! Layers cache whatever their backward pass needs and hand it back to the
//! caller, so one layer can be run forward several times in a single step
//! (two views, a suppressed path) with gradients accumulating into the same
//! [`Param`] buffers. Everything is generic over [`Real`] so gradient checks
//! can run in `f64` while training runs in `f32`.

mod batchnorm;
mod conv;
mod linear;
mod seq;
mod sgd;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

pub use batchnorm::{BatchNorm, BatchNormCache};
pub use conv::{Conv2d, ConvCache};
pub use linear::{Linear, LinearCache};
pub use seq::{
    global_avg_pool, global_avg_pool_backward, ConvBlock, Encoder, EncoderCache, Mlp, MlpCache,
    MlpLayer,
};
pub use sgd::Sgd;

/// Scalar type the engine computes in.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// `C = alpha * A * B + beta * C` on raw strided storage.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `C (m x n) = op(A) * op(B) + beta * C`.
///
/// `a` is stored as `m x k` (or `k x m` when `trans_a`), `b` as `k x n`
/// (or `n x k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "lhs size");
    assert_eq!(b.len(), k * n, "rhs size");
    assert_eq!(c.len(), m * n, "out size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: sizes were checked above and `c` is a distinct &mut borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

/// A trainable tensor with its gradient accumulator and SGD momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub momentum: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let n = value.len();
        Self {
            shape,
            value,
            grad: vec![T::zero(); n],
            momentum: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    /// Kaiming-normal initialisation for a ReLU layer with the given fan-in.
    pub fn kaiming<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Self::new(shape, value)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform_fan_in<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect();
        Self::new(shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// A named, shaped tensor snapshot used for checkpoints and state copies.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Anything holding parameters and buffers that can be visited by name.
pub trait Module<T: Real> {
    /// Trainable parameters in a fixed order.
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>);

    fn params<'a>(&'a self, out: &mut Vec<&'a Param<T>>);

    /// Parameters and non-trainable buffers under `prefix`.
    fn state(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>);

    /// Restores every tensor `state` would emit; missing or mis-shaped
    /// entries are reported by name.
    fn load_state(
        &mut self,
        prefix: &str,
        lookup: &mut dyn FnMut(&str, &[usize]) -> Result<Vec<T>, String>,
    ) -> Result<(), String>;

    fn zero_grad(&mut self) {
        let mut ps = Vec::new();
        self.params_mut(&mut ps);
        for p in ps {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        let mut ps = Vec::new();
        self.params(&mut ps);
        ps.iter().map(|p| p.len()).sum()
    }
}

/// A batch of `n` feature maps stored NCHW.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch4<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Batch4<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "batch data size");
        Self { n, c, h, w, data }
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let s = self.sample_len();
        &mut self.data[i * s..(i + 1) * s]
    }
}

/// Row-major matrix, used for `batch x features` activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data size");
        Self { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient of ReLU given the layer's output.
pub fn relu_backward<T: Real>(out: &[T], grad: &mut [T]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite differences used by the layer tests.

    /// Numerically differentiates `f` with respect to `x[idx]`.
    pub fn central_diff(x: &mut [f64], idx: usize, h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
        let orig = x[idx];
        x[idx] = orig + h;
        let up = f(x);
        x[idx] = orig - h;
        let down = f(x);
        x[idx] = orig;
        (up - down) / (2.0 * h)
    }

    pub fn assert_close(analytic: f64, numeric: f64, tol: f64, what: &str) {
        let scale = analytic.abs().max(numeric.abs()).max(1e-6);
        let rel = (analytic - numeric).abs() / scale;
        assert!(
            rel < tol,
            "{what}: analytic {analytic} vs numeric {numeric} (rel {rel})"
        );
    }
}
