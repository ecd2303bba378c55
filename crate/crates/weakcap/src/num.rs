//! Scalar abstraction and the small dense linear algebra the models are built
//! on.
//!
//! Every numeric kernel is generic over [`Scalar`] so the math is checkable at
//! both `f32` and `f64`; the pipeline itself is instantiated at [`crate::Real`]
//! (`f64`), which the checkpoint formats and gradient tolerances assume.

use num_traits::{Float, FromPrimitive};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Real, Result};

/// Floating-point scalar the kernels are generic over.
pub trait Scalar: Float + FromPrimitive + Default + std::fmt::Debug + std::fmt::Display + 'static {
    /// Conversion from an `f64` constant (lossy at `f32`).
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("finite scalar constant")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dot product of two equal-length slices.
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(F::zero(), |acc, (x, y)| acc + *x * *y)
}

/// `y += s * x` element-wise.
pub fn axpy<F: Scalar>(y: &mut [F], s: F, x: &[F]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + s * *xi;
    }
}

/// Logistic function.
pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Rectifier.
pub fn relu<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        F::zero()
    }
}

/// Max-shifted softmax, in place. Empty input is left untouched.
pub fn softmax_inplace<F: Scalar>(xs: &mut [F]) {
    if xs.is_empty() {
        return;
    }
    let mut m = xs[0];
    for &x in xs.iter() {
        if x > m {
            m = x;
        }
    }
    let mut z = F::zero();
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        z = z + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / z;
    }
}

/// Backward pass of [`softmax_inplace`]: given the softmax output `p` and the
/// gradient `dp` w.r.t. that output, returns the gradient w.r.t. the logits.
pub fn softmax_backward<F: Scalar>(p: &[F], dp: &[F]) -> Vec<F> {
    let s = dot(p, dp);
    p.iter().zip(dp).map(|(&pi, &di)| pi * (di - s)).collect()
}

/// Total-variation distance `0.5 * sum |a - b|` between two weight vectors.
pub fn total_variation<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let two = F::c(2.0);
    a.iter()
        .zip(b)
        .fold(F::zero(), |acc, (x, y)| acc + (*x - *y).abs())
        / two
}

/// Index of the largest element, lowest index on ties. Empty slices return 0.
pub fn argmax<F: Scalar>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Deterministic per-stream RNG: mixes `(seed, stream)` through SplitMix64 so
/// distinct streams of one run never overlap.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

/// Dense row-major matrix; column vectors use `cols == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar = Real> {
    rows: usize,
    cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: F) {
        for x in &mut self.data {
            *x = v;
        }
    }

    /// `A * x` for a row-major `A` (rows x cols) and `x` of length `cols`.
    pub fn matvec(&self, x: &[F]) -> Vec<F> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `A^T * y` for `y` of length `rows`.
    pub fn matvec_transpose(&self, y: &[F]) -> Vec<F> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![F::zero(); self.cols];
        for r in 0..self.rows {
            axpy(&mut out, y[r], self.row(r));
        }
        out
    }

    /// Rank-one update `A += y * x^T`.
    pub fn add_outer(&mut self, y: &[F], x: &[F]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for r in 0..self.rows {
            let yr = y[r];
            axpy(self.row_mut(r), yr, x);
        }
    }

    /// `A += s * B` element-wise.
    pub fn add_scaled(&mut self, other: &Self, s: F) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + s * *b;
        }
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&self) -> F {
        self.data.iter().fold(F::zero(), |acc, &x| acc + x * x).sqrt()
    }
}

/// A collection of named-by-position tensors that can be updated, flattened,
/// and regularized uniformly. Implemented by every trainable parameter struct;
/// gradients reuse the parameter struct itself (`zeros_like`).
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    /// A structurally identical set with every entry zeroed.
    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Read parameter `idx` of the concatenated flat view.
    fn get_flat(&self, mut idx: usize) -> f64 {
        for t in self.tensors() {
            if idx < t.len() {
                return t.data[idx];
            }
            idx -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    /// Write parameter `idx` of the concatenated flat view.
    fn set_flat(&mut self, mut idx: usize, v: f64) {
        for t in self.tensors_mut() {
            if idx < t.len() {
                t.data[idx] = v;
                return;
            }
            idx -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    /// `self += scale * other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self, scale: f64) {
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            dst.add_scaled(s, scale);
        }
    }

    /// Sum of per-tensor Euclidean norms (the regularizer `sum_t ||t||_2`).
    fn norm_sum(&self) -> f64 {
        self.tensors().iter().map(|t| t.l2_norm()).sum()
    }

    /// Adds `scale * d(norm_sum)/d(params)` into `grads`. The gradient of each
    /// tensor's norm is `t / ||t||_2`; all-zero tensors contribute nothing.
    fn add_norm_gradient(&self, grads: &mut Self, scale: f64) {
        let src = self.tensors();
        for (g, t) in grads.tensors_mut().into_iter().zip(src) {
            let n = t.l2_norm();
            if n > 0.0 {
                g.add_scaled(t, scale / n);
            }
        }
    }
}

/// Central finite difference of `loss` w.r.t. flat parameter `index`,
/// restoring the parameter afterwards.
pub fn central_difference<P: ParamSet>(
    params: &mut P,
    index: usize,
    step: f64,
    mut loss: impl FnMut(&P) -> f64,
) -> f64 {
    let orig = params.get_flat(index);
    params.set_flat(index, orig + step);
    let up = loss(params);
    params.set_flat(index, orig - step);
    let down = loss(params);
    params.set_flat(index, orig);
    (up - down) / (2.0 * step)
}

/// Relative error between an analytic and a finite-difference derivative.
/// Both magnitudes below 1e-10 count as an exact match, and the denominator
/// is floored at 1e-4 so that near-zero derivatives are judged by absolute
/// agreement: a central difference at step 1e-5 on a loss of order ten only
/// resolves derivatives down to roughly 1e-10, which a strict ratio would
/// amplify past any tolerance.
pub fn gradient_rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-10 {
        return 0.0;
    }
    (analytic - numeric).abs() / scale.max(1e-4)
}
