//! Scalar abstraction and small dense helpers on top of `ndarray`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

/// Floating-point element type used by models and transcoders.
///
/// Training runs in `f32`; gradient and attribution oracles run in `f64`.
pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: &'static str;

    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

pub fn randn<T: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = rng.sample(StandardNormal);
        T::of(v * std)
    })
}

pub fn cast2<A: Scalar, B: Scalar>(a: &Array2<A>) -> Array2<B> {
    a.mapv(|v| B::of(v.f64()))
}

pub fn cast1<A: Scalar, B: Scalar>(a: &Array1<A>) -> Array1<B> {
    a.mapv(|v| B::of(v.f64()))
}

pub fn dot<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    a.dot(&b)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_t<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    a.dot(&b.t())
}

/// Sum over rows (the token axis).
pub fn col_sums<T: Scalar>(a: ArrayView2<T>) -> Array1<T> {
    a.sum_axis(Axis(0))
}

pub fn l2_norm<T: Scalar>(v: ArrayView1<T>) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}

/// Position of each row's maximum and a stable descending order helper.
pub fn argsort_desc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// 1-based rank of `target` under descending logits; ties resolved by token id.
pub fn rank_of(logits: &[f64], target: usize) -> usize {
    let t = logits[target];
    1 + logits
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > t || (v == t && i < target))
        .count()
}

pub fn top_k(logits: &[f64], k: usize) -> Vec<(usize, f64)> {
    argsort_desc(logits)
        .into_iter()
        .take(k)
        .map(|i| (i, logits[i]))
        .collect()
}
