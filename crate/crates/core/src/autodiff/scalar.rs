use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Numeric type the spline, parameter-generation and flow code is generic over.
///
/// Implemented by `f64` (plain evaluation), [`Var`](super::Var) (reverse-mode
/// tape) and [`Dual`](super::Dual) (forward-mode tangents, nestable over any
/// other `Scalar`). Arithmetic on every implementation reproduces the plain
/// `f64` arithmetic on [`Scalar::value`] exactly.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// A constant with no derivative information.
    fn cst(v: f64) -> Self;

    fn value(&self) -> f64;

    /// True only for a constant that is exactly zero; lets implementations
    /// skip work on structurally-zero tangents.
    fn is_const_zero(&self) -> bool;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn powi(self, n: i32) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn one() -> Self {
        Self::cst(1.0)
    }

    fn max(self, other: Self) -> Self {
        if self.value() >= other.value() {
            self
        } else {
            other
        }
    }

    /// `Σ w_i x_i + b`, evaluated left to right.
    fn affine_dot(w: &[Self], x: &[Self], b: Self) -> Self {
        debug_assert_eq!(w.len(), x.len());
        let mut acc = Self::zero();
        for (wi, xi) in w.iter().zip(x) {
            acc = acc + *wi * *xi;
        }
        acc + b
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn is_const_zero(&self) -> bool {
        *self == 0.0
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
}

/// Softmax with max-subtraction.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let m = logits
        .iter()
        .map(|v| v.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let shift = S::cst(if m.is_finite() { m } else { 0.0 });
    let exps: Vec<S> = logits.iter().map(|&v| (v - shift).exp()).collect();
    let mut total = S::zero();
    for &e in &exps {
        total = total + e;
    }
    exps.into_iter().map(|e| e / total).collect()
}

/// Inclusive running sum.
pub fn cumsum<S: Scalar>(xs: &[S]) -> Vec<S> {
    let mut acc = S::zero();
    xs.iter()
        .map(|&x| {
            acc = acc + x;
            acc
        })
        .collect()
}
