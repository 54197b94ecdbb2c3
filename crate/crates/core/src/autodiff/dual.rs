//! Forward-mode tangents over an arbitrary [`Scalar`].
//!
//! `Dual<Var, N>` carries `N` directional derivatives whose entries are
//! themselves tape variables, which is how input derivatives (forces) stay
//! differentiable with respect to model parameters.

use std::ops::{Add, Div, Mul, Neg, Sub};

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct Dual<S, const N: usize> {
    pub re: S,
    pub eps: [S; N],
}

impl<S: Scalar, const N: usize> Dual<S, N> {
    pub fn constant(re: S) -> Self {
        Dual {
            re,
            eps: [S::zero(); N],
        }
    }

    /// Seeds tangent direction `dir`.
    pub fn variable(re: S, dir: usize) -> Self {
        let mut eps = [S::zero(); N];
        eps[dir] = S::one();
        Dual { re, eps }
    }

    #[inline]
    fn chain(self, re: S, d: S) -> Self {
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            if !e.is_const_zero() {
                *e = *e * d;
            }
        }
        Dual { re, eps }
    }
}

impl<S: Scalar, const N: usize> Add for Dual<S, N> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        let mut eps = self.eps;
        for (e, r) in eps.iter_mut().zip(rhs.eps) {
            *e = *e + r;
        }
        Dual {
            re: self.re + rhs.re,
            eps,
        }
    }
}

impl<S: Scalar, const N: usize> Sub for Dual<S, N> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        let mut eps = self.eps;
        for (e, r) in eps.iter_mut().zip(rhs.eps) {
            if !r.is_const_zero() {
                *e = *e - r;
            }
        }
        Dual {
            re: self.re - rhs.re,
            eps,
        }
    }
}

impl<S: Scalar, const N: usize> Mul for Dual<S, N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut eps = [S::zero(); N];
        for (i, e) in eps.iter_mut().enumerate() {
            let a = if self.eps[i].is_const_zero() {
                S::zero()
            } else {
                self.eps[i] * rhs.re
            };
            let b = if rhs.eps[i].is_const_zero() {
                S::zero()
            } else {
                self.re * rhs.eps[i]
            };
            *e = a + b;
        }
        Dual {
            re: self.re * rhs.re,
            eps,
        }
    }
}

impl<S: Scalar, const N: usize> Div for Dual<S, N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let q = self.re / rhs.re;
        let mut eps = [S::zero(); N];
        for (i, e) in eps.iter_mut().enumerate() {
            let num = if rhs.eps[i].is_const_zero() {
                self.eps[i]
            } else {
                self.eps[i] - q * rhs.eps[i]
            };
            if !num.is_const_zero() {
                *e = num / rhs.re;
            }
        }
        Dual { re: q, eps }
    }
}

impl<S: Scalar, const N: usize> Neg for Dual<S, N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            if !e.is_const_zero() {
                *e = -*e;
            }
        }
        Dual { re: -self.re, eps }
    }
}

impl<S: Scalar, const N: usize> Scalar for Dual<S, N> {
    fn cst(v: f64) -> Self {
        Dual::constant(S::cst(v))
    }
    fn value(&self) -> f64 {
        self.re.value()
    }
    fn is_const_zero(&self) -> bool {
        self.re.is_const_zero() && self.eps.iter().all(|e| e.is_const_zero())
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        let re = self.re.ln();
        self.chain(re, S::one() / self.re)
    }
    fn sin(self) -> Self {
        self.chain(self.re.sin(), self.re.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.re.cos(), -self.re.sin())
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.chain(s, S::cst(0.5) / s)
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        self.chain(t, S::one() - t * t)
    }
    fn powi(self, n: i32) -> Self {
        let d = if n == 0 {
            S::zero()
        } else {
            S::cst(n as f64) * self.re.powi(n - 1)
        };
        self.chain(self.re.powi(n), d)
    }

    fn affine_dot(w: &[Self], x: &[Self], b: Self) -> Self {
        let w_re: Vec<S> = w.iter().map(|v| v.re).collect();
        let x_re: Vec<S> = x.iter().map(|v| v.re).collect();
        let re = S::affine_dot(&w_re, &x_re, b.re);
        let w_const = w.iter().all(|v| v.eps.iter().all(|e| e.is_const_zero()));
        let mut eps = [S::zero(); N];
        let mut col: Vec<S> = Vec::with_capacity(x.len());
        for (i, e) in eps.iter_mut().enumerate() {
            col.clear();
            col.extend(x.iter().map(|v| v.eps[i]));
            let mut t = if col.iter().all(|c| c.is_const_zero()) {
                b.eps[i]
            } else {
                S::affine_dot(&w_re, &col, b.eps[i])
            };
            if !w_const {
                col.clear();
                col.extend(w.iter().map(|v| v.eps[i]));
                t = t + S::affine_dot(&x_re, &col, S::zero());
            }
            *e = t;
        }
        Dual { re, eps }
    }
}

/// A scalar function that can be evaluated over any [`Scalar`], so it can be
/// differentiated by nesting [`Dual`] numbers.
pub trait ScalarFn {
    fn eval<S: Scalar>(&self, x: S) -> S;

    /// Highest derivative order that exists and is continuous, `None` if smooth.
    fn smoothness(&self) -> Option<usize> {
        None
    }
}

/// `d f / dx` (order 1) or `d² f / dx²` (order 2) at `x`.
///
/// The result has the same scalar type as `x`, so when `S` is a tape
/// variable it remains differentiable with respect to anything `f` captured
/// as a tape variable.
pub fn input_derivative<S: Scalar, F: ScalarFn>(f: &F, x: S, order: usize) -> Result<S> {
    if let Some(c) = f.smoothness() {
        if order > c {
            return Err(Error::Smoothness {
                requested: order,
                available: c,
            });
        }
    }
    match order {
        1 => Ok(f.eval(Dual::<S, 1>::variable(x, 0)).eps[0]),
        2 => {
            let inner = Dual::<S, 1>::variable(x, 0);
            let seed = Dual::<Dual<S, 1>, 1> {
                re: inner,
                eps: [Dual::constant(S::one())],
            };
            Ok(f.eval(seed).eps[0].eps[0])
        }
        _ => Err(Error::Argument(format!(
            "input derivative order must be 1 or 2, got {order}"
        ))),
    }
}
