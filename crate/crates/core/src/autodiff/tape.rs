//! Scalar reverse-mode tape.
//!
//! Every thread owns one tape. [`Tape::new`] clears it and starts a new
//! generation; a [`Var`] created under an older generation is rejected when
//! it is combined with current ones. Each recorded node stores its parents
//! together with the local partial derivatives, so the reverse sweep is a
//! single pass over the edge list.
//!
//! Operations cannot return `Result` through operator overloading, so the
//! first numeric-domain violation (`ln` of a non-positive number, division by
//! zero, ...) is remembered on the tape and reported by the next
//! [`Tape::gradient`] call.

use std::cell::RefCell;
use std::marker::PhantomData;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::Scalar;
use crate::error::{Error, Result};

const CONST: u32 = u32::MAX;

struct TapeData {
    generation: u32,
    offsets: Vec<u32>,
    edges: Vec<(u32, f64)>,
    error: Option<Error>,
}

impl TapeData {
    fn record_error(&mut self, e: Error) {
        if self.error.is_none() {
            self.error = Some(e);
        }
    }
}

thread_local! {
    static TAPE: RefCell<TapeData> = const {
        RefCell::new(TapeData {
            generation: 0,
            offsets: Vec::new(),
            edges: Vec::new(),
            error: None,
        })
    };
}

/// Handle to the current thread's tape. Not `Send`.
pub struct Tape {
    generation: u32,
    _local: PhantomData<*const ()>,
}

/// A real value with a node on the current tape (or a constant).
#[derive(Clone, Copy)]
pub struct Var {
    val: f64,
    idx: u32,
    gen: u32,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.idx == CONST {
            write!(f, "Var(const {})", self.val)
        } else {
            write!(f, "Var(#{} = {})", self.idx, self.val)
        }
    }
}

impl Tape {
    /// Clears the thread's tape and opens a new generation.
    #[allow(clippy::new_without_default)]
    pub fn new() -> Tape {
        let generation = TAPE.with(|t| {
            let mut t = t.borrow_mut();
            t.generation = t.generation.wrapping_add(1);
            if t.generation == 0 {
                t.generation = 1;
            }
            t.offsets.clear();
            t.offsets.push(0);
            t.edges.clear();
            t.error = None;
            t.generation
        });
        Tape {
            generation,
            _local: PhantomData,
        }
    }

    fn check_current(&self) -> Result<()> {
        let gen = TAPE.with(|t| t.borrow().generation);
        if gen == self.generation {
            Ok(())
        } else {
            Err(Error::StaleTape)
        }
    }

    /// A new independent variable.
    pub fn var(&self, value: f64) -> Var {
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let idx = (t.offsets.len() - 1) as u32;
            let end = t.edges.len() as u32;
            t.offsets.push(end);
            Var {
                val: value,
                idx,
                gen: t.generation,
            }
        })
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        TAPE.with(|t| t.borrow().offsets.len().saturating_sub(1))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adjoints of every node with respect to `output` in one reverse sweep.
    pub fn adjoints(&self, output: Var) -> Result<Vec<f64>> {
        self.check_current()?;
        TAPE.with(|t| {
            let t = t.borrow();
            if let Some(e) = &t.error {
                return Err(e.clone());
            }
            let n = t.offsets.len() - 1;
            let mut adj = vec![0.0; n];
            if output.idx == CONST {
                return Ok(adj);
            }
            if output.gen != t.generation {
                return Err(Error::StaleTape);
            }
            adj[output.idx as usize] = 1.0;
            for node in (0..=output.idx as usize).rev() {
                let a = adj[node];
                if a == 0.0 {
                    continue;
                }
                let (lo, hi) = (t.offsets[node] as usize, t.offsets[node + 1] as usize);
                for &(parent, partial) in &t.edges[lo..hi] {
                    adj[parent as usize] += a * partial;
                }
            }
            Ok(adj)
        })
    }

    /// Gradient of `output` with respect to `wrt`.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Vec<f64>> {
        let adj = self.adjoints(output)?;
        wrt.iter()
            .map(|v| {
                if v.idx == CONST {
                    Ok(0.0)
                } else if v.gen != self.generation {
                    Err(Error::StaleTape)
                } else {
                    Ok(adj[v.idx as usize])
                }
            })
            .collect()
    }

    /// Reads adjoints for `wrt` out of a precomputed adjoint vector.
    pub fn select(adjoints: &[f64], wrt: &[Var]) -> Vec<f64> {
        wrt.iter()
            .map(|v| {
                if v.idx == CONST {
                    0.0
                } else {
                    adjoints[v.idx as usize]
                }
            })
            .collect()
    }
}

/// Value and gradient of `f` at `at`, using a fresh tape.
pub fn gradient<F>(f: F, at: &[f64]) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&[Var]) -> Var,
{
    let tape = Tape::new();
    let xs = tape.vars(at);
    let y = f(&xs);
    let g = tape.gradient(y, &xs)?;
    Ok((y.val, g))
}

impl Var {
    pub fn constant(value: f64) -> Var {
        Var {
            val: value,
            idx: CONST,
            gen: 0,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.idx == CONST
    }

    #[inline]
    fn record(val: f64, parents: &[(Var, f64)]) -> Var {
        if parents.iter().all(|(p, _)| p.idx == CONST) {
            return Var::constant(val);
        }
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let gen = t.generation;
            for (p, partial) in parents {
                if p.idx == CONST {
                    continue;
                }
                if p.gen != gen {
                    t.record_error(Error::StaleTape);
                    continue;
                }
                t.edges.push((p.idx, *partial));
            }
            let idx = (t.offsets.len() - 1) as u32;
            let end = t.edges.len() as u32;
            t.offsets.push(end);
            Var { val, idx, gen }
        })
    }

    fn domain_error(op: &'static str, operand: f64) {
        TAPE.with(|t| {
            t.borrow_mut()
                .record_error(Error::NumericDomain { op, operand })
        });
    }
}

impl Add for Var {
    type Output = Var;
    #[inline]
    fn add(self, rhs: Var) -> Var {
        if self.is_const_zero() {
            return rhs;
        }
        if rhs.is_const_zero() {
            return self;
        }
        Var::record(self.val + rhs.val, &[(self, 1.0), (rhs, 1.0)])
    }
}

impl Sub for Var {
    type Output = Var;
    #[inline]
    fn sub(self, rhs: Var) -> Var {
        if rhs.is_const_zero() {
            return self;
        }
        Var::record(self.val - rhs.val, &[(self, 1.0), (rhs, -1.0)])
    }
}

impl Mul for Var {
    type Output = Var;
    #[inline]
    fn mul(self, rhs: Var) -> Var {
        if self.is_const_zero() || rhs.is_const_zero() {
            return Var::constant(self.val * rhs.val);
        }
        Var::record(self.val * rhs.val, &[(self, rhs.val), (rhs, self.val)])
    }
}

impl Div for Var {
    type Output = Var;
    #[inline]
    fn div(self, rhs: Var) -> Var {
        if rhs.val == 0.0 {
            Var::domain_error("div", rhs.val);
        }
        let inv = 1.0 / rhs.val;
        let q = self.val / rhs.val;
        Var::record(q, &[(self, inv), (rhs, -q * inv)])
    }
}

impl Neg for Var {
    type Output = Var;
    #[inline]
    fn neg(self) -> Var {
        Var::record(-self.val, &[(self, -1.0)])
    }
}

impl Scalar for Var {
    #[inline]
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }
    #[inline]
    fn value(&self) -> f64 {
        self.val
    }
    #[inline]
    fn is_const_zero(&self) -> bool {
        self.idx == CONST && self.val == 0.0
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        Var::record(e, &[(self, e)])
    }
    fn ln(self) -> Self {
        if self.val <= 0.0 {
            Var::domain_error("ln", self.val);
        }
        Var::record(self.val.ln(), &[(self, 1.0 / self.val)])
    }
    fn sin(self) -> Self {
        Var::record(self.val.sin(), &[(self, self.val.cos())])
    }
    fn cos(self) -> Self {
        Var::record(self.val.cos(), &[(self, -self.val.sin())])
    }
    fn sqrt(self) -> Self {
        if self.val < 0.0 {
            Var::domain_error("sqrt", self.val);
        }
        let s = self.val.sqrt();
        Var::record(s, &[(self, 0.5 / s)])
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        Var::record(t, &[(self, 1.0 - t * t)])
    }
    fn powi(self, n: i32) -> Self {
        let d = if n == 0 {
            0.0
        } else {
            n as f64 * self.val.powi(n - 1)
        };
        Var::record(self.val.powi(n), &[(self, d)])
    }

    fn affine_dot(w: &[Self], x: &[Self], b: Self) -> Self {
        debug_assert_eq!(w.len(), x.len());
        let mut acc = 0.0;
        for (wi, xi) in w.iter().zip(x) {
            acc += wi.val * xi.val;
        }
        let val = acc + b.val;
        let mut parents = Vec::with_capacity(2 * w.len() + 1);
        for (wi, xi) in w.iter().zip(x) {
            parents.push((*wi, xi.val));
            parents.push((*xi, wi.val));
        }
        parents.push((b, 1.0));
        Var::record(val, &parents)
    }
}
