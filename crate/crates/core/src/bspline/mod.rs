//! Non-uniform B-spline transforms.
//!
//! A transform of order `k` is `f(x) = Σ_j α_j B_{j,k}(x)` on `[t_r, t_s]`,
//! with knots `t_{r-k+1} … t_{s+k-1}` and coefficients `α_{r-k+1} … α_{s-1}`.
//! Both sequences are stored from index `r-k+1` upward, so one offset maps a
//! spline index to a vector position.
//!
//! Bins are half-open `[t_j, t_{j+1})` except the last, which also contains
//! `t_s`; evaluating at `t_s` therefore gives the left limit.

mod cubic;

pub use cubic::{solve_monotone_cubic, CubicSegment};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};

/// Largest supported order. The per-bin basis is computed in fixed-size
/// arrays of this length.
pub const MAX_ORDER: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct KnotVector<S = f64> {
    k: usize,
    r: i64,
    s: i64,
    values: Vec<S>,
}

impl<S: Scalar> KnotVector<S> {
    pub fn new(k: usize, r: i64, s: i64, values: Vec<S>) -> Result<Self> {
        if k == 0 || k > MAX_ORDER {
            return Err(Error::UnsupportedOrder(k));
        }
        if s <= r {
            return Err(Error::Argument(format!("need s > r, got r={r}, s={s}")));
        }
        let expected = (s - r) as usize + 2 * k - 1;
        if values.len() != expected {
            return Err(Error::Argument(format!(
                "knot vector for k={k}, r={r}, s={s} needs {expected} entries, got {}",
                values.len()
            )));
        }
        if let Some(w) = values.windows(2).position(|w| w[1].value() <= w[0].value()) {
            return Err(Error::Argument(format!(
                "knots must be strictly increasing (t_{} = {} >= t_{} = {})",
                r - k as i64 + 1 + w as i64,
                values[w].value(),
                r - k as i64 + 2 + w as i64,
                values[w + 1].value()
            )));
        }
        Ok(KnotVector { k, r, s, values })
    }

    pub fn order(&self) -> usize {
        self.k
    }

    pub fn first_index(&self) -> i64 {
        self.r - self.k as i64 + 1
    }

    pub fn last_index(&self) -> i64 {
        self.s + self.k as i64 - 1
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    /// `t_j`; callers guarantee `j` is stored.
    #[inline]
    pub fn at(&self, j: i64) -> S {
        self.values[(j - self.first_index()) as usize]
    }

    pub fn get(&self, j: i64) -> Result<S> {
        if j < self.first_index() || j > self.last_index() {
            return Err(Error::Range {
                index: j,
                lo: self.first_index(),
                hi: self.last_index(),
            });
        }
        Ok(self.at(j))
    }
}

/// `B_{j,k,t}(x)` straight from the Cox–de Boor recursion with half-open
/// indicator functions at order one.
pub fn eval_basis(j: i64, k: usize, t: &KnotVector<f64>, x: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::UnsupportedOrder(0));
    }
    t.get(j)?;
    t.get(j + k as i64)?;
    Ok(cox_de_boor(j, k, t, x))
}

fn cox_de_boor(j: i64, k: usize, t: &KnotVector<f64>, x: f64) -> f64 {
    if k == 1 {
        return if t.at(j) <= x && x < t.at(j + 1) {
            1.0
        } else {
            0.0
        };
    }
    let km1 = k as i64 - 1;
    let left = (x - t.at(j)) / (t.at(j + km1) - t.at(j));
    let right = (t.at(j + k as i64) - x) / (t.at(j + k as i64) - t.at(j + 1));
    left * cox_de_boor(j, k - 1, t, x) + right * cox_de_boor(j + 1, k - 1, t, x)
}

/// Coefficients of `D^m f` in the order `k - m` basis.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivedCoeffs<S = f64> {
    pub m: usize,
    /// Spline index of `coeffs[0]`.
    pub first: i64,
    pub coeffs: Vec<S>,
}

impl<S: Scalar> DerivedCoeffs<S> {
    #[inline]
    pub fn at(&self, j: i64) -> S {
        self.coeffs[(j - self.first) as usize]
    }
}

/// Analytic or numeric origin of an inverse.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InverseMethod {
    Linear,
    Quadratic,
    Cubic,
    /// Safeguarded Newton–bisection, used for `k >= 5`.
    NewtonBisection,
}

impl InverseMethod {
    pub fn is_analytic(self) -> bool {
        !matches!(self, InverseMethod::NewtonBisection)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Inverse {
    pub x: f64,
    pub bin: i64,
    pub method: InverseMethod,
}

/// Knots and coefficients of one spline transform.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineParams<S = f64> {
    knots: KnotVector<S>,
    alpha: Vec<S>,
}

impl<S: Scalar> SplineParams<S> {
    pub fn new(knots: KnotVector<S>, alpha: Vec<S>) -> Result<Self> {
        let expected = (knots.s - knots.r) as usize + knots.k - 1;
        if alpha.len() != expected {
            return Err(Error::Argument(format!(
                "coefficient vector needs {expected} entries, got {}",
                alpha.len()
            )));
        }
        Ok(SplineParams { knots, alpha })
    }

    pub fn knots(&self) -> &KnotVector<S> {
        &self.knots
    }

    pub fn alpha(&self) -> &[S] {
        &self.alpha
    }

    pub fn order(&self) -> usize {
        self.knots.k
    }

    pub fn r(&self) -> i64 {
        self.knots.r
    }

    pub fn s(&self) -> i64 {
        self.knots.s
    }

    #[inline]
    pub fn t(&self, j: i64) -> S {
        self.knots.at(j)
    }

    #[inline]
    pub fn a(&self, j: i64) -> S {
        self.alpha[(j - self.knots.first_index()) as usize]
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.t(self.r()).value(), self.t(self.s()).value())
    }

    pub fn is_monotone(&self) -> bool {
        self.alpha.windows(2).all(|w| w[1].value() > w[0].value())
    }

    fn check_domain(&self, x: f64) -> Result<()> {
        let (lo, hi) = self.domain();
        if x >= lo && x <= hi {
            Ok(())
        } else {
            Err(Error::Domain { value: x, lo, hi })
        }
    }

    /// Bin `j ∈ [r, s-1]` with `t_j <= x < t_{j+1}`; `x = t_s` maps to `s-1`.
    /// Values outside the domain are clamped to the end bins.
    pub fn locate(&self, x: f64) -> i64 {
        let (r, s) = (self.r(), self.s());
        let (mut lo, mut hi) = (r, s - 1);
        if x < self.t(r + 1).value() {
            return r;
        }
        if x >= self.t(s - 1).value() {
            return s - 1;
        }
        // invariant: t_lo <= x < t_{hi+1}
        while lo < hi {
            let mid = (lo + hi + 1) / 2;
            if self.t(mid).value() <= x {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo
    }

    /// Values of the `order` basis functions that can be nonzero on bin `j`,
    /// `B_{j-order+1, order}(x) … B_{j, order}(x)`, in that order.
    pub fn basis_in_bin(&self, order: usize, j: i64, x: S) -> [S; MAX_ORDER] {
        let mut b = [S::zero(); MAX_ORDER];
        b[0] = S::one();
        for q in 2..=order {
            let mut next = [S::zero(); MAX_ORDER];
            for i in 0..q - 1 {
                let idx = j - q as i64 + 2 + i as i64;
                let left = self.t(idx);
                let right = self.t(idx + q as i64 - 1);
                let w = (x - left) / (right - left);
                next[i + 1] = next[i + 1] + w * b[i];
                next[i] = next[i] + (S::one() - w) * b[i];
            }
            b = next;
        }
        b
    }

    /// `f(x)` using the polynomial piece of bin `j` (no domain check); used
    /// for one-sided limits at knots.
    pub fn eval_in_bin(&self, j: i64, x: S) -> S {
        let k = self.order();
        let b = self.basis_in_bin(k, j, x);
        let mut acc = S::zero();
        for (p, bp) in b.iter().take(k).enumerate() {
            acc = acc + self.a(j - k as i64 + 1 + p as i64) * *bp;
        }
        acc
    }

    pub fn eval(&self, x: S) -> Result<S> {
        self.check_domain(x.value())?;
        Ok(self.eval_in_bin(self.locate(x.value()), x))
    }

    /// All coefficients of `D^m f` by `m` rounds of the divided-difference
    /// recursion.
    pub fn derivative_coeffs(&self, m: usize) -> Result<DerivedCoeffs<S>> {
        let k = self.order();
        if m + 2 > k {
            return Err(Error::Argument(format!(
                "derivative coefficients exist for m in 0..={}, got {m}",
                k.saturating_sub(2)
            )));
        }
        let mut first = self.knots.first_index();
        let mut coeffs = self.alpha.clone();
        for level in 1..=m {
            let order = (k - level + 1) as i64;
            let scale = S::cst((order - 1) as f64);
            let next: Vec<S> = (1..coeffs.len())
                .map(|p| {
                    let j = first + p as i64;
                    scale * (coeffs[p] - coeffs[p - 1]) / (self.t(j + order - 1) - self.t(j))
                })
                .collect();
            coeffs = next;
            first += 1;
        }
        Ok(DerivedCoeffs { m, first, coeffs })
    }

    /// `D^m f(x)` from the polynomial piece of bin `j`, `0 <= m <= k-1`.
    pub fn derivative_in_bin(&self, j: i64, x: S, m: usize) -> S {
        let k = self.order();
        debug_assert!(m < k);
        let mut local = [S::zero(); MAX_ORDER];
        let base = j - k as i64 + 1;
        for (p, v) in local.iter_mut().take(k).enumerate() {
            *v = self.a(base + p as i64);
        }
        // after `level` rounds, local[p] holds the coefficient of index base + level + p
        for level in 1..=m {
            let order = (k - level + 1) as i64;
            let scale = S::cst((order - 1) as f64);
            let count = k - level;
            for p in (0..count).rev() {
                let idx = base + level as i64 + p as i64;
                local[p + 1] = scale * (local[p + 1] - local[p])
                    / (self.t(idx + order - 1) - self.t(idx));
            }
            local.copy_within(1..=count, 0);
        }
        let order = k - m;
        let b = self.basis_in_bin(order, j, x);
        let mut acc = S::zero();
        for p in 0..order {
            acc = acc + local[p] * b[p];
        }
        acc
    }

    pub fn eval_derivative(&self, x: S, m: usize) -> Result<S> {
        if m >= self.order() {
            return Err(Error::Argument(format!(
                "derivative order must be below k = {}, got {m}",
                self.order()
            )));
        }
        self.check_domain(x.value())?;
        Ok(self.derivative_in_bin(self.locate(x.value()), x, m))
    }
}

/// Images within `IMAGE_SLACK` of `[0, 1]` are rounding residue of `eval`
/// at the end knots and snap to the boundary; anything further out is an error.
const IMAGE_SLACK: f64 = 4.0 * f64::EPSILON;

fn snap_image(y: f64) -> Result<f64> {
    if (-IMAGE_SLACK..=1.0 + IMAGE_SLACK).contains(&y) {
        Ok(y.clamp(0.0, 1.0))
    } else {
        Err(Error::Domain {
            value: y,
            lo: 0.0,
            hi: 1.0,
        })
    }
}

impl SplineParams<f64> {
    /// Coefficients at the knot averages, which reproduce `f(x) = x`.
    pub fn identity(knots: KnotVector<f64>) -> Result<Self> {
        let k = knots.k as i64;
        let alpha = (knots.first_index()..knots.s)
            .map(|j| {
                if k == 1 {
                    knots.at(j)
                } else {
                    (1..k).map(|i| knots.at(j + i)).sum::<f64>() / (k - 1) as f64
                }
            })
            .collect();
        SplineParams::new(knots, alpha)
    }

    /// `f(t_j)` for `j ∈ [r, s]`.
    pub fn knot_image(&self, j: i64) -> f64 {
        if j >= self.s() {
            self.eval_in_bin(self.s() - 1, self.t(self.s()))
        } else {
            self.eval_in_bin(j, self.t(j))
        }
    }

    /// Bin containing the preimage of `y`: the largest `j ∈ [r, s-1]` with
    /// `f(t_j) <= y`, found by binary search over the sorted knot images.
    pub fn find_bin(&self, y: f64) -> Result<i64> {
        let y = snap_image(y)?;
        let (mut lo, mut hi) = (self.r(), self.s() - 1);
        while lo < hi {
            let mid = (lo + hi + 1) / 2;
            if self.knot_image(mid) <= y {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        Ok(lo)
    }

    /// Exact power-basis form of the cubic piece on bin `j`.
    pub fn to_power_basis(&self, j: i64) -> Result<CubicSegment> {
        if self.order() != 4 {
            return Err(Error::UnsupportedOrder(self.order()));
        }
        self.local_polynomial(j)
    }

    fn local_polynomial(&self, j: i64) -> Result<CubicSegment> {
        if j < self.r() || j >= self.s() {
            return Err(Error::Range {
                index: j,
                lo: self.r(),
                hi: self.s() - 1,
            });
        }
        let k = self.order();
        let origin = self.t(j);
        let mut c = [0.0; 4];
        let mut factorial = 1.0;
        for (m, cm) in c.iter_mut().enumerate().take(k.min(4)) {
            if m > 0 {
                factorial *= m as f64;
            }
            *cm = self.derivative_in_bin(j, origin, m) / factorial;
        }
        Ok(CubicSegment {
            bin: j,
            origin,
            width: self.t(j + 1) - origin,
            c,
        })
    }

    pub fn invert(&self, y: f64) -> Result<f64> {
        self.invert_detailed(y).map(|inv| inv.x)
    }

    /// `f^{-1}(y)`, closed form for `k <= 4`.
    pub fn invert_detailed(&self, y: f64) -> Result<Inverse> {
        let y = snap_image(y)?;
        let j = self.find_bin(y)?;
        let k = self.order();
        if k <= 4 {
            let seg = self.local_polynomial(j)?;
            let h = solve_monotone_cubic(&seg, y, 0.0, seg.width)?;
            let method = match k {
                1 | 2 => InverseMethod::Linear,
                3 => InverseMethod::Quadratic,
                _ => InverseMethod::Cubic,
            };
            Ok(Inverse {
                x: (seg.origin + h).min(self.t(j + 1)),
                bin: j,
                method,
            })
        } else {
            let x = self.newton_bisection(j, y)?;
            Ok(Inverse {
                x,
                bin: j,
                method: InverseMethod::NewtonBisection,
            })
        }
    }

    fn newton_bisection(&self, j: i64, y: f64) -> Result<f64> {
        let (mut lo, mut hi) = (self.t(j), self.t(j + 1));
        let g = |x: f64| self.eval_in_bin(j, x) - y;
        let (glo, ghi) = (g(lo), g(hi));
        if glo >= 0.0 {
            return Ok(lo);
        }
        if ghi <= 0.0 {
            return Ok(hi);
        }
        let mut x = 0.5 * (lo + hi);
        for _ in 0..200 {
            let gx = g(x);
            if gx == 0.0 {
                return Ok(x);
            }
            if gx < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let slope = self.derivative_in_bin(j, x, 1);
            let newton = x - gx / slope;
            x = if slope > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= 4.0 * f64::EPSILON * hi.abs().max(1.0) {
                return Ok(x);
            }
        }
        if (hi - lo).is_finite() {
            Ok(x)
        } else {
            Err(Error::Inversion { bin: j, y })
        }
    }
}
