//! Mapping unconstrained network outputs to valid spline parameters.
//!
//! On the unit interval the knots come from a softmax over spacing logits
//! with an `eps_t` floor, cumulatively summed so that `t_r = 0` and
//! `t_s = 1`; the coefficients are built the same way and then shifted and
//! scaled so that `f(0) = 0` and `f(1) = 1`. On the circle the spacing
//! logits are tied so that both sequences are periodic:
//! `t_{s+j} = 1 + t_{r+j}` and `α_{s-i} = 1 + α_{r-i}`, which makes every
//! derivative up to order `k-2` agree at the two ends.

use crate::autodiff::{softmax, Scalar};
use crate::bspline::{KnotVector, SplineParams, MAX_ORDER};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Interval,
    Circle,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Interval => "interval",
            Domain::Circle => "circle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "interval" => Some(Domain::Interval),
            "circle" => Some(Domain::Circle),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamGenConfig {
    pub k: usize,
    pub r: i64,
    pub s: i64,
    pub eps_t: f64,
    pub eps_alpha: f64,
    pub domain: Domain,
}

impl ParamGenConfig {
    /// `r = 0`, `s = bins`, equal floors for knots and coefficients.
    pub fn new(k: usize, bins: usize, eps: f64, domain: Domain) -> Self {
        ParamGenConfig {
            k,
            r: 0,
            s: bins as i64,
            eps_t: eps,
            eps_alpha: eps,
            domain,
        }
    }

    pub fn bins(&self) -> usize {
        (self.s - self.r) as usize
    }

    /// Number of knot-spacing logits, `s - r + 2k - 4`.
    pub fn n_dt(&self) -> usize {
        self.bins() + 2 * self.k - 4
    }

    /// Number of coefficient-spacing logits, `s - r + k - 2`.
    pub fn n_da(&self) -> usize {
        self.bins() + self.k - 2
    }

    pub fn n_logits(&self) -> usize {
        self.n_dt() + self.n_da()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 3 || self.k > MAX_ORDER {
            return Err(Error::UnsupportedOrder(self.k));
        }
        if self.s < self.r + self.k as i64 {
            return Err(Error::Argument(format!(
                "need s >= r + k (r={}, s={}, k={})",
                self.r, self.s, self.k
            )));
        }
        if !(self.eps_t > 0.0 && self.eps_t * (self.n_dt() as f64) < 1.0) {
            return Err(Error::Argument(format!(
                "eps_t = {} must be positive with eps_t * {} < 1",
                self.eps_t,
                self.n_dt()
            )));
        }
        if !(self.eps_alpha > 0.0 && self.eps_alpha * (self.n_da() as f64) < 1.0) {
            return Err(Error::Argument(format!(
                "eps_alpha = {} must be positive with eps_alpha * {} < 1",
                self.eps_alpha,
                self.n_da()
            )));
        }
        Ok(())
    }
}

/// Unconstrained spacing logits: `dt` for knot indices `r-k+2 … s+k-3`,
/// `da` for coefficient indices `r-k+1 … s-2`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawLogits<S = f64> {
    pub dt: Vec<S>,
    pub da: Vec<S>,
}

impl<S: Scalar> RawLogits<S> {
    pub fn zeros(cfg: &ParamGenConfig) -> Self {
        RawLogits {
            dt: vec![S::zero(); cfg.n_dt()],
            da: vec![S::zero(); cfg.n_da()],
        }
    }

    /// Splits a flat conditioner output `[dt…, da…]`.
    pub fn from_flat(flat: &[S], cfg: &ParamGenConfig) -> Result<Self> {
        if flat.len() != cfg.n_logits() {
            return Err(Error::Argument(format!(
                "expected {} logits, got {}",
                cfg.n_logits(),
                flat.len()
            )));
        }
        let (dt, da) = flat.split_at(cfg.n_dt());
        Ok(RawLogits {
            dt: dt.to_vec(),
            da: da.to_vec(),
        })
    }

    fn check(&self, cfg: &ParamGenConfig) -> Result<()> {
        if self.dt.len() != cfg.n_dt() || self.da.len() != cfg.n_da() {
            return Err(Error::Argument(format!(
                "logit lengths ({}, {}) do not match config ({}, {})",
                self.dt.len(),
                self.da.len(),
                cfg.n_dt(),
                cfg.n_da()
            )));
        }
        if let Some(v) = self
            .dt
            .iter()
            .chain(&self.da)
            .find(|v| !v.value().is_finite())
        {
            return Err(Error::NumericDomain {
                op: "logit",
                operand: v.value(),
            });
        }
        Ok(())
    }
}

pub fn generate<S: Scalar>(raw: &RawLogits<S>, cfg: &ParamGenConfig) -> Result<SplineParams<S>> {
    match cfg.domain {
        Domain::Interval => generate_interval(raw, cfg),
        Domain::Circle => generate_circle(raw, cfg),
    }
}

/// Floored, renormalised knot spacings for indices `r-k+2 … s+k-3`.
fn knot_spacings<S: Scalar>(logits: &[S], cfg: &ParamGenConfig) -> Vec<S> {
    let n = cfg.n_dt();
    let floor = S::cst(cfg.eps_t);
    let keep = S::cst(1.0 - n as f64 * cfg.eps_t);
    let dt: Vec<S> = softmax(logits)
        .into_iter()
        .map(|p| floor + keep * p)
        .collect();
    // interior spacings t_r … t_{s-1} start at position k - 2
    let first = cfg.k - 2;
    let mut total = S::zero();
    for &d in &dt[first..first + cfg.bins()] {
        total = total + d;
    }
    dt.into_iter().map(|d| d / total).collect()
}

/// Cumulative coefficients `α̃_{r-k+1} = 0 … α̃_{s-1} = 1`.
fn coefficient_ramp<S: Scalar>(logits: &[S], cfg: &ParamGenConfig) -> Vec<S> {
    let n = cfg.n_da();
    let floor = S::cst(cfg.eps_alpha);
    let keep = S::cst(1.0 - n as f64 * cfg.eps_alpha);
    let da: Vec<S> = softmax(logits)
        .into_iter()
        .map(|p| floor + keep * p)
        .collect();
    let mut ramp = Vec::with_capacity(n + 1);
    let mut acc = S::zero();
    ramp.push(acc);
    for &d in &da[..n - 1] {
        acc = acc + d;
        ramp.push(acc);
    }
    ramp.push(S::one());
    ramp
}

/// Shifts and scales `α̃` so that the spline maps `t_r ↦ 0` and `t_s ↦ 1`.
fn normalise<S: Scalar>(knots: KnotVector<S>, ramp: Vec<S>, cfg: &ParamGenConfig) -> Result<SplineParams<S>> {
    let tilde = SplineParams::new(knots, ramp)?;
    let f_r = tilde.eval_in_bin(cfg.r, tilde.t(cfg.r));
    let f_s = tilde.eval_in_bin(cfg.s - 1, tilde.t(cfg.s));
    let span = f_s - f_r;
    let alpha = tilde.alpha().iter().map(|&a| (a - f_r) / span).collect();
    SplineParams::new(tilde.knots().clone(), alpha)
}

pub fn generate_interval<S: Scalar>(raw: &RawLogits<S>, cfg: &ParamGenConfig) -> Result<SplineParams<S>> {
    cfg.validate()?;
    raw.check(cfg)?;
    let k = cfg.k;
    let bins = cfg.bins();
    let dt = knot_spacings(&raw.dt, cfg);

    // stored positions: t_{r-k+1} at 0, t_r at k-1, t_s at k-1+bins
    let n = bins + 2 * k - 1;
    let at_r = k - 1;
    // spacing Δt_j lives at dt[j - (r-k+2)] = dt[pos(j) - 1]
    let spacing = |pos: usize| dt[pos - 1];
    let mut t = vec![S::zero(); n];
    for pos in at_r + 1..at_r + bins {
        t[pos] = t[pos - 1] + spacing(pos - 1);
    }
    t[at_r + bins] = S::one();
    for pos in at_r + bins + 1..n - 1 {
        t[pos] = t[pos - 1] + spacing(pos - 1);
    }
    for pos in (1..at_r).rev() {
        t[pos] = t[pos + 1] - spacing(pos);
    }
    t[0] = t[1] - spacing(1);
    t[n - 1] = t[n - 2] + spacing(n - 3);

    let knots = KnotVector::new(k, cfg.r, cfg.s, t)?;
    normalise(knots, coefficient_ramp(&raw.da, cfg), cfg)
}

pub fn generate_circle<S: Scalar>(raw: &RawLogits<S>, cfg: &ParamGenConfig) -> Result<SplineParams<S>> {
    cfg.validate()?;
    raw.check(cfg)?;
    let k = cfg.k;
    let bins = cfg.bins();

    // tie pad spacings to the interior spacings at the opposite end
    let mut dt_logits = raw.dt.clone();
    let first = k - 2;
    for m in 1..=k - 2 {
        dt_logits[first - m] = raw.dt[first + bins - m];
        dt_logits[first + bins + m - 1] = raw.dt[first + m - 1];
    }
    let dt = knot_spacings(&dt_logits, cfg);

    let n = bins + 2 * k - 1;
    let at_r = k - 1;
    let at_s = at_r + bins;
    let mut t = vec![S::zero(); n];
    for pos in at_r + 1..at_s {
        t[pos] = t[pos - 1] + dt[pos - 2];
    }
    t[at_s] = S::one();
    let one = S::one();
    for m in 1..k {
        t[at_r - m] = t[at_s - m] - one;
        t[at_s - m] = one + t[at_r - m];
    }
    for m in 1..k {
        t[at_s + m] = one + t[at_r + m];
    }
    let knots = KnotVector::new(k, cfg.r, cfg.s, t)?;

    // Δα̃_{s-i} = Δα̃_{r-i} for i = 2 … k-1
    let mut da_logits = raw.da.clone();
    let n_da = cfg.n_da();
    for i in 2..k {
        // index r-i sits at position k-1-i, index s-i at n_da - i + 1
        da_logits[n_da + 1 - i] = raw.da[k - 1 - i];
    }
    let params = normalise(knots, coefficient_ramp(&da_logits, cfg), cfg)?;

    let mut alpha = params.alpha().to_vec();
    let len = alpha.len();
    for i in 1..k {
        // α_{r-i} at position k-1-i, α_{s-i} at len - i
        alpha[len - i] = one + alpha[k - 1 - i];
    }
    SplineParams::new(params.knots().clone(), alpha)
}

/// Outcome of the bi-Lipschitz sufficient-condition check.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionReport {
    pub pass: bool,
    /// Indices `j` whose scaled coefficient slope falls outside `(l, u)`.
    pub violations: Vec<i64>,
}

/// `(α_j - α_{j-1}) / (t_{j+k-1} - t_j)` for `j = r-k+2 … s-1`.
pub fn coefficient_slopes(p: &SplineParams<f64>) -> Vec<(i64, f64)> {
    let k = p.order() as i64;
    (p.r() - k + 2..p.s())
        .map(|j| (j, (p.a(j) - p.a(j - 1)) / (p.t(j + k - 1) - p.t(j))))
        .collect()
}

/// Checks `l/(k-1) < (α_j - α_{j-1})/(t_{j+k-1} - t_j) < u/(k-1)` for every
/// `j`; passing guarantees `l < f' < u` on the whole domain.
pub fn check_sufficient_condition(p: &SplineParams<f64>, l: f64, u: f64) -> ConditionReport {
    let km1 = (p.order() - 1) as f64;
    let (lo, hi) = (l / km1, u / km1);
    let violations: Vec<i64> = coefficient_slopes(p)
        .into_iter()
        .filter(|&(_, q)| !(q > lo && q < hi))
        .map(|(j, _)| j)
        .collect();
    ConditionReport {
        pass: violations.is_empty(),
        violations,
    }
}

/// Closed bounds `(k-1)·min slope` and `(k-1)·max slope`; any strictly wider
/// pair passes [`check_sufficient_condition`].
pub fn implied_bounds(p: &SplineParams<f64>) -> (f64, f64) {
    let km1 = (p.order() - 1) as f64;
    let (mn, mx) = coefficient_slopes(p)
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (_, q)| {
            (a.min(q), b.max(q))
        });
    (km1 * mn, km1 * mx)
}

#[cfg(test)]
mod tests;
