//! Closed-form inversion of one monotone polynomial segment.

use crate::error::{Error, Result};

/// Local power-basis form of a spline on one bin:
/// `f(x) = c[0] + c[1] h + c[2] h² + c[3] h³` with `h = x - origin`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CubicSegment {
    pub bin: i64,
    pub origin: f64,
    pub width: f64,
    pub c: [f64; 4],
}

impl CubicSegment {
    pub fn eval_local(&self, h: f64) -> f64 {
        let [c0, c1, c2, c3] = self.c;
        ((c3 * h + c2) * h + c1) * h + c0
    }

    pub fn slope_local(&self, h: f64) -> f64 {
        let [_, c1, c2, c3] = self.c;
        (3.0 * c3 * h + 2.0 * c2) * h + c1
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.eval_local(x - self.origin)
    }
}

const DEGENERATE: f64 = 1e-14;

/// Real roots of `a h² + b h + c` with the cancellation-free pairing.
fn quadratic_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        // a monotone segment can still land here through rounding at a
        // double root; keep the vertex as the candidate
        return vec![-b / (2.0 * a)];
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    if q == 0.0 {
        return vec![0.0];
    }
    vec![q / a, c / q]
}

/// Real roots of the monic cubic `h³ + a h² + b h + c`.
fn monic_cubic_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    let q = (a * a - 3.0 * b) / 9.0;
    let r = (2.0 * a * a * a - 9.0 * a * b + 27.0 * c) / 54.0;
    let shift = a / 3.0;
    let q3 = q * q * q;
    if r * r < q3 {
        // three real roots
        let theta = (r / q3.sqrt()).clamp(-1.0, 1.0).acos();
        let m = -2.0 * q.sqrt();
        let tau = std::f64::consts::TAU;
        vec![
            m * (theta / 3.0).cos() - shift,
            m * ((theta + tau) / 3.0).cos() - shift,
            m * ((theta - tau) / 3.0).cos() - shift,
        ]
    } else {
        let big = -r.signum() * (r.abs() + (r * r - q3).sqrt()).cbrt();
        let small = if big == 0.0 { 0.0 } else { q / big };
        vec![big + small - shift]
    }
}

/// The unique root of `seg(h) = y` for `h ∈ [lo, hi]`, where the segment is
/// strictly increasing on that range.
///
/// Uses the closed-form cubic (one-real-root / three-real-root branches),
/// dropping to the quadratic or linear formula when the leading coefficients
/// vanish relative to the largest one, then applies one Newton step clamped
/// to the range.
pub fn solve_monotone_cubic(seg: &CubicSegment, y: f64, lo: f64, hi: f64) -> Result<f64> {
    let [c0, c1, c2, c3] = seg.c;
    let d = c0 - y;
    let scale = seg.c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let fail = || Error::Inversion { bin: seg.bin, y };
    if !(scale.is_finite() && y.is_finite()) {
        return Err(fail());
    }

    let candidates = if c3.abs() <= DEGENERATE * scale {
        if c2.abs() <= DEGENERATE * scale {
            if c1 == 0.0 {
                return Err(fail());
            }
            vec![-d / c1]
        } else {
            quadratic_roots(c2, c1, d)
        }
    } else {
        monic_cubic_roots(c2 / c3, c1 / c3, d / c3)
    };

    let width = (hi - lo).abs();
    let distance = |h: f64| {
        if h < lo {
            lo - h
        } else if h > hi {
            h - hi
        } else {
            0.0
        }
    };
    let best = candidates
        .into_iter()
        .filter(|h| h.is_finite())
        .min_by(|a, b| distance(*a).total_cmp(&distance(*b)))
        .ok_or_else(fail)?;
    if distance(best) > 1e-3 * width + 1e-12 {
        return Err(fail());
    }

    let mut h = best.clamp(lo, hi);
    let slope = seg.slope_local(h);
    if slope > 0.0 {
        let step = (seg.eval_local(h) - y) / slope;
        if step.is_finite() {
            h = (h - step).clamp(lo, hi);
        }
    }
    Ok(h)
}
