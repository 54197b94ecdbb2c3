//! Two-dimensional ring densities and Metropolis–Hastings sampling.
//!
//! Both targets are mixtures `Σ_i A_i exp(-(ρ(x) - R_i)² / 2σ²)`. For the
//! rings kind `ρ(x) = ‖x‖`; for the periodic kind
//! `ρ(x) = sqrt(cos(x_1²) + cos(x_2²) + 2)` on the square `[-π, π]²` with both
//! coordinates wrapped.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::flow::BoundingBox;
use crate::params::Domain;

/// Below this value of `ρ` the force is undefined.
const SINGULAR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    Rings,
    PeriodicRings,
}

impl TargetKind {
    pub fn name(self) -> &'static str {
        match self {
            TargetKind::Rings => "rings",
            TargetKind::PeriodicRings => "periodic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rings" => Some(TargetKind::Rings),
            "periodic" | "periodic_rings" => Some(TargetKind::PeriodicRings),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTarget {
    pub kind: TargetKind,
    pub amplitudes: [f64; 4],
    pub radii: [f64; 4],
    pub sigma: f64,
}

impl ToyTarget {
    pub const AMPLITUDES: [f64; 4] = [1.0, 0.8, 0.6, 0.4];
    pub const RADII: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

    pub fn new(kind: TargetKind, amplitudes: [f64; 4], radii: [f64; 4], sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Argument(format!("sigma must be positive, got {sigma}")));
        }
        if amplitudes.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::Argument(format!("amplitudes must be positive, got {amplitudes:?}")));
        }
        if radii.iter().any(|r| !r.is_finite()) {
            return Err(Error::Argument(format!("radii must be finite, got {radii:?}")));
        }
        Ok(ToyTarget {
            kind,
            amplitudes,
            radii,
            sigma,
        })
    }

    pub fn rings() -> Self {
        ToyTarget {
            kind: TargetKind::Rings,
            amplitudes: Self::AMPLITUDES,
            radii: Self::RADII,
            sigma: 0.06,
        }
    }

    pub fn periodic() -> Self {
        ToyTarget {
            kind: TargetKind::PeriodicRings,
            amplitudes: Self::AMPLITUDES,
            radii: Self::RADII,
            sigma: 0.05,
        }
    }

    pub fn by_kind(kind: TargetKind) -> Self {
        match kind {
            TargetKind::Rings => Self::rings(),
            TargetKind::PeriodicRings => Self::periodic(),
        }
    }

    pub fn dim(&self) -> usize {
        2
    }

    pub fn domains(&self) -> Vec<Domain> {
        match self.kind {
            TargetKind::Rings => vec![Domain::Interval; 2],
            TargetKind::PeriodicRings => vec![Domain::Circle; 2],
        }
    }

    /// Period of the circle coordinates.
    pub fn period(&self) -> (f64, f64) {
        (-PI, PI)
    }

    /// Radial coordinate `ρ(x)` and its gradient.
    fn radial(&self, x: &[f64]) -> (f64, [f64; 2]) {
        match self.kind {
            TargetKind::Rings => {
                let r = x[0].hypot(x[1]);
                (r, [x[0] / r, x[1] / r])
            }
            TargetKind::PeriodicRings => {
                let c = (x[0].powi(2).cos() + x[1].powi(2).cos() + 2.0).max(0.0).sqrt();
                // ∂c/∂x_j = -x_j sin(x_j²) / c
                (c, [-x[0] * x[0].powi(2).sin() / c, -x[1] * x[1].powi(2).sin() / c])
            }
        }
    }

    fn log_terms(&self, rho: f64) -> [f64; 4] {
        let s2 = 2.0 * self.sigma * self.sigma;
        std::array::from_fn(|i| self.amplitudes[i].ln() - (rho - self.radii[i]).powi(2) / s2)
    }

    /// `A_i exp(-(ρ(x) - R_i)² / 2σ²)` for a single ring.
    pub fn ring_term(&self, i: usize, x: &[f64]) -> f64 {
        self.log_terms(self.radial(x).0)[i].exp()
    }

    /// Log of the unnormalized mixture density.
    pub fn unnorm_logdensity(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.log_terms(self.radial(x).0))
    }

    /// `v(x) = -log p*(x)` up to a constant.
    pub fn energy(&self, x: &[f64]) -> f64 {
        -self.unnorm_logdensity(x)
    }

    /// `-∂v/∂x`, the gradient of [`ToyTarget::unnorm_logdensity`].
    pub fn target_force(&self, x: &[f64]) -> Result<[f64; 2]> {
        let (rho, drho) = self.radial(x);
        if rho < SINGULAR {
            return Err(Error::SingularPoint { norm: rho });
        }
        let t = self.log_terms(rho);
        let lse = log_sum_exp(&t);
        let s2 = self.sigma * self.sigma;
        let dlog_drho: f64 = (0..4).map(|i| (t[i] - lse).exp() * -(rho - self.radii[i]) / s2).sum();
        Ok([dlog_drho * drho[0], dlog_drho * drho[1]])
    }

    /// Starting point of a chain.
    fn initial_state<R: Rng>(&self, rng: &mut R) -> [f64; 2] {
        let half = match self.kind {
            TargetKind::Rings => self.radii.iter().fold(0.0f64, |a, r| a.max(r.abs())) + 3.0 * self.sigma,
            TargetKind::PeriodicRings => PI,
        };
        [rng.random_range(-half..half), rng.random_range(-half..half)]
    }

    fn wrap(&self, x: [f64; 2]) -> [f64; 2] {
        match self.kind {
            TargetKind::Rings => x,
            TargetKind::PeriodicRings => x.map(|v| v - 2.0 * PI * ((v + PI) / (2.0 * PI)).floor()),
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Metropolis acceptance probability of moving from `x` to `y`.
pub fn acceptance_probability(target: &ToyTarget, x: &[f64], y: &[f64]) -> f64 {
    (target.unnorm_logdensity(y) - target.unnorm_logdensity(x)).exp().min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MhConfig {
    pub chains: usize,
    pub burn_in: usize,
    /// Steps between retained states after burn-in.
    pub keep_every: usize,
    /// Retained states per chain.
    pub keeps: usize,
    pub step: f64,
}

impl Default for MhConfig {
    fn default() -> Self {
        MhConfig {
            chains: 10_000,
            burn_in: 1_000,
            keep_every: 1,
            keeps: 10,
            step: 0.1,
        }
    }
}

impl MhConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.keep_every == 0 || self.keeps == 0 {
            return Err(Error::Argument("chains, keep_every and keeps must be positive".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Argument(format!("step must be positive, got {}", self.step)));
        }
        Ok(())
    }
}

/// Positions drawn from a target, with everything needed to reproduce them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    /// `n × dim`, row-major.
    pub points: Vec<f64>,
    pub bbox: BoundingBox,
    pub seed: u64,
    pub target: ToyTarget,
    pub mh: MhConfig,
    /// Fraction of accepted proposals over all steps of all chains.
    pub acceptance: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

/// Runs `chains` independent random-walk Metropolis chains with isotropic
/// Gaussian proposals. Chain `c` draws from its own ChaCha stream, so the
/// output depends only on the seed and the configuration. Rows are ordered
/// chain by chain.
pub fn mh_generate(target: &ToyTarget, cfg: &MhConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut points = Vec::with_capacity(cfg.chains * cfg.keeps * 2);
    let mut accepted = 0usize;
    let steps_per_chain = cfg.burn_in + cfg.keeps * cfg.keep_every;
    for c in 0..cfg.chains {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let mut x = target.initial_state(&mut rng);
        let mut lp = target.unnorm_logdensity(&x);
        for step in 1..=steps_per_chain {
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            let y = target.wrap([x[0] + cfg.step * dx, x[1] + cfg.step * dy]);
            let lq = target.unnorm_logdensity(&y);
            let u: f64 = rng.random();
            if u.ln() < lq - lp {
                x = y;
                lp = lq;
                accepted += 1;
            }
            if step > cfg.burn_in && (step - cfg.burn_in) % cfg.keep_every == 0 {
                points.extend_from_slice(&x);
            }
        }
    }
    let bbox = BoundingBox::fit(&points, target.domains(), target.period())?;
    Ok(Dataset {
        dim: 2,
        points,
        bbox,
        seed,
        target: target.clone(),
        mh: *cfg,
        acceptance: accepted as f64 / (cfg.chains * steps_per_chain) as f64,
    })
}
