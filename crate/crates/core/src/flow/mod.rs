//! Coupling flows on the unit hypercube / torus.
//!
//! Direction convention: [`CouplingLayer::forward`] evaluates the splines
//! and maps data `x` towards the uniform base variable `u`, so the density of
//! `x` is the sum of forward log-derivatives. Sampling runs the layers in
//! reverse through the analytic spline inverse.

mod engine;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Dual, Mlp, Scalar};
use crate::bspline::SplineParams;
use crate::error::{Error, Result};
use crate::params::{generate, Domain, ParamGenConfig, RawLogits};

pub use engine::{forces_batch, loss_and_grad, LossTerms};

/// Every transform input is clamped to `[CLIP, 1 - CLIP]`.
pub const CLIP: f64 = 1e-6;

/// Affine map between data coordinates and the flow domain. Interval
/// coordinates land in `[MARGIN, 1 - MARGIN]`; circle coordinates map one
/// period onto `[0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundingBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
    domains: Vec<Domain>,
}

impl BoundingBox {
    pub const MARGIN: f64 = 0.05;

    pub fn new(lo: Vec<f64>, hi: Vec<f64>, domains: Vec<Domain>) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != domains.len() || lo.is_empty() {
            return Err(Error::Argument("bounding box dimensions disagree".into()));
        }
        if let Some(i) = (0..lo.len()).find(|&i| !(lo[i].is_finite() && hi[i].is_finite() && hi[i] > lo[i])) {
            return Err(Error::Argument(format!(
                "bounding box coordinate {i}: need lo < hi, got [{}, {}]",
                lo[i], hi[i]
            )));
        }
        Ok(BoundingBox { lo, hi, domains })
    }

    /// The box whose map to the flow domain is the identity.
    pub fn identity(domains: Vec<Domain>) -> Self {
        let lo = domains
            .iter()
            .map(|d| match d {
                Domain::Interval => Self::MARGIN,
                Domain::Circle => 0.0,
            })
            .collect::<Vec<_>>();
        let hi = lo.iter().map(|l| 1.0 - l).collect();
        BoundingBox { lo, hi, domains }
    }

    /// Symmetric box `[-m, m]` on interval coordinates, `m = max |x_i|`;
    /// circle coordinates take the period `period`.
    pub fn fit(data: &[f64], domains: Vec<Domain>, period: (f64, f64)) -> Result<Self> {
        let dim = domains.len();
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::Argument("cannot fit a bounding box to empty data".into()));
        }
        let mut m: f64 = 0.0;
        for row in data.chunks_exact(dim) {
            for (v, d) in row.iter().zip(&domains) {
                if *d == Domain::Interval {
                    m = m.max(v.abs());
                }
            }
        }
        if m == 0.0 {
            m = 1.0;
        }
        let lo = domains.iter().map(|d| if *d == Domain::Interval { -m } else { period.0 }).collect();
        let hi = domains.iter().map(|d| if *d == Domain::Interval { m } else { period.1 }).collect();
        BoundingBox::new(lo, hi, domains)
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// `∂ y_i / ∂ x_i` of the map to flow coordinates.
    pub fn scale(&self, i: usize) -> f64 {
        let width = self.hi[i] - self.lo[i];
        match self.domains[i] {
            Domain::Interval => (1.0 - 2.0 * Self::MARGIN) / width,
            Domain::Circle => 1.0 / width,
        }
    }

    /// `log |det|` of the map to flow coordinates.
    pub fn log_jacobian(&self) -> f64 {
        (0..self.dim()).map(|i| self.scale(i).ln()).sum()
    }

    pub fn to_flow(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| match self.domains[i] {
                Domain::Interval => Self::MARGIN + (v - self.lo[i]) * self.scale(i),
                Domain::Circle => wrap((v - self.lo[i]) * self.scale(i)),
            })
            .collect()
    }

    pub fn from_flow(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(i, &v)| match self.domains[i] {
                Domain::Interval => self.lo[i] + (v - Self::MARGIN) / self.scale(i),
                Domain::Circle => self.lo[i] + v / self.scale(i),
            })
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().enumerate().all(|(i, &v)| match self.domains[i] {
            Domain::Interval => v >= self.lo[i] && v <= self.hi[i],
            Domain::Circle => v.is_finite(),
        })
    }
}

fn wrap(v: f64) -> f64 {
    let w = v - v.floor();
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Brings a transform input into `[CLIP, 1 - CLIP]`: interval inputs must
/// already lie in `[0, 1]`, circle inputs are first reduced modulo 1.
fn prepare<S: Scalar>(x: S, domain: Domain) -> Result<S> {
    let v = x.value();
    let x = match domain {
        Domain::Interval => {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain { value: v, lo: 0.0, hi: 1.0 });
            }
            x
        }
        Domain::Circle => {
            if !v.is_finite() {
                return Err(Error::Domain { value: v, lo: f64::NEG_INFINITY, hi: f64::INFINITY });
            }
            x - S::cst(v.floor())
        }
    };
    let v = x.value();
    Ok(if v < CLIP {
        S::cst(CLIP)
    } else if v > 1.0 - CLIP {
        S::cst(1.0 - CLIP)
    } else {
        x
    })
}

/// One coupling layer: coordinates in `transformed` go through splines whose
/// parameters the conditioner computes from the coordinates in `pass`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingLayer {
    pass: Vec<usize>,
    transformed: Vec<usize>,
    domains: Vec<Domain>,
    config: Vec<ParamGenConfig>,
    conditioner: Mlp,
}

impl CouplingLayer {
    pub fn new(
        pass: Vec<usize>,
        transformed: Vec<usize>,
        domains: Vec<Domain>,
        k: usize,
        bins: usize,
        eps: f64,
        conditioner: Mlp,
    ) -> Result<Self> {
        let dim = domains.len();
        let mut seen = vec![false; dim];
        for &i in pass.iter().chain(&transformed) {
            if i >= dim || seen[i] {
                return Err(Error::Argument(format!(
                    "coordinate {i} repeated or outside dimension {dim}"
                )));
            }
            seen[i] = true;
        }
        if pass.is_empty() || transformed.is_empty() || seen.iter().any(|s| !s) {
            return Err(Error::Argument(
                "pass and transformed sets must be nonempty and cover every coordinate".into(),
            ));
        }
        let config: Vec<ParamGenConfig> = transformed
            .iter()
            .map(|&i| ParamGenConfig::new(k, bins, eps, domains[i]))
            .collect();
        for c in &config {
            c.validate()?;
        }
        let enc: usize = pass.iter().map(|&i| encoded_width(domains[i])).sum();
        let out = config.iter().map(|c| c.n_logits()).sum::<usize>();
        if conditioner.input_len() != enc || conditioner.output_len() != out {
            return Err(Error::Argument(format!(
                "conditioner must map {enc} inputs to {out} logits, has {} -> {}",
                conditioner.input_len(),
                conditioner.output_len()
            )));
        }
        Ok(CouplingLayer {
            pass,
            transformed,
            domains,
            config,
            conditioner,
        })
    }

    pub fn pass(&self) -> &[usize] {
        &self.pass
    }

    pub fn transformed(&self) -> &[usize] {
        &self.transformed
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn order(&self) -> usize {
        self.config[0].k
    }

    pub fn bins(&self) -> usize {
        self.config[0].bins()
    }

    pub fn eps(&self) -> f64 {
        self.config[0].eps_t
    }

    pub fn conditioner(&self) -> &Mlp {
        &self.conditioner
    }

    pub fn conditioner_mut(&mut self) -> &mut Mlp {
        &mut self.conditioner
    }

    fn logits_per_coord(&self) -> usize {
        self.config[0].n_logits()
    }

    /// Conditioner input: interval coordinates as they are, circle
    /// coordinates as `(cos 2πx, sin 2πx)`.
    pub fn encode<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let mut out = Vec::with_capacity(self.conditioner.input_len());
        for &i in &self.pass {
            match self.domains[i] {
                Domain::Interval => out.push(x[i]),
                Domain::Circle => {
                    let a = S::cst(2.0 * PI) * x[i];
                    out.push(a.cos());
                    out.push(a.sin());
                }
            }
        }
        out
    }

    /// Spline parameters of transformed coordinate number `which`.
    pub fn spline_params<S: Scalar>(&self, logits: &[S], which: usize) -> Result<SplineParams<S>> {
        let n = self.logits_per_coord();
        let cfg = &self.config[which];
        generate(&RawLogits::from_flat(&logits[which * n..(which + 1) * n], cfg)?, cfg)
    }

    /// Applies the splines to the transformed coordinates `xt` (in the order
    /// of [`CouplingLayer::transformed`]); returns the outputs and
    /// `Σ log f'`.
    pub fn apply_splines<S: Scalar>(&self, logits: &[S], xt: &[S]) -> Result<(Vec<S>, S)> {
        let mut logdet = S::zero();
        let mut out = Vec::with_capacity(xt.len());
        for (which, &x) in xt.iter().enumerate() {
            let p = self.spline_params(logits, which)?;
            let x = prepare(x, self.config[which].domain)?;
            let bin = p.locate(x.value());
            out.push(p.eval_in_bin(bin, x));
            logdet = logdet + p.derivative_in_bin(bin, x, 1).ln();
        }
        Ok((out, logdet))
    }

    /// Forward map with conditioner parameters given explicitly (any scalar
    /// type, same layout as the stored parameters).
    pub fn forward_with<S: Scalar>(&self, params: &[S], x: &[S]) -> Result<(Vec<S>, S)> {
        self.check_dim(x.len())?;
        let logits = self.conditioner.forward(params, &self.encode(x))?;
        let xt: Vec<S> = self.transformed.iter().map(|&i| x[i]).collect();
        let (yt, logdet) = self.apply_splines(&logits, &xt)?;
        let mut y = x.to_vec();
        for (&i, v) in self.transformed.iter().zip(yt) {
            y[i] = v;
        }
        Ok((y, logdet))
    }

    /// Forward map over any scalar type with the stored parameters lifted to
    /// constants.
    pub fn forward<S: Scalar>(&self, x: &[S]) -> Result<(Vec<S>, S)> {
        let params: Vec<S> = self.conditioner.params().iter().map(|&v| S::cst(v)).collect();
        self.forward_with(&params, x)
    }

    /// Inverse map; returns `x` and `log |det ∂x/∂y|`.
    pub fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(y.len())?;
        let logits = self.conditioner.forward(self.conditioner.params(), &self.encode(y))?;
        let yt: Vec<f64> = self.transformed.iter().map(|&i| y[i]).collect();
        let (xt, logdet) = self.invert_splines(&logits, &yt)?;
        let mut x = y.to_vec();
        for (&i, v) in self.transformed.iter().zip(xt) {
            x[i] = v;
        }
        Ok((x, logdet))
    }

    fn invert_splines(&self, logits: &[f64], yt: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut logdet = 0.0;
        let mut out = Vec::with_capacity(yt.len());
        for (which, &y) in yt.iter().enumerate() {
            let p = self.spline_params(logits, which)?;
            let y = prepare(y, self.config[which].domain)?;
            let x = p.invert(y)?;
            logdet -= p.derivative_in_bin(p.locate(x), x, 1).ln();
            out.push(x);
        }
        Ok((out, logdet))
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.domains.len() {
            return Err(Error::Argument(format!(
                "layer expects {} coordinates, got {n}",
                self.domains.len()
            )));
        }
        Ok(())
    }
}

fn encoded_width(d: Domain) -> usize {
    match d {
        Domain::Interval => 1,
        Domain::Circle => 2,
    }
}

/// Architecture of a [`FlowModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSpec {
    pub domains: Vec<Domain>,
    pub layers: usize,
    pub k: usize,
    pub bins: usize,
    pub eps: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl FlowSpec {
    /// Four layers, 32 bins, cubic splines, two hidden layers of width 100.
    pub fn toy(domains: Vec<Domain>) -> Self {
        FlowSpec {
            domains,
            layers: 4,
            k: 4,
            bins: 32,
            eps: 1e-4,
            hidden: vec![100, 100],
            activation: Activation::Sin,
        }
    }

    pub fn dim(&self) -> usize {
        self.domains.len()
    }

    /// `(pass, transformed)` of layer `l`: the first `⌊D/2⌋` coordinates
    /// condition the rest, and every odd layer swaps the roles by reversing
    /// the coordinate order.
    pub fn split(&self, l: usize) -> (Vec<usize>, Vec<usize>) {
        let dim = self.dim();
        let d = dim / 2;
        let order: Vec<usize> = if l % 2 == 0 {
            (0..dim).collect()
        } else {
            (0..dim).rev().collect()
        };
        (order[..d].to_vec(), order[d..].to_vec())
    }

    fn conditioner_sizes(&self, pass: &[usize], transformed: &[usize]) -> Vec<usize> {
        let enc: usize = pass.iter().map(|&i| encoded_width(self.domains[i])).sum();
        let cfg = ParamGenConfig::new(self.k, self.bins, self.eps, Domain::Interval);
        let mut sizes = vec![enc];
        sizes.extend(&self.hidden);
        sizes.push(cfg.n_logits() * transformed.len());
        sizes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    spec: FlowSpec,
    layers: Vec<CouplingLayer>,
    bbox: BoundingBox,
}

impl FlowModel {
    /// Fresh model; every layer starts as the identity map.
    pub fn new(spec: FlowSpec, bbox: BoundingBox, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let (pass, transformed) = spec.split(l);
            let net = Mlp::new(&spec.conditioner_sizes(&pass, &transformed), spec.activation, &mut rng)?;
            layers.push(CouplingLayer::new(
                pass,
                transformed,
                spec.domains.clone(),
                spec.k,
                spec.bins,
                spec.eps,
                net,
            )?);
        }
        Self::from_layers(spec, layers, bbox)
    }

    pub fn from_layers(spec: FlowSpec, layers: Vec<CouplingLayer>, bbox: BoundingBox) -> Result<Self> {
        if spec.dim() < 2 {
            return Err(Error::Argument("coupling flows need at least two coordinates".into()));
        }
        if bbox.domains() != spec.domains.as_slice() {
            return Err(Error::Argument("bounding box domains differ from the model".into()));
        }
        if layers.len() != spec.layers {
            return Err(Error::Argument(format!(
                "spec has {} layers, got {}",
                spec.layers,
                layers.len()
            )));
        }
        Ok(FlowModel { spec, layers, bbox })
    }

    pub fn spec(&self) -> &FlowSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn domains(&self) -> &[Domain] {
        &self.spec.domains
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer] {
        &mut self.layers
    }

    pub fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.conditioner.n_params()).sum()
    }

    /// All conditioner parameters, layer by layer.
    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.conditioner.params().iter().copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Argument(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.conditioner.n_params();
            l.conditioner.params_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Fails unless every layer is at least C² (cubic or higher order).
    pub fn require_c2(&self) -> Result<()> {
        match self.layers.iter().map(|l| l.order()).min() {
            Some(k) if k < 4 => Err(Error::Smoothness {
                requested: 2,
                available: k - 2,
            }),
            _ => Ok(()),
        }
    }

    pub fn layer_forward(&self, l: usize, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.layer(l)?.forward(x).map_err(|e| e.in_layer(l))
    }

    pub fn layer_inverse(&self, l: usize, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.layer(l)?.inverse(y).map_err(|e| e.in_layer(l))
    }

    fn layer(&self, l: usize) -> Result<&CouplingLayer> {
        self.layers.get(l).ok_or_else(|| {
            Error::Argument(format!("layer {l} out of range (model has {})", self.layers.len()))
        })
    }

    /// Data to base coordinates through every layer; returns `u` and the
    /// accumulated log-determinant.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut z = x.to_vec();
        let mut total = 0.0;
        for l in 0..self.layers.len() {
            let (y, ld) = self.layer_forward(l, &z)?;
            z = y;
            total += ld;
        }
        Ok((z, total))
    }

    /// Base to data coordinates; returns `x` and `log |det ∂x/∂u|`.
    pub fn inverse(&self, u: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut z = u.to_vec();
        let mut total = 0.0;
        for l in (0..self.layers.len()).rev() {
            let (x, ld) = self.layer_inverse(l, &z)?;
            z = x;
            total += ld;
        }
        Ok((z, total))
    }

    /// `log p(x)` in flow coordinates; the base density is uniform, so this
    /// is the sum of forward log-determinants.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.forward(x).map(|(_, ld)| ld)
    }

    /// `log p(x)` with conditioner parameters supplied per layer.
    pub fn log_density_with<S: Scalar>(&self, params: &[Vec<S>], x: &[S]) -> Result<S> {
        if params.len() != self.layers.len() {
            return Err(Error::Argument("one parameter vector per layer required".into()));
        }
        let mut z = x.to_vec();
        let mut total = S::zero();
        for (l, layer) in self.layers.iter().enumerate() {
            let (y, ld) = layer.forward_with(&params[l], &z).map_err(|e| e.in_layer(l))?;
            z = y;
            total = total + ld;
        }
        Ok(total)
    }

    /// `log p(x)` over any scalar type with the stored parameters.
    pub fn log_density_generic<S: Scalar>(&self, x: &[S]) -> Result<S> {
        let mut z = x.to_vec();
        let mut total = S::zero();
        for (l, layer) in self.layers.iter().enumerate() {
            let (y, ld) = layer.forward(&z).map_err(|e| e.in_layer(l))?;
            z = y;
            total = total + ld;
        }
        Ok(total)
    }

    /// Log density of a point given in data coordinates.
    pub fn log_density_data(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density(&self.bbox.to_flow(x))? + self.bbox.log_jacobian())
    }

    /// `∂_x log p(x)` in flow coordinates by forward-mode differentiation.
    pub fn model_force(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.require_c2()?;
        match self.dim() {
            2 => self.force_dual::<2>(x),
            3 => self.force_dual::<3>(x),
            4 => self.force_dual::<4>(x),
            d => Err(Error::Argument(format!("forces supported for D <= 4, got {d}"))),
        }
    }

    fn force_dual<const N: usize>(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != N {
            return Err(Error::Argument(format!("expected {N} coordinates, got {}", x.len())));
        }
        let xd: Vec<Dual<f64, N>> = (0..N).map(|i| Dual::variable(x[i], i)).collect();
        Ok(self.log_density_generic(&xd)?.eps.to_vec())
    }

    /// Force in data coordinates.
    pub fn model_force_data(&self, x: &[f64]) -> Result<Vec<f64>> {
        let g = self.model_force(&self.bbox.to_flow(x))?;
        Ok(g.iter().enumerate().map(|(i, v)| v * self.bbox.scale(i)).collect())
    }

    /// Batched forward map; `xs` is `n × D` row-major. Returns `(u, logdet)`.
    pub fn forward_batch(&self, xs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let dim = self.dim();
        let n = self.check_batch(xs)?;
        let mut z = xs.to_vec();
        let mut ld = vec![0.0; n];
        for (l, layer) in self.layers.iter().enumerate() {
            let enc = self.encode_rows(layer, &z);
            let trace = layer.conditioner.forward_batch(&enc, n);
            let width = layer.conditioner.output_len();
            for b in 0..n {
                let row = &mut z[b * dim..(b + 1) * dim];
                let xt: Vec<f64> = layer.transformed.iter().map(|&i| row[i]).collect();
                let (yt, d) = layer
                    .apply_splines(&trace.output[b * width..(b + 1) * width], &xt)
                    .map_err(|e| e.in_layer(l).at_sample(b))?;
                for (&i, v) in layer.transformed.iter().zip(yt) {
                    row[i] = v;
                }
                ld[b] += d;
            }
        }
        Ok((z, ld))
    }

    /// Batched inverse map; returns `(x, log |det ∂x/∂u|)`.
    pub fn inverse_batch(&self, us: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let dim = self.dim();
        let n = self.check_batch(us)?;
        let mut z = us.to_vec();
        let mut ld = vec![0.0; n];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let enc = self.encode_rows(layer, &z);
            let trace = layer.conditioner.forward_batch(&enc, n);
            let width = layer.conditioner.output_len();
            for b in 0..n {
                let row = &mut z[b * dim..(b + 1) * dim];
                let yt: Vec<f64> = layer.transformed.iter().map(|&i| row[i]).collect();
                let (xt, d) = layer
                    .invert_splines(&trace.output[b * width..(b + 1) * width], &yt)
                    .map_err(|e| e.in_layer(l).at_sample(b))?;
                for (&i, v) in layer.transformed.iter().zip(xt) {
                    row[i] = v;
                }
                ld[b] += d;
            }
        }
        Ok((z, ld))
    }

    pub fn log_density_batch(&self, xs: &[f64]) -> Result<Vec<f64>> {
        self.forward_batch(xs).map(|(_, ld)| ld)
    }

    fn check_batch(&self, xs: &[f64]) -> Result<usize> {
        if xs.len() % self.dim() != 0 {
            return Err(Error::Argument(format!(
                "batch length {} is not a multiple of D = {}",
                xs.len(),
                self.dim()
            )));
        }
        Ok(xs.len() / self.dim())
    }

    fn encode_rows(&self, layer: &CouplingLayer, z: &[f64]) -> Vec<f64> {
        z.chunks_exact(self.dim()).flat_map(|row| layer.encode(row)).collect()
    }

    /// `n` samples in flow coordinates with their log densities: `u` uniform
    /// on the unit cube, mapped through the inverse layers.
    pub fn sample_with_log_density(&self, n: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let us: Vec<f64> = (0..n * self.dim()).map(|_| rng.random::<f64>()).collect();
        let (xs, ld) = self.inverse_batch(&us)?;
        // log p(x) = log p_u(u) - log |det ∂x/∂u|
        Ok((xs, ld.into_iter().map(|v| -v).collect()))
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        self.sample_with_log_density(n, seed).map(|(xs, _)| xs)
    }
}
