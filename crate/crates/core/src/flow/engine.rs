//! Batched loss and gradient evaluation.
//!
//! Conditioner networks run batched with hand-written backpropagation; the
//! spline part runs per sample on the reverse tape. For the force-matching
//! term every intermediate coordinate carries `N = D` forward tangents
//! (`∂z/∂x`), the conditioners propagate them as extra streams, and the
//! tape differentiates the tangent outputs as well (forward over reverse).

use std::f64::consts::PI;

use super::{CouplingLayer, FlowModel};
use crate::autodiff::{BatchTrace, Dual, Tape, Var};
use crate::error::{Error, Result};
use crate::params::Domain;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    /// `-mean log p` in flow coordinates.
    pub nll: f64,
    /// Mean squared force error in data coordinates, when requested.
    pub fm: Option<f64>,
    pub loss: f64,
}

/// `(1 - λ) NLL + λ FM` over the batch `xs` (flow coordinates, `n × D`) and
/// its gradient, added into `grad` (one vector per layer). `forces` are the
/// target forces in data coordinates; they are only read when `λ > 0`.
pub fn loss_and_grad(
    model: &FlowModel,
    xs: &[f64],
    forces: Option<&[f64]>,
    lambda: f64,
    grad: &mut [Vec<f64>],
) -> Result<LossTerms> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Argument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if grad.len() != model.layers.len()
        || grad.iter().zip(&model.layers).any(|(g, l)| g.len() != l.conditioner.n_params())
    {
        return Err(Error::Argument("gradient buffers do not match the model".into()));
    }
    let n = model.check_batch(xs)?;
    if n == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    if lambda == 0.0 {
        let mut run = Run::<0>::forward(model, xs, n)?;
        return run.backward(model, None, 0.0, grad);
    }
    model.require_c2()?;
    let f = forces.ok_or_else(|| Error::Argument("force matching needs target forces".into()))?;
    if f.len() != xs.len() {
        return Err(Error::Argument("one target force per sample required".into()));
    }
    match model.dim() {
        2 => Run::<2>::forward(model, xs, n)?.backward(model, Some(f), lambda, grad),
        3 => Run::<3>::forward(model, xs, n)?.backward(model, Some(f), lambda, grad),
        4 => Run::<4>::forward(model, xs, n)?.backward(model, Some(f), lambda, grad),
        d => Err(Error::Argument(format!("force matching supported for D <= 4, got {d}"))),
    }
}

/// Log densities and `∂_x log p` (flow coordinates) for a batch.
pub fn forces_batch(model: &FlowModel, xs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    model.require_c2()?;
    let n = model.check_batch(xs)?;
    let run_out = |ll: Vec<f64>, g: Vec<f64>| (ll, g);
    match model.dim() {
        2 => Run::<2>::forward(model, xs, n).map(|r| run_out(r.ll, r.grad_x)),
        3 => Run::<3>::forward(model, xs, n).map(|r| run_out(r.ll, r.grad_x)),
        4 => Run::<4>::forward(model, xs, n).map(|r| run_out(r.ll, r.grad_x)),
        d => Err(Error::Argument(format!("forces supported for D <= 4, got {d}"))),
    }
}

struct LayerCache {
    /// Layer input values (`n × D`) and tangents (`N` arrays of `n × D`).
    z: Vec<f64>,
    zt: Vec<Vec<f64>>,
    trace: BatchTrace,
}

struct Run<const N: usize> {
    n: usize,
    dim: usize,
    caches: Vec<LayerCache>,
    /// Per-sample log density and its input gradient (`n × N`).
    ll: Vec<f64>,
    grad_x: Vec<f64>,
}

fn encode_batch(layer: &CouplingLayer, z: &[f64], zt: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = z.len() / dim;
    let width = layer.conditioner.input_len();
    let mut enc = Vec::with_capacity(n * width);
    let mut enc_t: Vec<Vec<f64>> = zt.iter().map(|_| Vec::with_capacity(n * width)).collect();
    for b in 0..n {
        for &i in &layer.pass {
            let v = z[b * dim + i];
            match layer.domains[i] {
                Domain::Interval => {
                    enc.push(v);
                    for (e, t) in enc_t.iter_mut().zip(zt) {
                        e.push(t[b * dim + i]);
                    }
                }
                Domain::Circle => {
                    let (s, c) = (2.0 * PI * v).sin_cos();
                    enc.push(c);
                    enc.push(s);
                    for (e, t) in enc_t.iter_mut().zip(zt) {
                        let dv = 2.0 * PI * t[b * dim + i];
                        e.push(-s * dv);
                        e.push(c * dv);
                    }
                }
            }
        }
    }
    (enc, enc_t)
}

impl<const N: usize> Run<N> {
    fn forward(model: &FlowModel, xs: &[f64], n: usize) -> Result<Self> {
        let dim = model.dim();
        let mut z = xs.to_vec();
        let mut zt: Vec<Vec<f64>> = (0..N)
            .map(|d| {
                let mut t = vec![0.0; n * dim];
                for b in 0..n {
                    t[b * dim + d] = 1.0;
                }
                t
            })
            .collect();
        let mut ll = vec![0.0; n];
        let mut grad_x = vec![0.0; n * N];
        let mut caches = Vec::with_capacity(model.layers.len());
        for (l, layer) in model.layers.iter().enumerate() {
            let (enc, enc_t) = encode_batch(layer, &z, &zt, dim);
            let trace = layer.conditioner.forward_batch_jvp(&enc, &enc_t, n);
            let width = layer.conditioner.output_len();
            let mut z_next = z.clone();
            let mut zt_next = zt.clone();
            for b in 0..n {
                let logits: Vec<Dual<f64, N>> = (0..width)
                    .map(|i| Dual {
                        re: trace.output[b * width + i],
                        eps: std::array::from_fn(|d| trace.output_tangents[d][b * width + i]),
                    })
                    .collect();
                let xt: Vec<Dual<f64, N>> = layer
                    .transformed
                    .iter()
                    .map(|&i| Dual {
                        re: z[b * dim + i],
                        eps: std::array::from_fn(|d| zt[d][b * dim + i]),
                    })
                    .collect();
                let (yt, ld) = layer
                    .apply_splines(&logits, &xt)
                    .map_err(|e| e.in_layer(l).at_sample(b))?;
                for (&i, y) in layer.transformed.iter().zip(&yt) {
                    z_next[b * dim + i] = y.re;
                    for d in 0..N {
                        zt_next[d][b * dim + i] = y.eps[d];
                    }
                }
                ll[b] += ld.re;
                for d in 0..N {
                    grad_x[b * N + d] += ld.eps[d];
                }
            }
            caches.push(LayerCache {
                z: std::mem::replace(&mut z, z_next),
                zt: std::mem::replace(&mut zt, zt_next),
                trace,
            });
        }
        Ok(Run {
            n,
            dim,
            caches,
            ll,
            grad_x,
        })
    }

    fn backward(
        &mut self,
        model: &FlowModel,
        forces: Option<&[f64]>,
        lambda: f64,
        grad: &mut [Vec<f64>],
    ) -> Result<LossTerms> {
        let (n, dim) = (self.n, self.dim);
        let nf = n as f64;
        let nll = -self.ll.iter().sum::<f64>() / nf;
        // adjoints of the per-sample log density and of its input gradient
        let c_ll = -(1.0 - lambda) / nf;
        let mut g_bar = vec![0.0; n * N];
        let fm = match forces {
            Some(f) if N > 0 => {
                let mut total = 0.0;
                for b in 0..n {
                    for d in 0..N {
                        let a = model.bbox.scale(d);
                        let r = a * self.grad_x[b * N + d] - f[b * dim + d];
                        total += r * r;
                        g_bar[b * N + d] = lambda * 2.0 * r * a / nf;
                    }
                }
                Some(total / nf)
            }
            _ => None,
        };
        let loss = match fm {
            Some(v) => (1.0 - lambda) * nll + lambda * v,
            None => nll,
        };

        let mut z_bar = vec![0.0; n * dim];
        let mut zt_bar: Vec<Vec<f64>> = vec![vec![0.0; n * dim]; N];
        for (l, layer) in model.layers.iter().enumerate().rev() {
            let cache = &self.caches[l];
            let width = layer.conditioner.output_len();
            let nt = layer.transformed.len();
            let mut l_bar = vec![0.0; n * width];
            let mut lt_bar: Vec<Vec<f64>> = vec![vec![0.0; n * width]; N];
            for b in 0..n {
                let tape = Tape::new();
                let lv = tape.vars(&cache.trace.output[b * width..(b + 1) * width]);
                let ltv: Vec<Vec<Var>> = (0..N)
                    .map(|d| tape.vars(&cache.trace.output_tangents[d][b * width..(b + 1) * width]))
                    .collect();
                let xv: Vec<Var> = layer.transformed.iter().map(|&i| tape.var(cache.z[b * dim + i])).collect();
                let xtv: Vec<Vec<Var>> = (0..N)
                    .map(|d| layer.transformed.iter().map(|&i| tape.var(cache.zt[d][b * dim + i])).collect())
                    .collect();
                let logits: Vec<Dual<Var, N>> = (0..width)
                    .map(|i| Dual {
                        re: lv[i],
                        eps: std::array::from_fn(|d| ltv[d][i]),
                    })
                    .collect();
                let xt: Vec<Dual<Var, N>> = (0..nt)
                    .map(|j| Dual {
                        re: xv[j],
                        eps: std::array::from_fn(|d| xtv[d][j]),
                    })
                    .collect();
                let (yt, ld) = layer
                    .apply_splines(&logits, &xt)
                    .map_err(|e| e.in_layer(l).at_sample(b))?;
                let mut obj = ld.re * Var::constant(c_ll);
                for d in 0..N {
                    obj = obj + ld.eps[d] * Var::constant(g_bar[b * N + d]);
                }
                for (j, &i) in layer.transformed.iter().enumerate() {
                    obj = obj + yt[j].re * Var::constant(z_bar[b * dim + i]);
                    for d in 0..N {
                        obj = obj + yt[j].eps[d] * Var::constant(zt_bar[d][b * dim + i]);
                    }
                }
                let adj = tape
                    .adjoints(obj)
                    .map_err(|e| e.in_layer(l).at_sample(b))?;
                l_bar[b * width..(b + 1) * width].copy_from_slice(&Tape::select(&adj, &lv));
                for d in 0..N {
                    lt_bar[d][b * width..(b + 1) * width].copy_from_slice(&Tape::select(&adj, &ltv[d]));
                }
                for (j, &i) in layer.transformed.iter().enumerate() {
                    z_bar[b * dim + i] = Tape::select(&adj, &xv[j..j + 1])[0];
                    for d in 0..N {
                        zt_bar[d][b * dim + i] = Tape::select(&adj, &xtv[d][j..j + 1])[0];
                    }
                }
            }
            let (e_bar, et_bar) = layer
                .conditioner
                .backward_batch_jvp(&cache.trace, &l_bar, &lt_bar, &mut grad[l]);
            // encoding adjoints back onto the passthrough coordinates
            let enc_w = layer.conditioner.input_len();
            for b in 0..n {
                let mut col = b * enc_w;
                for &i in &layer.pass {
                    let at = b * dim + i;
                    match layer.domains[i] {
                        Domain::Interval => {
                            z_bar[at] += e_bar[col];
                            for d in 0..N {
                                zt_bar[d][at] += et_bar[d][col];
                            }
                            col += 1;
                        }
                        Domain::Circle => {
                            let w = 2.0 * PI;
                            let (s, c) = (w * cache.z[at]).sin_cos();
                            z_bar[at] += -w * s * e_bar[col] + w * c * e_bar[col + 1];
                            for d in 0..N {
                                let zd = cache.zt[d][at];
                                // ė = (-w s ż, w c ż)
                                z_bar[at] += -w * w * c * zd * et_bar[d][col] - w * w * s * zd * et_bar[d][col + 1];
                                zt_bar[d][at] += -w * s * et_bar[d][col] + w * c * et_bar[d][col + 1];
                            }
                            col += 2;
                        }
                    }
                }
            }
        }
        Ok(LossTerms { nll, fm, loss })
    }
}
