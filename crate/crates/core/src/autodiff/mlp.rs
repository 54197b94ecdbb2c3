//! Fully connected conditioner network.
//!
//! Two evaluation routes share one parameter vector: a generic per-sample
//! route over any [`Scalar`] (used for nested differentiation and as the
//! reference), and a batched `f64` route with hand-written backpropagation
//! built on `matrixmultiply` (used by the training hot loop).

use rand::Rng;

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sin,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Sin => "sin",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sin" => Some(Activation::Sin),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    #[inline]
    fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Sin => z.sin(),
            Activation::Tanh => z.tanh(),
        }
    }

    /// `(σ(z), σ'(z), σ''(z))`
    #[inline]
    fn apply_f64(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Sin => {
                let (s, c) = z.sin_cos();
                (s, c, -s)
            }
            Activation::Tanh => {
                let t = z.tanh();
                let d = 1.0 - t * t;
                (t, d, -2.0 * t * d)
            }
        }
    }
}

// Row-major dense products on top of `matrixmultiply`; every routine
// accumulates into `c`.

/// `c (m×n) += a (m×k) · bᵀ` with `b` stored `n×k`.
fn gemm_abt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() == m * k && b.len() == n * k && c.len() == m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c (m×n) += aᵀ · b` with `a` stored `k×m` and `b` stored `k×n`.
fn gemm_atb(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() == m * k && b.len() == n * k && c.len() == m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c (m×n) += a (m×k) · b (k×n)`.
fn gemm_ab(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() == m * k && b.len() == n * k && c.len() == m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Multi-layer perceptron with parameters stored flat: for every dense layer
/// the weight matrix (row-major, `out × in`) followed by the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Activations kept from a batched forward pass for the backward pass.
pub struct BatchTrace {
    batch: usize,
    /// `inputs[l]` is the input to dense layer `l` (`batch × sizes[l]`).
    inputs: Vec<Vec<f64>>,
    input_tangents: Vec<Vec<Vec<f64>>>,
    /// First and second activation derivatives of the hidden layers.
    slopes: Vec<Vec<f64>>,
    curvatures: Vec<Vec<f64>>,
    pre_tangents: Vec<Vec<Vec<f64>>>,
    pub output: Vec<f64>,
    pub output_tangents: Vec<Vec<f64>>,
}

impl Mlp {
    /// Hidden layers uniform in `±1/sqrt(fan_in)`; the output layer starts at
    /// zero so a fresh conditioner emits all-zero logits.
    pub fn new<R: Rng>(sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::Argument(format!("invalid layer sizes {sizes:?}")));
        }
        let mut params = Vec::new();
        let layers = sizes.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            if l + 1 == layers {
                params.extend(std::iter::repeat_n(0.0, fan_out * fan_in + fan_out));
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                for _ in 0..fan_out * fan_in + fan_out {
                    params.push(rng.random_range(-bound..bound));
                }
            }
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            activation,
            params,
        })
    }

    pub fn from_parts(sizes: Vec<usize>, activation: Activation, params: Vec<f64>) -> Result<Self> {
        let expected = Self::count_params(&sizes);
        if params.len() != expected {
            return Err(Error::Argument(format!(
                "expected {expected} parameters for sizes {sizes:?}, got {}",
                params.len()
            )));
        }
        Ok(Mlp {
            sizes,
            activation,
            params,
        })
    }

    fn count_params(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `(name suffix, shape, offset)` of every weight and bias array.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut off = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            out.push((format!("dense{l}.weight"), vec![w[1], w[0]], off));
            off += w[0] * w[1];
            out.push((format!("dense{l}.bias"), vec![w[1]], off));
            off += w[1];
        }
        out
    }

    /// Per-sample forward pass over any scalar type. `params` must have the
    /// same layout as [`Mlp::params`].
    pub fn forward<S: Scalar>(&self, params: &[S], input: &[S]) -> Result<Vec<S>> {
        if input.len() != self.input_len() {
            return Err(Error::Argument(format!(
                "conditioner expects {} inputs, got {}",
                self.input_len(),
                input.len()
            )));
        }
        if params.len() != self.params.len() {
            return Err(Error::Argument(format!(
                "conditioner expects {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let layers = self.sizes.len() - 1;
        let mut h: Vec<S> = input.to_vec();
        let mut off = 0;
        for l in 0..layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &params[off..off + fan_in * fan_out];
            let b = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let last = l + 1 == layers;
            h = (0..fan_out)
                .map(|o| {
                    let z = S::affine_dot(&w[o * fan_in..(o + 1) * fan_in], &h, b[o]);
                    if last {
                        z
                    } else {
                        self.activation.apply(z)
                    }
                })
                .collect();
        }
        Ok(h)
    }

    /// Batched forward pass; `input` is `batch × input_len`, row-major.
    pub fn forward_batch(&self, input: &[f64], batch: usize) -> BatchTrace {
        self.forward_batch_jvp(input, &[], batch)
    }

    /// Batched forward pass that also pushes tangent streams through the
    /// network. Each entry of `tangents` has the shape of `input`; the trace
    /// holds the matching output tangents.
    pub fn forward_batch_jvp(&self, input: &[f64], tangents: &[Vec<f64>], batch: usize) -> BatchTrace {
        assert_eq!(input.len(), batch * self.input_len());
        let layers = self.sizes.len() - 1;
        let mut trace = BatchTrace {
            batch,
            inputs: Vec::with_capacity(layers),
            input_tangents: Vec::with_capacity(layers),
            slopes: Vec::with_capacity(layers - 1),
            curvatures: Vec::with_capacity(layers - 1),
            pre_tangents: Vec::with_capacity(layers - 1),
            output: Vec::new(),
            output_tangents: Vec::new(),
        };
        let mut h = input.to_vec();
        let mut hd: Vec<Vec<f64>> = tangents.to_vec();
        let mut off = 0;
        for l in 0..layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let mut z = vec![0.0; batch * fan_out];
            for row in z.chunks_exact_mut(fan_out) {
                row.copy_from_slice(b);
            }
            gemm_abt(batch, fan_in, fan_out, &h, w, &mut z);
            let mut zd: Vec<Vec<f64>> = hd
                .iter()
                .map(|t| {
                    let mut out = vec![0.0; batch * fan_out];
                    gemm_abt(batch, fan_in, fan_out, t, w, &mut out);
                    out
                })
                .collect();
            trace.inputs.push(h);
            trace.input_tangents.push(hd);
            if l + 1 < layers {
                let mut slope = vec![0.0; z.len()];
                let mut curv = if zd.is_empty() { Vec::new() } else { vec![0.0; z.len()] };
                for i in 0..z.len() {
                    let (a, d, c) = self.activation.apply_f64(z[i]);
                    z[i] = a;
                    slope[i] = d;
                    if !curv.is_empty() {
                        curv[i] = c;
                    }
                }
                trace.pre_tangents.push(zd.clone());
                for t in zd.iter_mut() {
                    for (v, s) in t.iter_mut().zip(&slope) {
                        *v *= s;
                    }
                }
                trace.slopes.push(slope);
                trace.curvatures.push(curv);
            }
            h = z;
            hd = zd;
        }
        trace.output = h;
        trace.output_tangents = hd;
        trace
    }

    /// Backpropagates `grad_output` (`batch × output_len`) through a traced
    /// forward pass. Parameter gradients are added into `grad_params`; the
    /// gradient with respect to the batch input is returned.
    pub fn backward_batch(&self, trace: &BatchTrace, grad_output: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
        self.backward_batch_jvp(trace, grad_output, &[], grad_params).0
    }

    /// Reverse pass for [`Mlp::forward_batch_jvp`]. `grad_tangents[d]` is the
    /// adjoint of output tangent `d` (or empty when the trace has none).
    /// Returns the adjoints of the input and of every input tangent.
    pub fn backward_batch_jvp(
        &self,
        trace: &BatchTrace,
        grad_output: &[f64],
        grad_tangents: &[Vec<f64>],
        grad_params: &mut [f64],
    ) -> (Vec<f64>, Vec<Vec<f64>>) {
        let batch = trace.batch;
        let layers = self.sizes.len() - 1;
        assert_eq!(grad_output.len(), batch * self.output_len());
        assert_eq!(grad_params.len(), self.params.len());
        assert!(grad_tangents.is_empty() || grad_tangents.len() == trace.output_tangents.len());
        let offsets: Vec<usize> = self
            .sizes
            .windows(2)
            .scan(0, |acc, w| {
                let o = *acc;
                *acc += w[0] * w[1] + w[1];
                Some(o)
            })
            .collect();
        let n_dir = trace.output_tangents.len();
        let mut delta = grad_output.to_vec();
        let mut delta_d: Vec<Vec<f64>> = if grad_tangents.is_empty() {
            vec![vec![0.0; delta.len()]; n_dir]
        } else {
            grad_tangents.to_vec()
        };
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            if l + 1 != layers {
                // a = σ(z), ȧ = σ'(z) ż
                let slope = &trace.slopes[l];
                let curv = &trace.curvatures[l];
                for (d, s) in delta.iter_mut().zip(slope) {
                    *d *= s;
                }
                for (dd, zdot) in delta_d.iter_mut().zip(&trace.pre_tangents[l]) {
                    for i in 0..delta.len() {
                        delta[i] += curv[i] * zdot[i] * dd[i];
                        dd[i] *= slope[i];
                    }
                }
            }
            let h = &trace.inputs[l];
            {
                let (gw, gb) = grad_params[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                gemm_atb(fan_out, batch, fan_in, &delta, h, gw);
                for (dd, hd) in delta_d.iter().zip(&trace.input_tangents[l]) {
                    gemm_atb(fan_out, batch, fan_in, dd, hd, gw);
                }
                for row in delta.chunks_exact(fan_out) {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            }
            let w = &self.params[off..off + fan_in * fan_out];
            let mut prev = vec![0.0; batch * fan_in];
            gemm_ab(batch, fan_out, fan_in, &delta, w, &mut prev);
            delta = prev;
            delta_d = delta_d
                .iter()
                .map(|dd| {
                    let mut prev = vec![0.0; batch * fan_in];
                    gemm_ab(batch, fan_out, fan_in, dd, w, &mut prev);
                    prev
                })
                .collect();
        }
        (delta, delta_d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_mlp(seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::new(&[3, 7, 5, 4], Activation::Sin, &mut rng).unwrap();
        // give the zero-initialised output layer some weight
        for p in net.params_mut().iter_mut().rev().take(24) {
            *p = rng.random_range(-0.5..0.5);
        }
        net
    }

    #[test]
    fn zero_output_layer_gives_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[2, 10, 10, 6], Activation::Sin, &mut rng).unwrap();
        let out = net.forward(net.params(), &[0.3, 0.8]).unwrap();
        assert_eq!(out, vec![0.0; 6]);
    }

    #[test]
    fn shape_mismatch_is_an_argument_error() {
        let net = random_mlp(2);
        assert!(matches!(
            net.forward(net.params(), &[0.1, 0.2]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let net = random_mlp(3);
        let input = [0.2, -0.4, 0.9];
        let tape = Tape::new();
        let p: Vec<Var> = tape.vars(net.params());
        let x: Vec<Var> = input.iter().map(|&v| Var::constant(v)).collect();
        let out = net.forward(&p, &x).unwrap();
        for (o, &y) in out.iter().enumerate() {
            let g = tape.gradient(y, &p).unwrap();
            for i in (0..net.n_params()).step_by(5) {
                let h = 1e-6;
                let mut plus = net.params().to_vec();
                let mut minus = net.params().to_vec();
                plus[i] += h;
                minus[i] -= h;
                let fp = net.forward(&plus, &input).unwrap()[o];
                let fm = net.forward(&minus, &input).unwrap()[o];
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (g[i] - fd).abs() <= 1e-5 * fd.abs().max(1e-4),
                    "output {o} param {i}: {} vs {fd}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn batched_route_matches_generic_route() {
        let net = random_mlp(4);
        let batch = 5;
        let inputs: Vec<f64> = (0..batch * 3).map(|i| (i as f64 * 0.37).sin()).collect();
        let trace = net.forward_batch(&inputs, batch);
        let upstream: Vec<f64> = (0..batch * 4).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut grad = vec![0.0; net.n_params()];
        let grad_in = net.backward_batch(&trace, &upstream, &mut grad);

        let mut ref_grad = vec![0.0; net.n_params()];
        let mut ref_in = vec![0.0; batch * 3];
        for b in 0..batch {
            let tape = Tape::new();
            let p = tape.vars(net.params());
            let x = tape.vars(&inputs[b * 3..b * 3 + 3]);
            let out = net.forward(&p, &x).unwrap();
            assert!(out
                .iter()
                .zip(&trace.output[b * 4..b * 4 + 4])
                .all(|(a, c)| (a.value() - c).abs() < 1e-13));
            let mut loss = Var::constant(0.0);
            for (o, y) in out.iter().enumerate() {
                loss = loss + *y * Var::constant(upstream[b * 4 + o]);
            }
            let adj = tape.adjoints(loss).unwrap();
            for (r, g) in ref_grad.iter_mut().zip(Tape::select(&adj, &p)) {
                *r += g;
            }
            ref_in[b * 3..b * 3 + 3].copy_from_slice(&Tape::select(&adj, &x));
        }
        for (a, b) in grad.iter().zip(&ref_grad) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in grad_in.iter().zip(&ref_in) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_tangents_match_nested_generic_route() {
        use crate::autodiff::Dual;
        for act in [Activation::Sin, Activation::Tanh] {
            let mut net = random_mlp(5);
            net.activation = act;
            let batch = 4;
            let inputs: Vec<f64> = (0..batch * 3).map(|i| (i as f64 * 0.41).cos()).collect();
            let tangents: Vec<Vec<f64>> = (0..2)
                .map(|d| (0..batch * 3).map(|i| ((i + 7 * d) as f64 * 0.23).sin()).collect())
                .collect();
            let trace = net.forward_batch_jvp(&inputs, &tangents, batch);
            let up: Vec<f64> = (0..batch * 4).map(|i| (i as f64 * 0.13).cos()).collect();
            let up_d: Vec<Vec<f64>> = (0..2)
                .map(|d| (0..batch * 4).map(|i| ((i + 3 * d) as f64 * 0.29).sin()).collect())
                .collect();
            let mut grad = vec![0.0; net.n_params()];
            let (g_in, g_in_d) = net.backward_batch_jvp(&trace, &up, &up_d, &mut grad);

            let mut ref_grad = vec![0.0; net.n_params()];
            for b in 0..batch {
                let tape = Tape::new();
                let p = tape.vars(net.params());
                let x = tape.vars(&inputs[b * 3..b * 3 + 3]);
                let xd: Vec<Vec<Var>> = (0..2).map(|d| tape.vars(&tangents[d][b * 3..b * 3 + 3])).collect();
                let pd: Vec<Dual<Var, 2>> = p.iter().map(|&v| Dual::constant(v)).collect();
                let xin: Vec<Dual<Var, 2>> = (0..3)
                    .map(|i| Dual {
                        re: x[i],
                        eps: [xd[0][i], xd[1][i]],
                    })
                    .collect();
                let out = net.forward(&pd, &xin).unwrap();
                let mut loss = Var::constant(0.0);
                for (o, y) in out.iter().enumerate() {
                    let i = b * 4 + o;
                    assert!((y.re.value() - trace.output[i]).abs() < 1e-13);
                    for d in 0..2 {
                        assert!((y.eps[d].value() - trace.output_tangents[d][i]).abs() < 1e-13);
                        loss = loss + y.eps[d] * Var::constant(up_d[d][i]);
                    }
                    loss = loss + y.re * Var::constant(up[i]);
                }
                let adj = tape.adjoints(loss).unwrap();
                for (r, g) in ref_grad.iter_mut().zip(Tape::select(&adj, &p)) {
                    *r += g;
                }
                for (i, g) in Tape::select(&adj, &x).iter().enumerate() {
                    assert!((g - g_in[b * 3 + i]).abs() < 1e-12);
                }
                for d in 0..2 {
                    for (i, g) in Tape::select(&adj, &xd[d]).iter().enumerate() {
                        assert!((g - g_in_d[d][b * 3 + i]).abs() < 1e-12);
                    }
                }
            }
            for (a, b) in grad.iter().zip(&ref_grad) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}
