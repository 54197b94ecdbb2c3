//! Losses, Adam, the training loop and evaluation metrics.
//!
//! Log-likelihoods are measured in flow coordinates, i.e. relative to the
//! uniform density on the unit cube, so the identity model scores 0 on any
//! dataset. Forces are compared in data coordinates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{forces_batch, loss_and_grad, FlowModel, LossTerms};
use crate::targets::{Dataset, ToyTarget};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub profile: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_fm: f64,
    /// Learning rate is multiplied by this after every epoch.
    pub lr_decay: f64,
    pub seed: u64,
    pub train_fraction: f64,
    /// Use only the first `max_samples` rows of the dataset (0 = all).
    pub max_samples: usize,
    /// Epochs between checkpoints (0 = final only).
    pub checkpoint_every: usize,
    /// Model samples drawn for the reverse KLD estimate.
    pub rkld_samples: usize,
}

impl TrainConfig {
    /// Toy settings at full length.
    pub fn full() -> Self {
        TrainConfig {
            profile: "full".into(),
            learning_rate: 5e-4,
            batch_size: 1000,
            epochs: 8000,
            lambda_fm: 0.001,
            lr_decay: 1.0,
            seed: 0,
            train_fraction: 0.9,
            max_samples: 0,
            checkpoint_every: 500,
            rkld_samples: 2000,
        }
    }

    /// A run that fits on a laptop: 200 epochs over 20,000 samples.
    pub fn desk() -> Self {
        TrainConfig {
            profile: "desk".into(),
            epochs: 200,
            max_samples: 20_000,
            checkpoint_every: 20,
            ..Self::full()
        }
    }

    pub fn by_profile(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::Argument(format!("unknown profile `{name}` (expected full or desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_fm) {
            return Err(Error::Argument(format!("lambda_fm must lie in [0, 1], got {}", self.lambda_fm)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Argument(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Argument(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch as i32)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Argument(format!(
            "adam shapes differ: {} params, {} grads, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

/// A loss value with its gradient, one vector per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub terms: LossTerms,
    pub grad: Vec<Vec<f64>>,
}

impl LossValue {
    pub fn value(&self) -> f64 {
        self.terms.loss
    }

    pub fn grad_flat(&self) -> Vec<f64> {
        self.grad.iter().flatten().copied().collect()
    }
}

fn zero_grad(model: &FlowModel) -> Vec<Vec<f64>> {
    model
        .layers()
        .iter()
        .map(|l| vec![0.0; l.conditioner().n_params()])
        .collect()
}

fn to_flow_rows(model: &FlowModel, batch: &[f64]) -> Vec<f64> {
    batch.chunks_exact(model.dim()).flat_map(|r| model.bbox().to_flow(r)).collect()
}

fn target_forces(target: &ToyTarget, batch: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(batch.len());
    for (i, x) in batch.chunks_exact(2).enumerate() {
        out.extend(target.target_force(x).map_err(|e| e.at_sample(i))?);
    }
    Ok(out)
}

/// `(1 - λ) NLL + λ FM` on a batch in data coordinates.
pub fn combined_loss(model: &FlowModel, batch: &[f64], target: &ToyTarget, lambda: f64) -> Result<LossValue> {
    let xs = to_flow_rows(model, batch);
    let forces = if lambda > 0.0 {
        Some(target_forces(target, batch)?)
    } else {
        None
    };
    let mut grad = zero_grad(model);
    let terms = loss_and_grad(model, &xs, forces.as_deref(), lambda, &mut grad)?;
    Ok(LossValue { terms, grad })
}

/// `-(1/N) Σ log p(x)` on a batch in data coordinates.
pub fn nll_loss(model: &FlowModel, batch: &[f64]) -> Result<LossValue> {
    let xs = to_flow_rows(model, batch);
    let mut grad = zero_grad(model);
    let terms = loss_and_grad(model, &xs, None, 0.0, &mut grad)?;
    Ok(LossValue { terms, grad })
}

/// Mean squared difference between target and model forces.
pub fn fm_loss(model: &FlowModel, batch: &[f64], target: &ToyTarget) -> Result<LossValue> {
    combined_loss(model, batch, target, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_nll: f64,
    /// Only computed at checkpoints.
    pub fme: Option<f64>,
    pub rkld: Option<f64>,
}

/// Held-out metrics. `rkld` is `E_model[log p_model - log p*_unnorm]`, which
/// differs from the reverse KL divergence by the unknown `log Z` of the
/// target; only differences between models are meaningful.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub nll: f64,
    /// `None` for models below C².
    pub fme: Option<f64>,
    pub rkld: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub trace: Vec<EpochRecord>,
    pub last: Option<Evaluation>,
}

impl Metrics {
    pub fn test_nll(&self) -> Option<f64> {
        self.last.map(|e| e.nll)
    }
}

/// Mean negative log density of `points` (data coordinates) in flow
/// coordinates.
pub fn test_nll(model: &FlowModel, points: &[f64]) -> Result<f64> {
    let xs = to_flow_rows(model, points);
    let ll = model.log_density_batch(&xs)?;
    Ok(-ll.iter().sum::<f64>() / ll.len() as f64)
}

/// Mean `‖f*(x) - f_model(x)‖²` over `points` (data coordinates).
pub fn force_matching_error(model: &FlowModel, points: &[f64], target: &ToyTarget) -> Result<f64> {
    let xs = to_flow_rows(model, points);
    let (_, g) = forces_batch(model, &xs)?;
    let f = target_forces(target, points)?;
    let dim = model.dim();
    let scale: Vec<f64> = (0..dim).map(|i| model.bbox().scale(i)).collect();
    let n = points.len() / dim;
    let mut total = 0.0;
    for i in 0..points.len() {
        total += (f[i] - scale[i % dim] * g[i]).powi(2);
    }
    Ok(total / n as f64)
}

/// `mean [log p_model(x) - log p*_unnorm(x)]` over `n` model samples drawn
/// with `seed`, both densities in data coordinates.
pub fn reverse_kld_up_to_constant(model: &FlowModel, target: &ToyTarget, n: usize, seed: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Argument("rkld needs at least one sample".into()));
    }
    let (xs, lp) = model.sample_with_log_density(n, seed)?;
    let lj = model.bbox().log_jacobian();
    let mut total = 0.0;
    for (row, lp) in xs.chunks_exact(model.dim()).zip(lp) {
        let x = model.bbox().from_flow(row);
        total += lp + lj - target.unnorm_logdensity(&x);
    }
    Ok(total / n as f64)
}

pub fn evaluate(model: &FlowModel, test: &[f64], target: &ToyTarget, rkld_samples: usize, seed: u64) -> Result<Evaluation> {
    let fme = match model.require_c2() {
        Ok(()) => Some(force_matching_error(model, test, target)?),
        Err(_) => None,
    };
    Ok(Evaluation {
        nll: test_nll(model, test)?,
        fme,
        rkld: reverse_kld_up_to_constant(model, target, rkld_samples, seed)?,
    })
}

/// Deterministic train/test partition of a dataset's rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<f64>,
    pub test: Vec<f64>,
}

pub fn split(data: &Dataset, cfg: &TrainConfig) -> Split {
    let n = if cfg.max_samples == 0 {
        data.len()
    } else {
        cfg.max_samples.min(data.len())
    };
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    idx.shuffle(&mut rng);
    let n_train = ((n as f64) * cfg.train_fraction).round() as usize;
    let rows = |ids: &[usize]| ids.iter().flat_map(|&i| data.row(i).iter().copied()).collect();
    Split {
        train: rows(&idx[..n_train]),
        test: rows(&idx[n_train..]),
    }
}

/// Everything needed to continue an interrupted run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: &FlowModel) -> Self {
        TrainState {
            adam: AdamState::new(model.n_params()),
            epoch: 0,
        }
    }
}

/// Runs epochs `state.epoch..cfg.epochs`. Each epoch shuffles the training
/// rows with a stream derived from `(seed, epoch)`, so a resumed run repeats
/// exactly what an uninterrupted one would do. `on_checkpoint` is called
/// after every `checkpoint_every`-th epoch and after the last one.
pub fn train<F>(
    model: &mut FlowModel,
    data: &Dataset,
    target: &ToyTarget,
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_checkpoint: F,
) -> Result<Metrics>
where
    F: FnMut(&FlowModel, &TrainState, &EpochRecord) -> Result<()>,
{
    cfg.validate()?;
    if state.adam.m.len() != model.n_params() {
        return Err(Error::Argument("optimizer state does not match the model".into()));
    }
    if cfg.lambda_fm > 0.0 {
        model.require_c2()?;
    }
    let Split { train, test } = split(data, cfg);
    let dim = model.dim();
    let n_train = train.len() / dim;
    if n_train == 0 || test.is_empty() {
        return Err(Error::Argument("dataset too small for the train/test split".into()));
    }
    let train_flow = to_flow_rows(model, &train);
    let train_forces = if cfg.lambda_fm > 0.0 {
        Some(target_forces(target, &train)?)
    } else {
        None
    };

    let mut metrics = Metrics::default();
    let mut params = model.params_flat();
    let mut grad = zero_grad(model);
    let mut xs = Vec::with_capacity(cfg.batch_size * dim);
    let mut fs = Vec::with_capacity(cfg.batch_size * dim);
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            xs.clear();
            fs.clear();
            for &i in chunk {
                xs.extend_from_slice(&train_flow[i * dim..(i + 1) * dim]);
                if let Some(f) = &train_forces {
                    fs.extend_from_slice(&f[i * dim..(i + 1) * dim]);
                }
            }
            grad.iter_mut().for_each(|g| g.fill(0.0));
            let forces = train_forces.as_ref().map(|_| fs.as_slice());
            let non_finite = || Error::NonFiniteLoss {
                epoch,
                batch: b,
                param_norm: params.iter().map(|p| p * p).sum::<f64>().sqrt(),
            };
            // overflowing conditioner outputs surface as non-finite logits
            let terms = match loss_and_grad(model, &xs, forces, cfg.lambda_fm, &mut grad) {
                Err(e) if matches!(e.root(), Error::NumericDomain { op: "logit", .. }) => {
                    return Err(non_finite())
                }
                r => r?,
            };
            let flat: Vec<f64> = grad.iter().flatten().copied().collect();
            if !terms.loss.is_finite() || flat.iter().any(|g| !g.is_finite()) {
                return Err(non_finite());
            }
            adam_step(&mut params, &flat, &mut state.adam, lr)?;
            model.set_params_flat(&params)?;
            loss_sum += terms.loss * chunk.len() as f64;
            count += chunk.len();
        }
        state.epoch += 1;
        let checkpoint = state.epoch == cfg.epochs
            || (cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0);
        let mut record = EpochRecord {
            epoch: state.epoch,
            train_loss: loss_sum / count as f64,
            test_nll: test_nll(model, &test)?,
            fme: None,
            rkld: None,
        };
        if checkpoint {
            let ev = evaluate(model, &test, target, cfg.rkld_samples, cfg.seed)?;
            record.fme = ev.fme;
            record.rkld = Some(ev.rkld);
            metrics.last = Some(ev);
            on_checkpoint(model, state, &record)?;
        }
        metrics.trace.push(record);
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests;
