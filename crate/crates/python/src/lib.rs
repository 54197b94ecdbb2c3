//! Python bindings: splines, toy targets, datasets, flow models and training.

use std::path::PathBuf;

use nubflow::autodiff::Activation;
use nubflow::bspline::SplineParams;
use nubflow::flow::{FlowModel, FlowSpec};
use nubflow::params::{self as pg, Domain, ParamGenConfig, RawLogits};
use nubflow::targets::{mh_generate, Dataset as CoreDataset, MhConfig, TargetKind, ToyTarget};
use nubflow::trainer::{self, TrainState};
use nubflow::{io, Error};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e.root() {
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        Error::NonFiniteLoss { .. } | Error::Inversion { .. } | Error::NumericDomain { .. } => {
            PyArithmeticError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn domain(name: &str) -> PyResult<Domain> {
    Domain::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown domain {name:?}")))
}

/// A monotone B-spline built from unconstrained logits.
#[pyclass(name = "Spline", module = "nubflow")]
struct PySpline {
    inner: SplineParams<f64>,
}

#[pymethods]
impl PySpline {
    /// Number of logits `generate` expects.
    #[staticmethod]
    #[pyo3(signature = (k = 4, bins = 32, domain = "interval"))]
    fn n_logits(k: usize, bins: usize, domain: &str) -> PyResult<usize> {
        let cfg = ParamGenConfig::new(k, bins, 1e-4, self::domain(domain)?);
        cfg.validate().map_err(py_err)?;
        Ok(cfg.n_logits())
    }

    #[staticmethod]
    #[pyo3(signature = (logits, k = 4, bins = 32, eps = 1e-4, domain = "interval"))]
    fn generate(logits: Vec<f64>, k: usize, bins: usize, eps: f64, domain: &str) -> PyResult<Self> {
        let cfg = ParamGenConfig::new(k, bins, eps, self::domain(domain)?);
        let raw = RawLogits::from_flat(&logits, &cfg).map_err(py_err)?;
        let inner = pg::generate(&raw, &cfg).map_err(py_err)?;
        Ok(PySpline { inner })
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    #[getter]
    fn knots(&self) -> Vec<f64> {
        self.inner.knots().values().to_vec()
    }

    #[getter]
    fn alpha(&self) -> Vec<f64> {
        self.inner.alpha().to_vec()
    }

    fn eval(&self, x: f64) -> PyResult<f64> {
        self.inner.eval(x).map_err(py_err)
    }

    #[pyo3(signature = (x, m = 1))]
    fn derivative(&self, x: f64, m: usize) -> PyResult<f64> {
        self.inner.eval_derivative(x, m).map_err(py_err)
    }

    fn invert(&self, y: f64) -> PyResult<f64> {
        self.inner.invert(y).map_err(py_err)
    }

    /// `(pass, violating indices)` for the slope bounds `l < f' < u`.
    fn check_condition(&self, l: f64, u: f64) -> (bool, Vec<i64>) {
        let r = pg::check_sufficient_condition(&self.inner, l, u);
        (r.pass, r.violations)
    }

    fn __repr__(&self) -> String {
        format!(
            "Spline(k={}, bins={})",
            self.inner.order(),
            self.inner.s() - self.inner.r()
        )
    }
}

/// Two-dimensional ring mixture, plain or periodic.
#[pyclass(name = "Target", module = "nubflow", skip_from_py_object)]
#[derive(Clone)]
struct PyTarget {
    inner: ToyTarget,
}

#[pymethods]
impl PyTarget {
    #[new]
    #[pyo3(signature = (kind = "rings"))]
    fn new(kind: &str) -> PyResult<Self> {
        let kind = TargetKind::parse(kind).ok_or_else(|| PyValueError::new_err(format!("unknown target {kind:?}")))?;
        Ok(PyTarget {
            inner: ToyTarget::by_kind(kind),
        })
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.inner.kind.name()
    }

    /// Unnormalised log density.
    fn log_density(&self, x: [f64; 2]) -> f64 {
        self.inner.unnorm_logdensity(&x)
    }

    fn force(&self, x: [f64; 2]) -> PyResult<[f64; 2]> {
        self.inner.target_force(&x).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Target({:?})", self.inner.kind.name())
    }
}

/// Metropolis-Hastings samples from a target, with their bounding box.
#[pyclass(name = "Dataset", module = "nubflow")]
struct PyDataset {
    inner: CoreDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (target, seed = 0, chains = 10000, burn_in = 1000, keeps = 10, keep_every = 1, step = 0.1))]
    fn generate(
        target: &PyTarget,
        seed: u64,
        chains: usize,
        burn_in: usize,
        keeps: usize,
        keep_every: usize,
        step: f64,
    ) -> PyResult<Self> {
        let cfg = MhConfig {
            chains,
            burn_in,
            keep_every,
            keeps,
            step,
        };
        let inner = mh_generate(&target.inner, &cfg, seed).map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: io::load_dataset(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_dataset(&self.inner, &path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn points(&self) -> Vec<Vec<f64>> {
        (0..self.inner.len()).map(|i| self.inner.row(i).to_vec()).collect()
    }

    #[getter]
    fn acceptance(&self) -> f64 {
        self.inner.acceptance
    }

    #[getter]
    fn target(&self) -> PyTarget {
        PyTarget {
            inner: self.inner.target.clone(),
        }
    }

    #[getter]
    fn bbox(&self) -> (Vec<f64>, Vec<f64>) {
        (self.inner.bbox.lo().to_vec(), self.inner.bbox.hi().to_vec())
    }
}

/// Coupling flow of B-spline layers. Points and densities are in data
/// coordinates unless a method says otherwise.
#[pyclass(name = "FlowModel", module = "nubflow")]
struct PyFlowModel {
    inner: FlowModel,
}

#[pymethods]
impl PyFlowModel {
    /// A fresh model sized to a dataset's domains and bounding box.
    #[staticmethod]
    #[pyo3(signature = (dataset, layers = 4, k = 4, bins = 32, hidden = vec![100, 100], activation = "sin", eps = 1e-4, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn for_dataset(
        dataset: &PyDataset,
        layers: usize,
        k: usize,
        bins: usize,
        hidden: Vec<usize>,
        activation: &str,
        eps: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let activation = Activation::parse(activation)
            .ok_or_else(|| PyValueError::new_err(format!("unknown activation {activation:?}")))?;
        let spec = FlowSpec {
            domains: dataset.inner.target.domains(),
            layers,
            k,
            bins,
            eps,
            hidden,
            activation,
        };
        let inner = FlowModel::new(spec, dataset.inner.bbox.clone(), seed).map_err(py_err)?;
        Ok(PyFlowModel { inner })
    }

    #[staticmethod]
    fn load(manifest: PathBuf, checkpoint: PathBuf) -> PyResult<Self> {
        let (inner, _) = io::load_model(&manifest, &checkpoint).map_err(py_err)?;
        Ok(PyFlowModel { inner })
    }

    /// Writes the manifest and a weights-only checkpoint.
    fn save(&self, manifest: PathBuf, checkpoint: PathBuf) -> PyResult<()> {
        io::save_manifest(&self.inner, &manifest).map_err(py_err)?;
        io::model_checkpoint(&self.inner, None)
            .and_then(|c| c.save(&checkpoint))
            .map_err(py_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params_flat()
    }

    fn set_params(&mut self, params: Vec<f64>) -> PyResult<()> {
        self.inner.set_params_flat(&params).map_err(py_err)
    }

    fn log_density(&self, points: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        points
            .iter()
            .map(|x| self.inner.log_density_data(x).map_err(py_err))
            .collect()
    }

    fn force(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.model_force_data(&x).map_err(py_err)
    }

    /// `(points, log_densities)` drawn through the analytic inverse.
    #[pyo3(signature = (n, seed = 0))]
    fn sample(&self, n: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let (xs, lp) = self.inner.sample_with_log_density(n, seed).map_err(py_err)?;
        let lj = self.inner.bbox().log_jacobian();
        let rows = xs.chunks_exact(self.inner.dim()).map(|r| self.inner.bbox().from_flow(r)).collect();
        Ok((rows, lp.into_iter().map(|v| v + lj).collect()))
    }

    /// Flow coordinates to base coordinates with the log Jacobian.
    fn forward(&self, x: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
        self.inner.forward(&x).map_err(py_err)
    }

    /// Base coordinates to flow coordinates with the log Jacobian.
    fn inverse(&self, u: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
        self.inner.inverse(&u).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let s = self.inner.spec();
        format!(
            "FlowModel(dim={}, layers={}, k={}, bins={}, params={})",
            s.dim(),
            s.layers,
            s.k,
            s.bins,
            self.inner.n_params()
        )
    }
}

/// Trains `model` in place. `config` uses the `key = value` config-file
/// syntax; without `fm` the force-matching weight is zero. Returns one dict
/// per epoch.
#[pyfunction]
#[pyo3(signature = (model, dataset, config = "", fm = false))]
fn train<'py>(
    py: Python<'py>,
    model: &mut PyFlowModel,
    dataset: &PyDataset,
    config: &str,
    fm: bool,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg = io::parse_train_config(config).map_err(py_err)?;
    if !fm {
        cfg.lambda_fm = 0.0;
    }
    let data = &dataset.inner;
    let mut state = TrainState::new(&model.inner);
    let metrics = trainer::train(&mut model.inner, data, &data.target, &cfg, &mut state, |_, _, _| Ok(()))
        .map_err(py_err)?;
    metrics
        .trace
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("train_loss", r.train_loss)?;
            d.set_item("test_nll", r.test_nll)?;
            d.set_item("fme", r.fme)?;
            d.set_item("rkld", r.rkld)?;
            Ok(d)
        })
        .collect()
}

#[pymodule(name = "nubflow")]
fn nubflow_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySpline>()?;
    m.add_class::<PyTarget>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyFlowModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
