//! Python bindings: networks, datasets, training, spectral bundles and the
//! three uncertainty estimators.

use std::path::PathBuf;

use delta_uq::delta::{self, RankOrder, SandwichCross, UncertaintyReport};
use delta_uq::nn::{Checkpoint, Dataset, Network, NetworkConfig, ParamVector};
use delta_uq::spectral::{self, LanczosConfig, OpgConfig, SpectralBundle};
use delta_uq::{data, trainer, Error};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e if e.is_user_error() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn params(net: &Network, values: Vec<f64>) -> PyResult<ParamVector> {
    let w = ParamVector::new(values);
    w.check_len(net.config()).map_err(to_py)?;
    Ok(w)
}

#[pyclass(name = "Network", module = "delta_uq_py", frozen)]
struct PyNetwork {
    inner: Network,
}

#[pymethods]
impl PyNetwork {
    #[new]
    fn new(layer_sizes: Vec<usize>, l2_rate: f64) -> PyResult<Self> {
        let config = NetworkConfig::new(layer_sizes, l2_rate).map_err(to_py)?;
        Ok(Self {
            inner: Network::new(config).map_err(to_py)?,
        })
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.config().layer_sizes.clone()
    }

    #[getter]
    fn l2_rate(&self) -> f64 {
        self.inner.l2_rate()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        ParamVector::init(self.inner.config(), seed).into_vec()
    }

    fn cost(&self, py: Python<'_>, params: Vec<f64>, data: &PyDataset) -> PyResult<f64> {
        let w = self::params(&self.inner, params)?;
        py.detach(|| self.inner.cost(&w, &data.inner)).map_err(to_py)
    }

    fn grad(&self, py: Python<'_>, params: Vec<f64>, data: &PyDataset) -> PyResult<Vec<f64>> {
        let w = self::params(&self.inner, params)?;
        let g = py.detach(|| self.inner.grad(&w, &data.inner)).map_err(to_py)?;
        Ok(g.into_vec())
    }

    fn hvp(&self, py: Python<'_>, params: Vec<f64>, data: &PyDataset, v: Vec<f64>) -> PyResult<Vec<f64>> {
        let w = self::params(&self.inner, params)?;
        let hv = py.detach(|| self.inner.hvp(&w, &data.inner, &v)).map_err(to_py)?;
        Ok(hv.into_vec())
    }

    /// Class probabilities for one input.
    fn forward(&self, params: Vec<f64>, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let w = self::params(&self.inner, params)?;
        self.inner.forward(&w, &x).map_err(to_py)
    }

    fn predict(&self, params: Vec<f64>, x: Vec<f64>) -> PyResult<usize> {
        let w = self::params(&self.inner, params)?;
        self.inner.predict(&w, &x).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(layer_sizes={:?}, l2_rate={}, param_count={})",
            self.inner.config().layer_sizes,
            self.inner.l2_rate(),
            self.inner.param_count()
        )
    }
}

#[pyclass(name = "Dataset", module = "delta_uq_py", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> PyResult<Self> {
        let dim = inputs.first().map_or(0, Vec::len);
        if inputs.iter().any(|x| x.len() != dim) {
            return Err(PyValueError::new_err("all inputs must have the same length"));
        }
        let flat = inputs.into_iter().flatten().collect();
        Ok(Self {
            inner: Dataset::from_labels(dim, classes, flat, &labels).map_err(to_py)?,
        })
    }

    /// Isotropic Gaussian blobs around well separated class means.
    #[staticmethod]
    #[pyo3(signature = (classes, dim, n, seed, separation = 3.0, noise = 1.0))]
    fn blobs(classes: usize, dim: usize, n: usize, seed: u64, separation: f64, noise: f64) -> PyResult<Self> {
        let cfg = data::BlobsConfig {
            classes,
            dim,
            separation,
            noise,
            n,
            seed,
        };
        Ok(Self {
            inner: data::blobs::generate(&cfg).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels()
    }

    #[getter]
    fn ids(&self) -> Vec<usize> {
        self.inner.ids().to_vec()
    }

    fn input(&self, n: usize) -> PyResult<Vec<f64>> {
        if n >= self.inner.len() {
            return Err(PyValueError::new_err(format!("index {n} out of range")));
        }
        Ok(self.inner.input(n).to_vec())
    }
}

#[pyclass(name = "TrainResult", module = "delta_uq_py", frozen, get_all)]
struct PyTrainResult {
    params: Vec<f64>,
    steps_run: usize,
    final_cost: f64,
    final_grad_norm: f64,
    train_accuracy: f64,
}

/// Mini-batch Adam with a piecewise-constant learning-rate schedule.
#[pyfunction]
#[pyo3(signature = (network, data, max_steps = 8000, batch_size = 100, schedule = None, seed = 0))]
fn train(
    py: Python<'_>,
    network: &PyNetwork,
    data: &PyDataset,
    max_steps: usize,
    batch_size: usize,
    schedule: Option<Vec<(usize, f64)>>,
    seed: u64,
) -> PyResult<PyTrainResult> {
    let mut cfg = trainer::TrainConfig {
        max_steps,
        batch_size,
        seed,
        ..Default::default()
    };
    if let Some(s) = schedule {
        cfg.schedule = s;
    }
    let r = py.detach(|| trainer::train(&network.inner, &data.inner, None, &cfg)).map_err(to_py)?;
    Ok(PyTrainResult {
        params: r.params.into_vec(),
        steps_run: r.steps_run,
        final_cost: r.final_cost,
        final_grad_norm: r.final_grad_norm,
        train_accuracy: r.train_accuracy,
    })
}

#[pyclass(name = "Bundle", module = "delta_uq_py", frozen)]
struct PyBundle {
    inner: SpectralBundle,
}

#[pymethods]
impl PyBundle {
    /// Top-K eigenpairs of the regularized Hessian by Lanczos.
    #[staticmethod]
    #[pyo3(signature = (network, params, data, k, seed = 0, tol = 1e-8))]
    fn hessian(
        py: Python<'_>,
        network: &PyNetwork,
        params: Vec<f64>,
        data: &PyDataset,
        k: usize,
        seed: u64,
        tol: f64,
    ) -> PyResult<Self> {
        let w = self::params(&network.inner, params)?;
        let cfg = LanczosConfig {
            seed,
            tol,
            ..LanczosConfig::new(k)
        };
        let inner = py
            .detach(|| spectral::hessian_topk(&network.inner, &w, &data.inner, &cfg))
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Top-K eigenpairs of the regularized outer-product gradient matrix.
    #[staticmethod]
    #[pyo3(signature = (network, params, data, k, block_size = 64))]
    fn opg(
        py: Python<'_>,
        network: &PyNetwork,
        params: Vec<f64>,
        data: &PyDataset,
        k: usize,
        block_size: usize,
    ) -> PyResult<Self> {
        let w = self::params(&network.inner, params)?;
        let cfg = OpgConfig {
            block_size,
            ..OpgConfig::new(k)
        };
        let inner = py
            .detach(|| spectral::opg_topk(&network.inner, &w, &data.inner, &cfg))
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: SpectralBundle::load(&path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: SpectralBundle::from_json(text, "<string>".as_ref()).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind.as_str()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn l2_rate(&self) -> f64 {
        self.inner.l2_rate
    }

    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.inner.eigenvalues.clone()
    }

    #[getter]
    fn lambda_k(&self) -> f64 {
        self.inner.lambda_k()
    }

    /// `(lambda_tilde, eps_lambda)`, or None when `lambda_K <= 0`.
    #[getter]
    fn linearization(&self) -> Option<(f64, f64)> {
        self.inner.linearization
    }

    fn eigenvector(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.k() {
            return Err(PyValueError::new_err(format!("index {i} out of range")));
        }
        Ok(self.inner.eigenvectors.column(i).iter().copied().collect())
    }

    fn orthonormality_error(&self) -> f64 {
        self.inner.orthonormality_error()
    }

    fn __repr__(&self) -> String {
        format!(
            "Bundle(kind={}, k={}, param_count={}, lambda_k={:e})",
            self.inner.kind.as_str(),
            self.inner.k(),
            self.inner.param_count(),
            self.inner.lambda_k()
        )
    }
}

#[pyclass(name = "Report", module = "delta_uq_py", frozen)]
struct PyReport {
    inner: UncertaintyReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn input_id(&self) -> usize {
        self.inner.input_id
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind.as_str()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    #[getter]
    fn variance(&self) -> Vec<f64> {
        self.inner.variance.clone()
    }

    #[getter]
    fn delta(&self) -> Vec<f64> {
        self.inner.delta.clone()
    }

    #[getter]
    fn sigma(&self) -> Vec<f64> {
        self.inner.sigma.clone()
    }

    #[getter]
    fn epsilon(&self) -> Vec<f64> {
        self.inner.epsilon.clone()
    }

    #[getter]
    fn score(&self) -> f64 {
        self.inner.score
    }

    #[getter]
    fn score_error(&self) -> f64 {
        self.inner.score_error
    }

    #[getter]
    fn flags(&self) -> String {
        self.inner.flags.encode()
    }

    fn __repr__(&self) -> String {
        format!(
            "Report(input_id={}, kind={}, k={}, score={:e}, score_error={:e})",
            self.inner.input_id,
            self.inner.kind.as_str(),
            self.inner.k,
            self.inner.score,
            self.inner.score_error
        )
    }
}

/// Hessian or OPG uncertainty of one input, depending on the bundle kind.
#[pyfunction]
#[pyo3(signature = (network, params, x, bundle, input_id = 0))]
fn predict_uncertainty(
    network: &PyNetwork,
    params: Vec<f64>,
    x: Vec<f64>,
    bundle: &PyBundle,
    input_id: usize,
) -> PyResult<PyReport> {
    let w = self::params(&network.inner, params)?;
    let f = network.inner.sensitivity(&w, &x, input_id).map_err(to_py)?;
    Ok(PyReport {
        inner: delta::predict_uncertainty(&bundle.inner, &f).map_err(to_py)?,
    })
}

/// Sandwich uncertainty of one input from a Hessian and an OPG bundle.
#[pyfunction]
#[pyo3(signature = (network, params, x, hessian, opg, input_id = 0))]
fn predict_uncertainty_sandwich(
    network: &PyNetwork,
    params: Vec<f64>,
    x: Vec<f64>,
    hessian: &PyBundle,
    opg: &PyBundle,
    input_id: usize,
) -> PyResult<PyReport> {
    let w = self::params(&network.inner, params)?;
    let f = network.inner.sensitivity(&w, &x, input_id).map_err(to_py)?;
    let cross = SandwichCross::new(&hessian.inner, &opg.inner).map_err(to_py)?;
    let r = delta::predict_uncertainty_sandwich(&hessian.inner, &opg.inner, &cross, &f).map_err(to_py)?;
    Ok(PyReport { inner: r })
}

/// `(id, score, rank)` triples ordered by score, ties broken by id.
#[pyfunction]
#[pyo3(signature = (reports, descending = true, top = None))]
fn rank(reports: Vec<PyRef<'_, PyReport>>, descending: bool, top: Option<usize>) -> Vec<(usize, f64, usize)> {
    let reports: Vec<UncertaintyReport> = reports.iter().map(|r| r.inner.clone()).collect();
    let order = if descending { RankOrder::Desc } else { RankOrder::Asc };
    delta::rank_by_score(&reports, order, top)
        .into_iter()
        .map(|e| (e.id, e.score, e.rank))
        .collect()
}

#[pyfunction]
fn save_checkpoint(network: &PyNetwork, params: Vec<f64>, seed: u64, path: PathBuf) -> PyResult<()> {
    let w = self::params(&network.inner, params)?;
    let ck = Checkpoint::new(network.inner.config().clone(), seed, w).map_err(to_py)?;
    ck.save(&path).map_err(to_py)
}

/// `(network, params, seed)` from a checkpoint file.
#[pyfunction]
fn load_checkpoint(path: PathBuf) -> PyResult<(PyNetwork, Vec<f64>, u64)> {
    let ck = Checkpoint::load(&path).map_err(to_py)?;
    let inner = Network::new(ck.network).map_err(to_py)?;
    Ok((PyNetwork { inner }, ck.params.into_vec(), ck.seed))
}

#[pymodule]
fn delta_uq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_class::<PyBundle>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(predict_uncertainty, m)?)?;
    m.add_function(wrap_pyfunction!(predict_uncertainty_sandwich, m)?)?;
    m.add_function(wrap_pyfunction!(rank, m)?)?;
    m.add_function(wrap_pyfunction!(save_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(load_checkpoint, m)?)?;
    Ok(())
}
