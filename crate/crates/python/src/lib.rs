//! Python bindings: configs, tensors, the bridge kernel, bound calculators,
//! the verification suite and checkpoint-backed rollout / ensemble evaluation.

use std::path::PathBuf;

use flowmarch::analysis::{self, suite, BinGrid, FmErrorModel, OperatorErrorModel, ToyJoint};
use flowmarch::checkpoint::Checkpoint;
use flowmarch::config::Config;
use flowmarch::kernel;
use flowmarch::model::efficiency_ratio as ratio;
use flowmarch::pde::dataset;
use flowmarch::pipeline::{self, Prepared};
use flowmarch::sampler::{ensemble_stats, Integrator, OdeConfig};
use flowmarch::tensor::Tensor;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: flowmarch::Error) -> PyErr {
    match e.exit_code() {
        1 => PyValueError::new_err(e.to_string()),
        3 => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for flowmarch::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

/// Run configuration; defaults for every missing key.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: Config,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        PyConfig { inner: Config::default() }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: Config::from_toml_str(text).py()?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: Config::from_json_str(text).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: Config::load(&path).py()?,
        })
    }

    /// Hex SHA-256 of the canonical JSON form.
    fn hash(&self) -> PyResult<String> {
        self.inner.hash().py()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn latent_side(&self) -> usize {
        self.inner.latent_side()
    }
}

/// Dense f64 tensor, row-major.
#[pyclass(name = "Tensor", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: Tensor::new(shape, data).py()?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn norm(&self) -> f64 {
        self.inner.norm()
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn t(x: &PyTensor) -> &Tensor {
    &x.inner
}

/// Bridge sample `x_t = mu_t + sigma_t z` and its frame-interpolation velocity.
///
/// Returns `(x_t, u)`; `u` is undefined at `t = 1`.
#[pyfunction]
fn bridge(x0: &PyTensor, x1: &PyTensor, time: f64, k: f64, z: &PyTensor) -> PyResult<(PyTensor, Option<PyTensor>)> {
    let s = kernel::bridge_with_noise(t(x0), t(x1), time, k, z.inner.clone()).py()?;
    let u = kernel::velocity_target(&s).ok().map(|v| PyTensor { inner: v.u });
    Ok((PyTensor { inner: s.x_t }, u))
}

/// Preconditioned flow-marching loss of `pred` on one bridge sample.
#[pyfunction]
fn fm_loss(pred: &PyTensor, x0: &PyTensor, x1: &PyTensor, time: f64, k: f64, z: &PyTensor) -> PyResult<f64> {
    let s = kernel::bridge_with_noise(t(x0), t(x1), time, k, z.inner.clone()).py()?;
    kernel::fm_loss(t(pred), &s).py()
}

#[pyfunction]
fn efficiency_ratio(token_side: usize, factors: Vec<usize>) -> f64 {
    ratio(token_side, &factors)
}

#[pyfunction]
#[pyo3(signature = (lipschitz, rho, d_max, n, delta0 = 0.0))]
fn operator_bound(lipschitz: f64, rho: f64, d_max: f64, n: u32, delta0: f64) -> PyResult<f64> {
    let m = OperatorErrorModel {
        lipschitz,
        rho,
        d_max,
        delta0,
    };
    analysis::operator_bound(&m, n).py()
}

fn fm_model(lipschitz: f64, rho: f64, d_max: f64, delta0: f64, eps_time: Option<f64>) -> FmErrorModel {
    FmErrorModel {
        lipschitz,
        rho,
        d_max,
        delta0,
        eps_time,
    }
}

#[pyfunction]
#[pyo3(signature = (lipschitz, rho, d_max, n, delta0 = 0.0, eps_time = None))]
fn fm_bound(lipschitz: f64, rho: f64, d_max: f64, n: u32, delta0: f64, eps_time: Option<f64>) -> PyResult<f64> {
    analysis::fm_bound(&fm_model(lipschitz, rho, d_max, delta0, eps_time), n).py()
}

#[pyfunction]
#[pyo3(signature = (lipschitz, rho, d_max, eps_time = None))]
fn fm_limit(lipschitz: f64, rho: f64, d_max: f64, eps_time: Option<f64>) -> PyResult<f64> {
    analysis::fm_limit(&fm_model(lipschitz, rho, d_max, 0.0, eps_time)).py()
}

/// Posterior-mean oracle on a single `(x0, x1)` pair; returns the report fields as a dict.
#[pyfunction]
#[pyo3(signature = (x0, x1, k, samples, min_count = 1000, seed = 0))]
fn posterior_mean_oracle<'py>(
    py: Python<'py>,
    x0: f64,
    x1: f64,
    k: f64,
    samples: usize,
    min_count: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let r = analysis::posterior_mean_oracle(&ToyJoint::single(x0, x1), k, &BinGrid::default(), samples, min_count, seed)
        .py()?;
    let d = PyDict::new(py);
    d.set_item("max_sigma", r.max_sigma)?;
    d.set_item("checked_bins", r.checked_bins)?;
    d.set_item("sparse_bins", r.sparse_bins)?;
    d.set_item("empty_bins", r.empty_bins)?;
    d.set_item("estimator_gap", r.estimator_gap)?;
    Ok(d)
}

/// Every verification check as `(name, pass, value, tolerance)`.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn verify(config: Option<&PyConfig>) -> PyResult<Vec<(String, bool, f64, f64)>> {
    let cfg = config.map(|c| c.inner.analysis.clone()).unwrap_or_default();
    let checks = suite::verify_suite(&cfg).py()?;
    Ok(checks.into_iter().map(|c| (c.name, c.pass, c.value, c.tolerance)).collect())
}

/// `(count, states, [channels, height, width])` of an FMDS file.
#[pyfunction]
fn dataset_info(path: PathBuf) -> PyResult<(usize, usize, Vec<usize>)> {
    let h = dataset::read_header(&path).py()?;
    Ok((h.count, h.states, h.grid.shape().to_vec()))
}

/// A trained flow model and its autoencoder, with the dataset it is evaluated on.
#[pyclass(name = "Pipeline")]
pub struct PyPipeline {
    cfg: Config,
    data: Prepared,
    model: flowmarch::model::FlowModel,
    vae: flowmarch::vae::Vae,
}

#[pymethods]
impl PyPipeline {
    /// `data_dir` is a `gen-data` output directory; `ckpt` an fmt or finetune checkpoint.
    #[new]
    fn new(config: &PyConfig, data_dir: PathBuf, ckpt: PathBuf) -> PyResult<Self> {
        let cfg = config.inner.clone();
        let data = Prepared::from_dir(&data_dir).py()?;
        let ck = Checkpoint::load(&ckpt).py()?;
        Ok(PyPipeline {
            model: pipeline::load_flow(&cfg, &ck).py()?,
            vae: pipeline::load_vae(&cfg, &ck).py()?,
            cfg,
            data,
        })
    }

    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    /// Mean L2RE per rollout step over the test split.
    #[pyo3(signature = (operator = false, eta = None))]
    fn rollout(&self, operator: bool, eta: Option<f64>) -> PyResult<Vec<f64>> {
        let s = &self.cfg.sample;
        let test = self.data.test();
        let trajs = &test[..test.len().min(s.rollout_trajectories)];
        let integ = if operator {
            Integrator::Ode(OdeConfig { steps: 1 })
        } else {
            pipeline::integrator(&self.cfg, eta.unwrap_or(s.eta))
        };
        let spec = self.cfg.pyramid();
        let r = pipeline::evaluate_rollout(&self.model, &spec, &self.vae, &self.data.norm, trajs, s.horizon, &integ, s.seed)
            .py()?;
        Ok(r.l2re)
    }

    /// Decoded next-state ensemble for one test trajectory; returns `(members, mean_variance)`.
    #[pyo3(signature = (trajectory = 0, members = None, k3 = None, eta = None))]
    fn ensemble(
        &self,
        trajectory: usize,
        members: Option<usize>,
        k3: Option<f64>,
        eta: Option<f64>,
    ) -> PyResult<(Vec<PyTensor>, f64)> {
        let s = &self.cfg.sample;
        let traj = self
            .data
            .test()
            .get(trajectory)
            .ok_or_else(|| PyValueError::new_err("trajectory index out of range"))?;
        let integ = pipeline::integrator(&self.cfg, eta.unwrap_or(s.eta));
        let out = pipeline::ensemble(
            &self.model,
            &self.cfg.pyramid(),
            &self.vae,
            &self.data.norm,
            traj,
            0,
            members.unwrap_or(s.ensemble_size),
            k3.unwrap_or(s.k3),
            &integ,
            s.seed,
        )
        .py()?;
        let var = ensemble_stats(&out).py()?.mean_variance;
        Ok((out.into_iter().map(|inner| PyTensor { inner }).collect(), var))
    }
}

#[pymodule]
fn flowmarch_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(bridge, m)?)?;
    m.add_function(wrap_pyfunction!(fm_loss, m)?)?;
    m.add_function(wrap_pyfunction!(efficiency_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(operator_bound, m)?)?;
    m.add_function(wrap_pyfunction!(fm_bound, m)?)?;
    m.add_function(wrap_pyfunction!(fm_limit, m)?)?;
    m.add_function(wrap_pyfunction!(posterior_mean_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_info, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
