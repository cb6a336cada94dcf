//! Python bindings. Arrays cross the boundary as lists of rows and reports as
//! dicts.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use dsamp_core::energies::{build_energy, EnergyKind, EnergySpec, DEFAULT_CONSTRUCTION_SEED};
use dsamp_core::grad::Checkpoint;
use dsamp_core::kernels::{sample_forward, ForwardOptions};
use dsamp_core::metrics;
use dsamp_core::ndarray::Array2;
use dsamp_core::objectives::Method;
use dsamp_core::policy::SamplerModel;
use dsamp_core::rng::{stream, streams};
use dsamp_core::schedule::{Schedule, ScheduleKind};
use dsamp_core::trainer::{self, load_checkpoint, model_checkpoint, TrainConfig};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_array(rows: Vec<Vec<f64>>, dim: usize) -> PyResult<Array2<f64>> {
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(err(format!("expected rows of length {dim}, got {}", r.len())));
    }
    Array2::from_shape_vec((rows.len(), dim), rows.concat()).map_err(err)
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<PyObject> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any().unbind(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(xs) => {
            let items = xs.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any().unbind()
        }
        Value::Object(m) => {
            let d = PyDict::new(py);
            for (k, x) in m {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any().unbind()
        }
    })
}

fn serialize(py: Python<'_>, v: &impl serde::Serialize) -> PyResult<PyObject> {
    to_py(py, &serde_json::to_value(v).map_err(err)?)
}

/// A target density `exp(-E(x)) / Z`.
#[pyclass(name = "Energy", module = "dsamp")]
struct PyEnergy {
    spec: EnergySpec,
}

#[pymethods]
impl PyEnergy {
    #[new]
    #[pyo3(signature = (name, construction_seed = DEFAULT_CONSTRUCTION_SEED))]
    fn new(name: &str, construction_seed: u64) -> PyResult<Self> {
        let kind: EnergyKind = name.parse().map_err(err)?;
        Ok(Self { spec: build_energy(kind, construction_seed) })
    }

    #[getter]
    fn name(&self) -> String {
        self.spec.kind.to_string()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn log_partition(&self) -> f64 {
        self.spec.log_partition()
    }

    /// Energies of the given points.
    fn energy(&self, xs: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        Ok(self.spec.energy_batch(&to_array(xs, self.spec.dim)?).to_vec())
    }

    /// Gradients of the energy at the given points.
    fn grad(&self, xs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&self.spec.energy_and_grad_batch(&to_array(xs, self.spec.dim)?).1))
    }

    /// Exact samples from the target.
    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&self.spec.sample_ground_truth(n, seed).map_err(err)?))
    }

    fn __repr__(&self) -> String {
        format!("Energy({:?}, dim={})", self.spec.kind.name(), self.spec.dim)
    }
}

/// Training configuration; see `TrainConfig.preset`.
#[pyclass(name = "TrainConfig", module = "dsamp")]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[staticmethod]
    #[pyo3(signature = (energy, steps, method = "tb-both"))]
    fn preset(energy: &str, steps: usize, method: &str) -> PyResult<Self> {
        let kind: EnergyKind = energy.parse().map_err(err)?;
        let method: Method = method.parse().map_err(err)?;
        Ok(Self { inner: trainer::preset(kind, steps, method) })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self { inner: TrainConfig::from_toml(text).map_err(err)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    /// Applies `key=value` overrides, e.g. `cfg.set("iterations=100", "net.hidden=32")`.
    #[pyo3(signature = (*assignments))]
    fn set(&mut self, assignments: Vec<String>) -> PyResult<()> {
        for a in &assignments {
            self.inner.set(a).map_err(err)?;
        }
        Ok(())
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<PyObject> {
        serialize(py, &self.inner)
    }

    #[getter]
    fn energy(&self) -> String {
        self.inner.energy.to_string()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps
    }

    #[getter]
    fn method(&self) -> String {
        self.inner.method.to_string()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({} T={} {} seed={})", self.inner.energy, self.inner.steps, self.inner.method, self.inner.seed)
    }
}

/// A generation/destruction model with its energy and schedule.
#[pyclass(name = "Sampler", module = "dsamp")]
struct PySampler {
    config: TrainConfig,
    model: SamplerModel,
    energy: EnergySpec,
    schedule: Schedule,
    iter: usize,
}

impl PySampler {
    fn from_parts(config: TrainConfig, model: SamplerModel, iter: usize) -> PyResult<Self> {
        let energy = build_energy(config.energy, config.construction_seed);
        let schedule = Schedule::new(config.schedule, config.steps).map_err(err)?;
        Ok(Self { config, model, energy, schedule, iter })
    }
}

#[pymethods]
impl PySampler {
    /// Untrained sampler for `config`.
    #[new]
    fn new(config: &PyTrainConfig) -> PyResult<Self> {
        let c = config.inner.clone();
        c.validate().map_err(err)?;
        let model = SamplerModel::new(c.net_config(), c.seed).map_err(err)?;
        Self::from_parts(c, model, 0)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::read(std::path::Path::new(path)).map_err(err)?;
        let iter = ck.meta["iter"].as_u64().unwrap_or(0) as usize;
        let (config, model) = load_checkpoint(&ck).map_err(err)?;
        Self::from_parts(config, model, iter)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model_checkpoint(&self.config, &self.model, self.iter).write(std::path::Path::new(path)).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyTrainConfig {
        PyTrainConfig { inner: self.config.clone() }
    }

    #[getter]
    fn log_z(&self) -> f64 {
        self.model.log_z()
    }

    /// Terminal states of `n` generated trajectories.
    #[pyo3(signature = (n, seed = 0))]
    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let opts = ForwardOptions { sigma2: self.config.sigma2, explore: 0.0, record_noise: false };
        let mut rng = stream(seed, streams::EVAL);
        let batch = sample_forward(&self.model, &self.energy, &self.schedule, opts, n, &mut rng).map_err(err)?;
        Ok(to_rows(batch.terminal()))
    }

    /// ELBO, EUBO and optionally the 2-Wasserstein distance, as a dict.
    #[pyo3(signature = (n = 2048, seed = 0, w2 = true))]
    fn evaluate(&self, py: Python<'_>, n: usize, seed: u64, w2: bool) -> PyResult<PyObject> {
        let ev = metrics::evaluate(&self.model, &self.energy, &self.schedule, self.config.sigma2, n, seed, w2)
            .map_err(err)?;
        serialize(py, &ev.report)
    }
}

/// Trains `config` and returns `(sampler, result)`; `result` holds the
/// status, the final metrics and one record per evaluation. `callback`, if
/// given, receives each record as it is produced.
#[pyfunction]
#[pyo3(signature = (config, callback = None))]
fn train(py: Python<'_>, config: &PyTrainConfig, callback: Option<PyObject>) -> PyResult<(PySampler, PyObject)> {
    let mut cb_err = None;
    let outcome = trainer::train(config.inner.clone(), &mut |rec| {
        if let Some(cb) = &callback {
            if cb_err.is_none() {
                if let Err(e) = serialize(py, rec).and_then(|r| cb.call1(py, (r,))) {
                    cb_err = Some(e);
                }
            }
        }
    })
    .map_err(err)?;
    if let Some(e) = cb_err {
        return Err(e);
    }
    let result = serde_json::json!({
        "status": outcome.status,
        "reason": outcome.reason,
        "final_metrics": outcome.final_metrics,
        "records": outcome.records,
        "counters": outcome.state.counters,
    });
    let state = outcome.state;
    let sampler = PySampler::from_parts(state.config, state.model, state.iter)?;
    Ok((sampler, to_py(py, &result)?))
}

/// Time grid `0 = t_0 < ... < t_T = 1` of a schedule.
#[pyfunction]
fn schedule(kind: &str, steps: usize) -> PyResult<Vec<f64>> {
    let kind: ScheduleKind = kind.parse().map_err(err)?;
    Ok(Schedule::new(kind, steps).map_err(err)?.times)
}

/// 2-Wasserstein distance between two equal-size point sets.
#[pyfunction]
fn wasserstein2(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let d = a.first().map_or(0, Vec::len);
    metrics::wasserstein2(&to_array(a, d)?, &to_array(b, d)?).map_err(err)
}

#[pyfunction]
fn energies() -> Vec<&'static str> {
    EnergyKind::ALL.iter().map(|k| k.name()).collect()
}

#[pyfunction]
fn methods() -> Vec<&'static str> {
    Method::ALL.iter().map(|m| m.name()).collect()
}

#[pymodule]
fn dsamp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEnergy>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PySampler>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein2, m)?)?;
    m.add_function(wrap_pyfunction!(energies, m)?)?;
    m.add_function(wrap_pyfunction!(methods, m)?)?;
    Ok(())
}
