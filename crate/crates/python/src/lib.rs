//! Python bindings: datasets, the supervised and adversarial models,
//! baseline imputers and the evaluation metrics.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use cpm_nets::baselines::{self, ClassifierRule, ImputerKind, SoftImputeConfig};
use cpm_nets::checkpoint;
use cpm_nets::data::{self, MissingSpec, MultiViewDataset, SynthSpec};
use cpm_nets::gan::{self, GanConfig};
use cpm_nets::metrics;
use cpm_nets::supervised::{self, TrainConfig};
use cpm_nets::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) => PyIOError::new_err(e.to_string()),
        Error::TrainingState(_) | Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("ragged matrix rows"));
    }
    Ok(Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).expect("checked"))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Python value -> JSON via the stdlib encoder.
fn to_json(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Overlays keyword arguments onto a default configuration.
fn configure<T: Serialize + DeserializeOwned>(py: Python<'_>, base: T, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(kwargs) = kwargs else {
        return Ok(base);
    };
    let mut merged = serde_json::to_value(base).expect("configs serialize");
    let target = merged.as_object_mut().expect("configs are objects");
    if let Value::Object(fields) = to_json(py, kwargs.as_any())? {
        for (k, v) in fields {
            if !target.contains_key(&k) {
                return Err(PyValueError::new_err(format!("unknown configuration field {k:?}")));
            }
            target.insert(k, v);
        }
    }
    serde_json::from_value(merged).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyclass(name = "Dataset", module = "pmvl", frozen)]
struct PyDataset {
    inner: MultiViewDataset,
}

#[pymethods]
impl PyDataset {
    /// `views` is a list of row-major matrices; `mask[n][v]` marks view `v`
    /// of sample `n` as available (all available when omitted).
    #[new]
    #[pyo3(signature = (views, mask=None, labels=None))]
    fn new(views: Vec<Vec<Vec<f64>>>, mask: Option<Vec<Vec<bool>>>, labels: Option<Vec<usize>>) -> PyResult<Self> {
        let views = views.into_iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
        let inner = match mask {
            None => MultiViewDataset::complete(views, labels),
            Some(mask) => {
                let n = mask.len();
                let v = mask.first().map_or(0, Vec::len);
                if mask.iter().any(|r| r.len() != v) {
                    return Err(PyValueError::new_err("ragged mask rows"));
                }
                let mask = Array2::from_shape_vec((n, v), mask.into_iter().flatten().collect()).expect("checked");
                MultiViewDataset::new(views, mask, labels, None)
            }
        }
        .map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (n=300, classes=3, source_dim=8, view_dims=vec![20, 20, 20], seed=0))]
    fn synth(n: usize, classes: usize, source_dim: usize, view_dims: Vec<usize>, seed: u64) -> PyResult<Self> {
        let inner = data::synth_dataset_with(&SynthSpec::new(n, classes, source_dim, &view_dims, seed)).map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset { inner: data::load_bundle(&path).map_err(py_err)? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<PathBuf> {
        data::save_bundle(&self.inner, &dir).map_err(py_err)
    }

    /// Copy with `round(eta * V * N)` view entries removed.
    #[pyo3(signature = (eta, seed=0))]
    fn with_missing(&self, eta: f64, seed: u64) -> PyResult<Self> {
        let inner = data::apply_missing_pattern(&self.inner, &MissingSpec { target_rate: eta, seed }).map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    #[pyo3(signature = (train_fraction=0.8, seed=0))]
    fn split(&self, train_fraction: f64, seed: u64) -> PyResult<(Self, Self)> {
        let (a, b) = data::split(&self.inner, train_fraction, seed).map_err(py_err)?;
        Ok((PyDataset { inner: a }, PyDataset { inner: b }))
    }

    fn normalized(&self) -> Self {
        PyDataset { inner: data::normalize(&self.inner) }
    }

    #[getter]
    fn missing_rate(&self) -> f64 {
        data::measured_rate(&self.inner)
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.inner.n_samples()
    }

    #[getter]
    fn view_dims(&self) -> Vec<usize> {
        self.inner.view_dims()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<usize>> {
        self.inner.labels().map(<[usize]>::to_vec)
    }

    #[getter]
    fn mask(&self) -> Vec<Vec<bool>> {
        self.inner.mask().rows().into_iter().map(|r| r.to_vec()).collect()
    }

    fn view(&self, v: usize) -> PyResult<Vec<Vec<f64>>> {
        self.inner
            .views()
            .get(v)
            .map(rows)
            .ok_or_else(|| PyValueError::new_err(format!("no view {v}")))
    }

    fn __len__(&self) -> usize {
        self.inner.n_samples()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n_samples={}, view_dims={:?}, missing_rate={:.4})",
            self.inner.n_samples(),
            self.inner.view_dims(),
            data::measured_rate(&self.inner)
        )
    }
}

/// Latent classifier trained on partially observed views.
#[pyclass(name = "SupervisedModel", module = "pmvl", frozen)]
struct PySupervised {
    inner: supervised::SupervisedModel,
}

#[pymethods]
impl PySupervised {
    /// Keyword arguments override fields of the default training config.
    #[staticmethod]
    #[pyo3(signature = (data, retune=true, **config))]
    fn train(py: Python<'_>, data: &PyDataset, retune: bool, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let config: TrainConfig = configure(py, TrainConfig::default(), config)?;
        let inner = py
            .detach(|| {
                let model = supervised::train(&data.inner, &config)?;
                if retune {
                    supervised::retune(&model, &data.inner)
                } else {
                    Ok(model)
                }
            })
            .map_err(py_err)?;
        Ok(PySupervised { inner })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PySupervised { inner: checkpoint::load_supervised(&dir).map_err(py_err)? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        checkpoint::save_supervised(&self.inner, &dir).map_err(py_err)
    }

    fn predict(&self, py: Python<'_>, data: &PyDataset) -> PyResult<Vec<usize>> {
        Ok(py.detach(|| supervised::predict(&self.inner, &data.inner)).map_err(py_err)?.0)
    }

    /// Accuracy report and predictions as a dict.
    fn evaluate<'py>(&self, py: Python<'py>, data: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
        let eval = py.detach(|| supervised::evaluate(&self.inner, &data.inner)).map_err(py_err)?;
        to_py(py, &eval)
    }

    fn latents(&self) -> Vec<Vec<f64>> {
        rows(self.inner.latent.as_array())
    }

    #[getter]
    fn objective_trace(&self) -> Vec<f64> {
        self.inner.trace.objective.clone()
    }

    #[getter]
    fn retuned(&self) -> bool {
        self.inner.retuned_nets.is_some()
    }
}

/// Unsupervised latent model with per-view discriminators.
#[pyclass(name = "AdversarialModel", module = "pmvl", frozen)]
struct PyAdversarial {
    inner: gan::AdversarialModel,
}

#[pymethods]
impl PyAdversarial {
    #[staticmethod]
    #[pyo3(signature = (data, **config))]
    fn train(py: Python<'_>, data: &PyDataset, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let config: GanConfig = configure(py, GanConfig::default(), config)?;
        let inner = py.detach(|| gan::train_unsupervised(&data.inner, &config)).map_err(py_err)?;
        Ok(PyAdversarial { inner })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyAdversarial { inner: checkpoint::load_adversarial(&dir).map_err(py_err)? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        checkpoint::save_adversarial(&self.inner, &dir).map_err(py_err)
    }

    /// Completed dataset, plus overall NRMSE when `truth` is given.
    #[pyo3(signature = (data, truth=None))]
    fn impute(&self, data: &PyDataset, truth: Option<&PyDataset>) -> PyResult<(PyDataset, Option<f64>)> {
        let out = gan::impute(&self.inner, &data.inner, truth.map(|t| &t.inner)).map_err(py_err)?;
        Ok((PyDataset { inner: out.completed }, out.nrmse.and_then(|r| r.overall)))
    }

    fn latents(&self) -> Vec<Vec<f64>> {
        rows(self.inner.latent.as_array())
    }

    /// k-means on the latents scored against `labels`.
    #[pyo3(signature = (labels, k=None, seed=0, restarts=10))]
    fn cluster<'py>(
        &self,
        py: Python<'py>,
        labels: Vec<usize>,
        k: Option<usize>,
        seed: u64,
        restarts: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let k = k.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
        let report = gan::cluster_latents(&self.inner.latent, &labels, k, seed, restarts).map_err(py_err)?;
        to_py(py, &report)
    }
}

/// Fills missing views with `global_mean`, `class_mean` or `soft_impute`.
#[pyfunction]
#[pyo3(signature = (data, method="global_mean", truth=None, seed=0))]
fn impute_baseline(data: &PyDataset, method: &str, truth: Option<&PyDataset>, seed: u64) -> PyResult<(PyDataset, Option<f64>)> {
    let kind = match method {
        "global_mean" => ImputerKind::GlobalMean,
        "class_mean" => ImputerKind::ClassMean,
        "soft_impute" => ImputerKind::SvdSoftImpute(SoftImputeConfig { seed, ..SoftImputeConfig::default() }),
        other => return Err(PyValueError::new_err(format!("unknown method {other:?}"))),
    };
    let out = baselines::impute_baseline(&data.inner, &kind).map_err(py_err)?;
    let score = match truth {
        Some(t) => metrics::nrmse(out.views(), t.inner.views(), &out.imputed).map_err(py_err)?.overall,
        None => None,
    };
    Ok((PyDataset { inner: out.data }, score))
}

/// Accuracy of a concatenated-feature classifier; `k=None` means nearest
/// centroid.
#[pyfunction]
#[pyo3(signature = (train, test, k=None))]
fn concat_classify(train: &PyDataset, test: &PyDataset, k: Option<usize>) -> PyResult<f64> {
    let rule = k.map_or(ClassifierRule::NearestCentroid, ClassifierRule::Knn);
    Ok(baselines::concat_classify(&train.inner, &test.inner, rule).map_err(py_err)?.accuracy)
}

#[pyfunction]
fn clustering_acc(assignments: Vec<usize>, labels: Vec<usize>) -> PyResult<f64> {
    metrics::clustering_acc(&assignments, &labels).map_err(py_err)
}

#[pyfunction]
fn nmi(assignments: Vec<usize>, labels: Vec<usize>) -> PyResult<f64> {
    metrics::nmi(&assignments, &labels).map_err(py_err)
}

#[pymodule]
fn pmvl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PySupervised>()?;
    m.add_class::<PyAdversarial>()?;
    m.add_function(wrap_pyfunction!(impute_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(concat_classify, m)?)?;
    m.add_function(wrap_pyfunction!(clustering_acc, m)?)?;
    m.add_function(wrap_pyfunction!(nmi, m)?)?;
    Ok(())
}
