//! Python bindings: configs, datasets, pretraining, embeddings and the loss
//! primitives. Vectors cross the boundary as lists of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use prelax::checkpoint::Checkpoint;
use prelax::cli::RunConfig;
use prelax::data::{synthetic_dataset, LabeledDataset, Split, SyntheticScheme};
use prelax::error::Error;
use prelax::eval::{self, EmbeddingTable, Pooling};
use prelax::losses;
use prelax::model::{self, NetworkSet};
use prelax::trainer::{self, MetricsRecord, PretrainOptions};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidConfig { .. } => PyValueError::new_err(e.to_string()),
        Error::Io { .. } | Error::Parse { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_pooling(s: &str) -> PyResult<Pooling> {
    match s {
        "pre_projector" => Ok(Pooling::PreProjector),
        "post_projector" => Ok(Pooling::PostProjector),
        _ => Err(PyValueError::new_err(format!("unknown pooling `{s}`"))),
    }
}

fn parse_split(s: &str) -> PyResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(PyValueError::new_err(format!("unknown split `{s}`"))),
    }
}

/// A full run configuration, as read by the command line tool.
#[pyclass(name = "RunConfig", module = "prelax", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (toml = "", overrides = Vec::new()))]
    fn new(toml: &str, overrides: Vec<String>) -> PyResult<Self> {
        let inner = RunConfig::from_toml_with_overrides(toml, &overrides).map_err(py_err)?;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.train.epochs
    }

    #[getter]
    fn d_z(&self) -> usize {
        self.inner.train.model.d_z
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(variant={:?}, epochs={})", self.inner.train.variant, self.inner.train.epochs)
    }
}

/// Labeled images, channel-major, values in [0, 1].
#[pyclass(name = "Dataset", module = "prelax")]
struct PyDataset {
    inner: LabeledDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (n, classes = 4, size = 32, seed = 0))]
    fn synthetic(n: usize, classes: usize, size: usize, seed: u64) -> PyResult<Self> {
        let inner = synthetic_dataset(n, classes, size, seed, &SyntheticScheme::default()).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Loads the split described by a config's dataset section.
    #[staticmethod]
    #[pyo3(signature = (config, split = "train"))]
    fn from_config(config: &PyRunConfig, split: &str) -> PyResult<Self> {
        let inner = config.inner.dataset.load(parse_split(split)?).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    fn image(&self, i: usize) -> PyResult<Vec<f64>> {
        self.inner
            .images()
            .get(i)
            .map(|im| im.pixels().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("index {i} out of range")))
    }
}

/// Rows of embeddings with ids and optional labels.
#[pyclass(name = "EmbeddingTable", module = "prelax", skip_from_py_object)]
#[derive(Clone)]
struct PyEmbeddingTable {
    inner: EmbeddingTable,
}

#[pymethods]
impl PyEmbeddingTable {
    #[new]
    #[pyo3(signature = (rows, ids = None, labels = None))]
    fn new(rows: Vec<Vec<f64>>, ids: Option<Vec<u64>>, labels: Option<Vec<usize>>) -> PyResult<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(PyValueError::new_err("rows differ in length"));
        }
        let ids = ids.unwrap_or_else(|| (0..rows.len() as u64).collect());
        let inner = EmbeddingTable::new(dim, ids, labels, rows.concat()).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: EmbeddingTable::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn ids(&self) -> Vec<u64> {
        self.inner.ids().to_vec()
    }

    fn row(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("index {i} out of range")));
        }
        Ok(self.inner.row(i).to_vec())
    }

    /// Ids of the `k` rows most cosine-similar to `query`.
    fn knn(&self, query: Vec<f64>, k: usize) -> PyResult<Vec<u64>> {
        eval::knn_retrieve(&query, &self.inner, k).map_err(py_err)
    }
}

/// Online network (and target, under EMA) with its training config.
#[pyclass(name = "Network", module = "prelax")]
struct PyNetwork {
    net: NetworkSet,
    checkpoint: Checkpoint,
}

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let checkpoint = Checkpoint::load(&path).map_err(py_err)?;
        let net = checkpoint.restore().map_err(py_err)?;
        Ok(Self { net, checkpoint })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.checkpoint.save(&path).map_err(py_err)
    }

    #[getter]
    fn d_z(&self) -> usize {
        self.net.config().d_z
    }

    #[pyo3(signature = (data, pooling = "pre_projector"))]
    fn embed(&self, py: Python<'_>, data: &PyDataset, pooling: &str) -> PyResult<PyEmbeddingTable> {
        let pooling = parse_pooling(pooling)?;
        let inner = py
            .detach(|| eval::extract_embeddings(&self.net, &data.inner, pooling))
            .map_err(py_err)?;
        Ok(PyEmbeddingTable { inner })
    }

    /// Accuracy of the rotation head on randomly rotated views of `data`.
    #[pyo3(signature = (config, data, seed = 0))]
    fn rotation_accuracy(&self, config: &PyRunConfig, data: &PyDataset, seed: u64) -> PyResult<f64> {
        eval::rotation_accuracy(&self.net, &data.inner, &config.inner.augment, seed).map_err(py_err)
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &MetricsRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", m.epoch)?;
    d.set_item("step", m.step)?;
    d.set_item("lr", m.lr)?;
    d.set_item("tau", m.tau)?;
    d.set_item("loss", m.loss.total)?;
    d.set_item("residual_norm", m.residual_norm)?;
    d.set_item("active", m.loss.active.names())?;
    Ok(d)
}

/// Trains on the config's dataset. Returns the network and one metrics dict
/// per epoch; with `out_dir` the checkpoint and log are written there too.
#[pyfunction]
#[pyo3(signature = (config, out_dir = None))]
fn pretrain<'py>(
    py: Python<'py>,
    config: &PyRunConfig,
    out_dir: Option<PathBuf>,
) -> PyResult<(PyNetwork, Vec<Bound<'py, PyDict>>)> {
    let cfg = &config.inner;
    let out = py
        .detach(|| {
            let data = cfg.dataset.load(Split::Train)?;
            let opts = PretrainOptions {
                out_dir,
                deterministic: cfg.deterministic,
                ..Default::default()
            };
            trainer::pretrain(&cfg.train, &cfg.augment, &data, &opts)
        })
        .map_err(py_err)?;
    let metrics = out.metrics.iter().map(|m| metrics_dict(py, m)).collect::<PyResult<_>>()?;
    let checkpoint = Checkpoint::capture(&cfg.train, &out.net);
    Ok((PyNetwork { net: out.net, checkpoint }, metrics))
}

/// Test accuracy of a linear classifier trained on frozen embeddings.
#[pyfunction]
fn linear_probe(py: Python<'_>, train: &PyEmbeddingTable, test: &PyEmbeddingTable) -> PyResult<f64> {
    py.detach(|| eval::linear_probe(&train.inner, &test.inner, &eval::ProbeConfig::default()))
        .map_err(py_err)
}

#[pyfunction]
fn sim_loss(p: Vec<f64>, z: Vec<f64>) -> PyResult<f64> {
    losses::sim_loss(&p, &z).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (p, g_r, z, alpha = 1.0))]
fn r2s_loss(p: Vec<f64>, g_r: Vec<f64>, z: Vec<f64>, alpha: f64) -> PyResult<f64> {
    losses::r2s_loss(&p, &g_r, &z, alpha).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (p, z, eta = 0.5))]
fn margin_loss(p: Vec<f64>, z: Vec<f64>, eta: f64) -> PyResult<f64> {
    losses::margin_loss(&p, &z, eta).map_err(py_err)
}

/// Unit-norm copy of `v` and whether the norm was too small to divide by.
#[pyfunction]
fn normalize(v: Vec<f64>) -> (Vec<f64>, bool) {
    let n = losses::normalize(&v);
    (n.vector, n.degenerate)
}

#[pyfunction]
#[pyo3(signature = (step, total, base = 0.996))]
fn tau_schedule(step: usize, total: usize, base: f64) -> PyResult<f64> {
    model::tau_schedule(step, total, base).map_err(py_err)
}

/// Runs the built-in property suites: (suite, name, passed, detail) rows.
#[pyfunction]
fn run_checks(py: Python<'_>) -> Vec<(String, String, bool, String)> {
    py.detach(prelax::checks::run_all)
        .into_iter()
        .map(|c| (c.suite.to_string(), c.name, c.passed, c.detail))
        .collect()
}

#[pymodule]
#[pyo3(name = "prelax")]
fn prelax_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyEmbeddingTable>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(linear_probe, m)?)?;
    m.add_function(wrap_pyfunction!(sim_loss, m)?)?;
    m.add_function(wrap_pyfunction!(r2s_loss, m)?)?;
    m.add_function(wrap_pyfunction!(margin_loss, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(tau_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(run_checks, m)?)?;
    Ok(())
}
