//! Python bindings: `import imbforge`.
//!
//! Matrices cross the boundary as lists of row lists.

use imbforge_core::config::Config;
use imbforge_core::data::{self, ImbalanceMode};
use imbforge_core::encoding::{self, ClassCounts, EncodingMode};
use imbforge_core::losses::{self, LossKind};
use imbforge_core::{metrics, trainer, Matrix};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Rows = Vec<Vec<f64>>;

fn err(e: imbforge_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_matrix(rows: &Rows) -> PyResult<Matrix> {
    Matrix::from_rows(rows).map_err(err)
}

fn to_rows(m: &Matrix) -> Rows {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

fn parse_mode(mode: &str) -> PyResult<EncodingMode> {
    mode.parse().map_err(err)
}

#[pyclass(name = "GeneratorState", module = "imbforge")]
struct PyGenerator(encoding::GeneratorState);

#[pymethods]
impl PyGenerator {
    #[new]
    #[pyo3(signature = (num_classes, mu = 0.5, epsilon = 0.5, mode = "full"))]
    fn new(num_classes: usize, mu: f64, epsilon: f64, mode: &str) -> PyResult<Self> {
        encoding::GeneratorState::new(num_classes, mu, epsilon, parse_mode(mode)?)
            .map(Self)
            .map_err(err)
    }

    /// One step towards `I − ε·C`.
    fn update(&mut self, cost: Rows) -> PyResult<()> {
        self.0.update(&to_matrix(&cost)?).map_err(err)
    }

    /// `L·G` for one-hot rows `L`.
    fn encode(&self, labels_onehot: Rows) -> PyResult<Rows> {
        encoding::encode_labels(&to_matrix(&labels_onehot)?, &self.0)
            .map(|m| to_rows(&m))
            .map_err(err)
    }

    #[getter]
    fn matrix(&self) -> Rows {
        to_rows(self.0.matrix())
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.0.mode().as_str()
    }

    fn __repr__(&self) -> String {
        format!(
            "GeneratorState(num_classes={}, mu={}, epsilon={}, mode={:?})",
            self.0.num_classes(),
            self.0.mu(),
            self.0.epsilon(),
            self.0.mode().as_str()
        )
    }
}

#[pyclass(name = "Dataset", module = "imbforge")]
struct PyDataset(data::Dataset);

#[pymethods]
impl PyDataset {
    #[new]
    fn new(features: Rows, labels: Vec<usize>, num_classes: usize) -> PyResult<Self> {
        data::Dataset::new(to_matrix(&features)?, labels, num_classes)
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn features(&self) -> Rows {
        to_rows(&self.0.features)
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.0.labels.clone()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes
    }

    fn counts(&self) -> Vec<usize> {
        self.0.counts().0
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "Network", module = "imbforge")]
struct PyNetwork(imbforge_core::NetworkParams);

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (layer_sizes, seed = 0, batch_norm = true))]
    fn new(layer_sizes: Vec<usize>, seed: u64, batch_norm: bool) -> PyResult<Self> {
        imbforge_core::NetworkParams::init(&layer_sizes, seed, batch_norm)
            .map(Self)
            .map_err(err)
    }

    /// Inference-mode softmax outputs.
    fn predict(&self, x: Rows) -> PyResult<Rows> {
        self.0
            .predict(&to_matrix(&x)?)
            .map(|m| to_rows(&m))
            .map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        imbforge_core::NetworkParams::load(path)
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }
}

#[pyfunction]
fn one_hot(classes: Vec<usize>, num_classes: usize) -> PyResult<Rows> {
    encoding::one_hot(&classes, num_classes)
        .map(|m| to_rows(&m))
        .map_err(err)
}

#[pyfunction]
fn soft_confusion_matrix(labels_onehot: Rows, outputs: Rows) -> PyResult<Rows> {
    encoding::soft_confusion_matrix(&to_matrix(&labels_onehot)?, &to_matrix(&outputs)?)
        .map(|m| to_rows(&m))
        .map_err(err)
}

#[pyfunction]
fn normalize_scm(scm: Rows, counts: Vec<usize>) -> PyResult<Rows> {
    encoding::normalize_scm(&to_matrix(&scm)?, &ClassCounts(counts))
        .map(|m| to_rows(&m))
        .map_err(err)
}

#[pyfunction]
fn cost_matrix(scm_normalized: Rows) -> PyResult<Rows> {
    encoding::cost_matrix(&to_matrix(&scm_normalized)?)
        .map(|m| to_rows(&m))
        .map_err(err)
}

#[pyfunction]
fn softmax(logits: Rows) -> PyResult<Rows> {
    Ok(to_rows(&losses::softmax(&to_matrix(&logits)?)))
}

fn loss_kind(name: &str, gamma: f64, alpha: Option<Vec<f64>>) -> PyResult<LossKind> {
    match name {
        "cross_entropy" => Ok(LossKind::CrossEntropy),
        "mse" => Ok(LossKind::Mse),
        "focal" => Ok(LossKind::Focal { gamma, alpha }),
        other => Err(PyValueError::new_err(format!("unknown loss {other:?}"))),
    }
}

/// Mean batch loss.
#[pyfunction]
#[pyo3(signature = (name, labels, outputs, gamma = 2.0, alpha = None))]
fn loss(
    name: &str,
    labels: Rows,
    outputs: Rows,
    gamma: f64,
    alpha: Option<Vec<f64>>,
) -> PyResult<f64> {
    loss_kind(name, gamma, alpha)?
        .value(&to_matrix(&labels)?, &to_matrix(&outputs)?)
        .map_err(err)
}

/// Per-instance gradient with respect to the pre-softmax logits.
#[pyfunction]
#[pyo3(signature = (name, labels, outputs, gamma = 2.0, alpha = None))]
fn loss_grad_logits(
    name: &str,
    labels: Rows,
    outputs: Rows,
    gamma: f64,
    alpha: Option<Vec<f64>>,
) -> PyResult<Rows> {
    loss_kind(name, gamma, alpha)?
        .grad_logits(&to_matrix(&labels)?, &to_matrix(&outputs)?)
        .map(|m| to_rows(&m))
        .map_err(err)
}

#[pyfunction]
fn imbalance_divisor(class_index: usize, mode: &str) -> PyResult<f64> {
    let mode: ImbalanceMode = mode.parse().map_err(err)?;
    data::imbalance_divisor(class_index, mode).map_err(err)
}

#[pyfunction]
fn imbalance_factor(counts: Vec<usize>) -> PyResult<f64> {
    data::imbalance_factor(&ClassCounts(counts)).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (seed, counts, dims = 2, separation = 4.0))]
fn gen_blobs(seed: u64, counts: Vec<usize>, dims: usize, separation: f64) -> PyResult<PyDataset> {
    data::gen_blobs(seed, &counts, dims, separation)
        .map(PyDataset)
        .map_err(err)
}

#[pyfunction]
fn top_k_accuracy(outputs: Rows, labels: Vec<usize>, k: usize) -> PyResult<f64> {
    metrics::top_k_accuracy(&to_matrix(&outputs)?, &labels, k).map_err(err)
}

#[pyfunction]
fn minority_classes(train_counts: Vec<usize>, n_min: usize) -> PyResult<Vec<usize>> {
    metrics::minority_classes(&ClassCounts(train_counts), n_min).map_err(err)
}

#[pyfunction]
fn minority_accuracy(outputs: Rows, labels: Vec<usize>, minority: Vec<usize>) -> PyResult<f64> {
    metrics::minority_accuracy(&to_matrix(&outputs)?, &labels, &minority).map_err(err)
}

/// Trains with settings given as a TOML string in the config-file schema.
/// Returns the network and one dict per epoch.
#[pyfunction]
#[pyo3(signature = (train_set, val_set, config = ""))]
fn train<'py>(
    py: Python<'py>,
    train_set: &PyDataset,
    val_set: &PyDataset,
    config: &str,
) -> PyResult<(PyNetwork, Vec<Bound<'py, PyDict>>)> {
    let cfg = Config::from_toml(config).map_err(err)?;
    let (params, history) =
        trainer::train(&cfg.train_config(), &train_set.0, &val_set.0).map_err(err)?;
    let mut records = Vec::with_capacity(history.len());
    for rec in &history.epochs {
        let d = PyDict::new(py);
        d.set_item("epoch", rec.epoch)?;
        d.set_item("train_loss", rec.train_loss)?;
        d.set_item("val_top1", rec.val_top1)?;
        d.set_item("val_scm", to_rows(&rec.val_scm))?;
        d.set_item("generator", to_rows(&rec.generator))?;
        records.push(d);
    }
    Ok((PyNetwork(params), records))
}

#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    network: &PyNetwork,
    test_set: &PyDataset,
    minority: Vec<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let m = trainer::evaluate(&network.0, &test_set.0, &minority).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("top1", m.top1)?;
    d.set_item("top5", *m.topk.values().last().unwrap())?;
    d.set_item("minority_top1", m.minority_top1)?;
    d.set_item("minority_classes", m.minority_classes)?;
    d.set_item("scm_normalized", to_rows(&m.scm_normalized))?;
    d.set_item("per_class_recall", m.per_class_recall)?;
    Ok(d)
}

#[pymodule]
fn imbforge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGenerator>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(one_hot, m)?)?;
    m.add_function(wrap_pyfunction!(soft_confusion_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_scm, m)?)?;
    m.add_function(wrap_pyfunction!(cost_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(loss_grad_logits, m)?)?;
    m.add_function(wrap_pyfunction!(imbalance_divisor, m)?)?;
    m.add_function(wrap_pyfunction!(imbalance_factor, m)?)?;
    m.add_function(wrap_pyfunction!(gen_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(top_k_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(minority_classes, m)?)?;
    m.add_function(wrap_pyfunction!(minority_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
