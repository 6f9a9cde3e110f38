//! Python bindings: dataset generation, models, training, metrics and the
//! benchmark/verify front-ends.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use weakstrong::cli::{self, BenchmarkTable, ExperimentConfig};
use weakstrong::evalmetrics::{self, holdout_split};
use weakstrong::model::{self, ModelConfig, ModelParams};
use weakstrong::numerics::{Rng, Tensor2D};
use weakstrong::schemes::{self, train_run, TrainData};
use weakstrong::synthdata::{self, GenConfig};

create_exception!(weakstrong, WeakStrongError, PyException);

fn err(e: weakstrong::Error) -> PyErr {
    match e {
        weakstrong::Error::Config(_) | weakstrong::Error::Parameter(_) | weakstrong::Error::Dimension(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => WeakStrongError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor2D> {
    Tensor2D::from_rows(&rows).map_err(err)
}

fn to_rows(t: &Tensor2D) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn parse_config(toml: &str) -> PyResult<ExperimentConfig> {
    ExperimentConfig::from_toml_str(toml).map_err(err)
}

/// Generated corpus of weak bags and strong instances.
#[pyclass(name = "Dataset", module = "weakstrong")]
struct PyDataset {
    inner: synthdata::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Generate with default settings except the given seed and sizes.
    #[staticmethod]
    #[pyo3(signature = (seed, n_bags=None, instances_per_bag=None, n_strong=None))]
    fn generate(seed: u64, n_bags: Option<usize>, instances_per_bag: Option<usize>, n_strong: Option<usize>) -> PyResult<Self> {
        let d = GenConfig::default();
        let gen = GenConfig {
            seed,
            n_bags: n_bags.unwrap_or(d.n_bags),
            instances_per_bag: instances_per_bag.unwrap_or(d.instances_per_bag),
            n_strong: n_strong.unwrap_or(d.n_strong),
            ..d
        };
        gen.validate().map_err(err)?;
        Ok(PyDataset {
            inner: synthdata::Dataset::generate(&gen).map_err(err)?,
        })
    }

    /// Generate from the `[gen]` section of an experiment config.
    #[staticmethod]
    fn from_config(toml: &str) -> PyResult<Self> {
        let cfg = parse_config(toml)?;
        Ok(PyDataset {
            inner: synthdata::Dataset::generate(&cfg.gen).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: synthdata::load_dataset(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        synthdata::save_dataset(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.gen.seed
    }

    #[getter]
    fn n_bags(&self) -> usize {
        self.inner.weak.len()
    }

    #[getter]
    fn n_strong(&self) -> usize {
        self.inner.strong.len()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.gen.input_dim
    }

    /// Feature rows of bag `i`.
    fn bag_features(&self, i: usize) -> PyResult<Vec<Vec<f64>>> {
        let bag = self
            .inner
            .weak
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("bag {i} of {}", self.inner.weak.len())))?;
        Ok(bag.instances.iter().map(|x| x.features.clone()).collect())
    }

    /// Per-bag `(bag_id, gleason_score, weak_label)` with labels "low"/"high".
    fn bags(&self) -> Vec<(u64, u8, &'static str)> {
        self.inner
            .weak
            .iter()
            .map(|b| (b.bag_id, b.gleason_score, b.weak_label.name()))
            .collect()
    }

    /// Strong instances as `(features, label)`, label 0 = low, 1 = high.
    fn strong(&self) -> Vec<(Vec<f64>, usize)> {
        self.inner
            .strong
            .iter()
            .filter_map(|i| i.strong_label.map(|l| (i.features.clone(), l.class_index())))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(seed={}, n_bags={}, n_strong={})",
            self.inner.gen.seed,
            self.inner.weak.len(),
            self.inner.strong.len()
        )
    }
}

/// Feed-forward classifier parameters.
#[pyclass(name = "Model", module = "weakstrong")]
struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (input_dim, hidden_dims=vec![32, 16], num_classes=2, seed=0))]
    fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig {
            input_dim,
            hidden_dims,
            num_classes,
            domain_head: false,
        };
        Ok(PyModel {
            inner: ModelParams::init(&cfg, &mut Rng::new(seed)).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: ModelParams::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn tensor_names(&self) -> Vec<String> {
        self.inner.tensor_names()
    }

    fn predict_proba(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let t = model::forward(&self.inner, &matrix(x)?).map_err(err)?;
        Ok(to_rows(&t.probs))
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        Ok(model::forward(&self.inner, &matrix(x)?).map_err(err)?.predictions())
    }

    /// Fraction of the rows predicted high-grade.
    fn slide_score(&self, x: Vec<Vec<f64>>) -> PyResult<f64> {
        let preds = self.predict(x)?;
        if preds.is_empty() {
            return Err(PyValueError::new_err("empty slide"));
        }
        Ok(preds.iter().filter(|&&k| k == 1).count() as f64 / preds.len() as f64)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(input_dim={}, hidden_dims={:?}, num_classes={})",
            c.input_dim, c.hidden_dims, c.num_classes
        )
    }
}

/// Train on an 80/20 bag split as the `train` subcommand does. Returns the
/// best model and the per-epoch history as dicts.
#[pyfunction]
#[pyo3(signature = (config_toml, dataset=None))]
fn train(py: Python<'_>, config_toml: &str, dataset: Option<&PyDataset>) -> PyResult<(PyModel, Vec<Py<PyAny>>)> {
    let cfg = parse_config(config_toml)?;
    let generated;
    let ds = match dataset {
        Some(d) => &d.inner,
        None => {
            generated = synthdata::Dataset::generate(&cfg.gen).map_err(err)?;
            &generated
        }
    };
    let labels: Vec<usize> = ds.weak.iter().map(|b| b.weak_label.class_index()).collect();
    let (tr, ho) = holdout_split(&labels, cfg.cv.holdout_fraction, cfg.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| &ds.weak[i]).collect::<Vec<_>>();
    let data = TrainData::from_parts(&ds.strong, &pick(&tr), &pick(&ho), ds.gen.input_dim).map_err(err)?;
    let out = py
        .detach(|| train_run(&data, &cfg.model, &cfg.scheme, &cfg.shift, &cfg.stop(), cfg.seed))
        .map_err(err)?;
    let history = out
        .history
        .iter()
        .map(|r| {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("strong_loss", r.strong_loss)?;
            d.set_item("weak_loss", r.weak_loss)?;
            d.set_item("penalty", r.penalty)?;
            d.set_item("val_loss", r.val_loss)?;
            d.set_item("mean_confidence", r.mean_confidence)?;
            Ok(d.into_any().unbind())
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((PyModel { inner: out.params }, history))
}

/// Runs a benchmark sweep (`"shift"` or `"integration"`) for a config file and
/// returns the formatted table.
#[pyfunction]
fn benchmark(py: Python<'_>, config_path: PathBuf, table: &str) -> PyResult<String> {
    let table = match table {
        "shift" => BenchmarkTable::Shift,
        "integration" => BenchmarkTable::Integration,
        other => return Err(PyValueError::new_err(format!("unknown table {other:?}"))),
    };
    let cfg = ExperimentConfig::load(&config_path).map_err(err)?;
    py.detach(|| cli::cmd_benchmark(&cfg, &config_path, table)).map_err(err)
}

/// `(name, passed, detail)` for every built-in check.
#[pyfunction]
fn verify(py: Python<'_>) -> Vec<(String, bool, String)> {
    py.detach(|| cli::run_checks(false))
        .into_iter()
        .map(|o| (o.name.to_string(), o.passed, o.detail))
        .collect()
}

/// Worst relative error of backprop against central differences.
#[pyfunction]
#[pyo3(signature = (input_dim, hidden_dims, num_classes=2, seed=0))]
fn grad_check(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize, seed: u64) -> PyResult<f64> {
    let cfg = ModelConfig {
        input_dim,
        hidden_dims,
        num_classes,
        domain_head: false,
    };
    model::grad_check(&cfg, seed).map_err(err)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, positive: Vec<bool>) -> PyResult<f64> {
    evalmetrics::roc_auc(&scores, &positive).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (scores, positive, threshold=0.5))]
fn accuracy(scores: Vec<f64>, positive: Vec<bool>, threshold: f64) -> PyResult<f64> {
    evalmetrics::accuracy(&scores, &positive, threshold).map_err(err)
}

#[pyfunction]
fn kendall_tau_b(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    evalmetrics::kendall_tau_b(&x, &y).map_err(err)
}

#[pyfunction]
fn mil_k(batch_len: usize, fraction: f64) -> usize {
    schemes::mil_k(batch_len, fraction)
}

#[pyfunction]
fn top_k_indices(scores: Vec<f64>, k: usize) -> Vec<usize> {
    schemes::top_k_indices(&scores, k)
}

#[pyfunction]
fn blue_ratio_pixel(rgb: [f64; 3]) -> f64 {
    synthdata::blue_ratio_pixel(rgb)
}

/// The fully commented example experiment config.
#[pyfunction]
fn example_config() -> &'static str {
    cli::EXAMPLE_CONFIG
}

#[pymodule]
fn weakstrong_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(kendall_tau_b, m)?)?;
    m.add_function(wrap_pyfunction!(mil_k, m)?)?;
    m.add_function(wrap_pyfunction!(top_k_indices, m)?)?;
    m.add_function(wrap_pyfunction!(blue_ratio_pixel, m)?)?;
    m.add_function(wrap_pyfunction!(example_config, m)?)?;
    m.add("WeakStrongError", m.py().get_type::<WeakStrongError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
