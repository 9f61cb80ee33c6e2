//! Python bindings: synthetic data, training, evaluation, metrics and the
//! memory primitives.
//!
//! Configs are passed as keyword arguments using the same keys as the
//! `key=value` files read by the CLI.

use std::path::PathBuf;
use std::time::Duration;

use lmn_core::bench::{bench_scaling as run_bench, BenchOptions};
use lmn_core::config::parse_key_values;
use lmn_core::ctr::{
    check_model_gradients, evaluate, gradcheck_config, train, CtrModel, EpochReport, GradCheckOptions, RunConfig,
};
use lmn_core::data::{self, generate, load_csv, read_meta, write_dataset, MetricsReport, Sample, SyntheticSpec, Vocab};
use lmn_core::memory::{self, Checkpoint};
use lmn_core::LmnError;
use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList, PyTuple};

create_exception!(
    lmn,
    Error,
    PyValueError,
    "Raised for invalid inputs, configs and files."
);

fn err(e: LmnError) -> PyErr {
    match e {
        LmnError::Io(io) => PyOSError::new_err(io.to_string()),
        other => Error::new_err(other.to_string()),
    }
}

/// Renders keyword arguments as `key=value` lines. Booleans become
/// `true`/`false` and sequences are comma-joined.
fn kwargs_text(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<String> {
    let mut text = String::new();
    let Some(kwargs) = kwargs else {
        return Ok(text);
    };
    for (k, v) in kwargs.iter() {
        let value = if v.is_instance_of::<PyBool>() {
            v.extract::<bool>()?.to_string()
        } else if v.is_instance_of::<PyList>() || v.is_instance_of::<PyTuple>() {
            let parts: Vec<String> = v
                .try_iter()?
                .map(|x| x.and_then(|x| x.str().map(|s| s.to_string())))
                .collect::<PyResult<_>>()?;
            parts.join(",")
        } else {
            v.str()?.to_string()
        };
        text.push_str(&format!("{}={value}\n", k.str()?));
    }
    Ok(text)
}

fn metrics_dict<'py>(py: Python<'py>, m: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("auc", m.auc)?;
    d.set_item("logloss", m.logloss)?;
    d.set_item("auc_imp_pct", m.auc_imp_pct)?;
    d.set_item("logloss_imp_pct", m.logloss_imp_pct)?;
    d.set_item("samples", m.samples)?;
    Ok(d)
}

fn epoch_dict<'py>(py: Python<'py>, e: &EpochReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", e.epoch)?;
    d.set_item("steps", e.steps)?;
    d.set_item("train_logloss", e.train_logloss)?;
    d.set_item("train_memory_loss", e.train_memory_loss)?;
    d.set_item("eval", e.eval.as_ref().map(|m| metrics_dict(py, m)).transpose()?)?;
    Ok(d)
}

/// Train and eval splits plus the id vocabulary they were drawn from.
#[pyclass(module = "lmn", frozen)]
pub struct Dataset {
    train: Vec<Sample>,
    eval: Vec<Sample>,
    vocab: Vocab,
}

impl Dataset {
    fn split(&self, name: &str) -> PyResult<&[Sample]> {
        match name {
            "train" => Ok(&self.train),
            "eval" => Ok(&self.eval),
            other => Err(Error::new_err(format!(
                "unknown split {other:?}; use 'train' or 'eval'"
            ))),
        }
    }
}

#[pymethods]
impl Dataset {
    /// Draws a synthetic dataset; keyword arguments override spec defaults.
    #[staticmethod]
    #[pyo3(signature = (**spec))]
    fn generate(spec: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let spec = SyntheticSpec::parse(&kwargs_text(spec)?).map_err(err)?;
        let data = generate(&spec).map_err(err)?;
        Ok(Dataset {
            vocab: data.vocab(),
            train: data.train,
            eval: data.eval,
        })
    }

    /// Reads a directory written by `gen_data` or `lmn gen-data`.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Dataset {
            vocab: read_meta(&dir).map_err(err)?,
            train: load_csv(&dir.join("train.csv")).map_err(err)?,
            eval: load_csv(&dir.join("eval.csv")).map_err(err)?,
        })
    }

    #[getter]
    fn train_size(&self) -> usize {
        self.train.len()
    }

    #[getter]
    fn eval_size(&self) -> usize {
        self.eval.len()
    }

    /// `(users, items, cross)` table sizes, padding row included.
    #[getter]
    fn vocab(&self) -> (usize, usize, usize) {
        (self.vocab.users, self.vocab.items, self.vocab.cross)
    }

    #[pyo3(signature = (split = "eval"))]
    fn labels(&self, split: &str) -> PyResult<Vec<u8>> {
        Ok(self.split(split)?.iter().map(|s| s.label).collect())
    }

    fn __repr__(&self) -> String {
        format!("Dataset(train={}, eval={})", self.train.len(), self.eval.len())
    }
}

/// A trained CTR model (any variant).
#[pyclass(module = "lmn", frozen)]
pub struct Model {
    inner: CtrModel,
    epochs: Vec<EpochReport>,
}

#[pymethods]
impl Model {
    /// Trains from scratch on `data`; keyword arguments are run-config keys.
    #[staticmethod]
    #[pyo3(signature = (data, **config))]
    fn train(py: Python<'_>, data: &Dataset, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = RunConfig::parse(&kwargs_text(config)?).map_err(err)?;
        let out = py
            .detach(|| train(&cfg, &data.train, &data.eval, data.vocab))
            .map_err(err)?;
        Ok(Model {
            inner: out.model,
            epochs: out.epochs,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        Ok(Model {
            inner: CtrModel::from_checkpoint(&ck, 1).map_err(err)?,
            epochs: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint().save(&path).map_err(err)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.config().variant.as_str()
    }

    /// Per-epoch training reports; empty for loaded models.
    #[getter]
    fn epochs<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.epochs.iter().map(|e| epoch_dict(py, e)).collect()
    }

    #[pyo3(signature = (data, split = "eval", batch_size = 1024))]
    fn predict(&self, py: Python<'_>, data: &Dataset, split: &str, batch_size: usize) -> PyResult<Vec<f64>> {
        let samples = data.split(split)?;
        py.detach(|| self.inner.predict(samples, batch_size)).map_err(err)
    }

    #[pyo3(signature = (data, split = "eval", batch_size = 1024, base = None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        data: &Dataset,
        split: &str,
        batch_size: usize,
        base: Option<&Model>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let samples = data.split(split)?;
        let report = py
            .detach(|| {
                let report = evaluate(&self.inner, samples, batch_size)?;
                match base {
                    Some(b) => report.with_base(&evaluate(&b.inner, samples, batch_size)?),
                    None => Ok(report),
                }
            })
            .map_err(err)?;
        metrics_dict(py, &report)
    }

    /// The memory value table as rows, or None for variants without memory.
    fn memory_values(&self) -> Option<Vec<Vec<f64>>> {
        self.inner.memory_values().map(|v| {
            (0..v.slots())
                .map(|s| v.row(s).map(<[f64]>::to_vec).unwrap_or_default())
                .collect()
        })
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!("Model(variant={}, embed_dim={})", c.variant, c.embed_dim)
    }
}

/// Writes a synthetic dataset to `out`; returns `(train_samples, eval_samples)`.
#[pyfunction]
#[pyo3(signature = (out, **spec))]
fn gen_data(out: PathBuf, spec: Option<&Bound<'_, PyDict>>) -> PyResult<(usize, usize)> {
    let spec = SyntheticSpec::parse(&kwargs_text(spec)?).map_err(err)?;
    let data = generate(&spec).map_err(err)?;
    write_dataset(&data, &out).map_err(err)?;
    Ok((data.train.len(), data.eval.len()))
}

#[pyfunction]
fn auc(labels: Vec<f64>, scores: Vec<f64>) -> PyResult<f64> {
    data::auc(&labels, &scores).map_err(err)
}

#[pyfunction]
fn logloss(labels: Vec<f64>, scores: Vec<f64>) -> PyResult<f64> {
    data::logloss(&labels, &scores).map_err(err)
}

#[pyfunction]
fn auc_improvement(auc_model: f64, auc_base: f64) -> PyResult<f64> {
    data::auc_improvement(auc_model, auc_base).map_err(err)
}

#[pyfunction]
fn logloss_improvement(logloss_model: f64, logloss_base: f64) -> PyResult<f64> {
    data::logloss_improvement(logloss_model, logloss_base).map_err(err)
}

/// `(indices, scores)` of the `k` largest scores; ties go to the lower index.
#[pyfunction]
fn top_k(scores: Vec<f64>, k: usize) -> PyResult<(Vec<usize>, Vec<f64>)> {
    memory::top_k(&scores, k).map_err(err)
}

/// Top-k `(row, col)` pairs of `s_row[i] + s_col[j]` without scoring the full grid.
#[pyfunction]
fn product_top_k(s_row: Vec<f64>, s_col: Vec<f64>, k: usize) -> PyResult<Vec<(usize, usize)>> {
    memory::product_top_k(&s_row, &s_col, k).map_err(err)
}

/// Finite-difference check of a small model; keyword arguments override the
/// default n=16, d=4, K=2 configuration.
#[pyfunction]
#[pyo3(signature = (batch_size = 4, seed = 0, tolerance = 1e-4, **config))]
fn check_grad<'py>(
    py: Python<'py>,
    batch_size: usize,
    seed: u64,
    tolerance: f64,
    config: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut merged = parse_key_values(&gradcheck_config().to_key_values()).map_err(err)?;
    merged.extend(parse_key_values(&kwargs_text(config)?).map_err(err)?);
    let text: String = merged.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let cfg = RunConfig::parse(&text).map_err(err)?;
    let opts = GradCheckOptions {
        batch_size,
        seed,
        tolerance,
        ..GradCheckOptions::default()
    };
    let report = py.detach(|| check_model_gradients(&cfg, &opts)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("passed", report.passed())?;
    d.set_item("max_rel_err", report.max_rel_err())?;
    let blocks: Vec<(String, f64)> = report.blocks.iter().map(|b| (b.name.clone(), b.max_rel_err)).collect();
    d.set_item("blocks", blocks)?;
    Ok(d)
}

/// Per-query cost of decomposed versus full-key scoring, one dict per √n.
#[pyfunction]
#[pyo3(signature = (sqrt_n, d = 32, reps = 5, naive = true, min_round_ms = 20, seed = 0))]
fn bench_scaling<'py>(
    py: Python<'py>,
    sqrt_n: Vec<usize>,
    d: usize,
    reps: usize,
    naive: bool,
    min_round_ms: u64,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let opts = BenchOptions {
        d,
        reps,
        naive,
        min_round: Duration::from_millis(min_round_ms),
        seed,
    };
    let rows = py.detach(|| run_bench(&sqrt_n, &opts)).map_err(err)?;
    rows.iter()
        .map(|r| {
            let out = PyDict::new(py);
            out.set_item("sqrt_n", r.sqrt_n)?;
            out.set_item("n", r.n)?;
            out.set_item("d", r.d)?;
            out.set_item("decomposed_madds", r.decomposed_madds)?;
            out.set_item("naive_madds", r.naive_madds)?;
            out.set_item("decomposed_ns_per_query", r.decomposed_ns)?;
            out.set_item("naive_ns_per_query", r.naive_ns)?;
            Ok(out)
        })
        .collect()
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("Error", m.py().get_type::<Error>())?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(logloss, m)?)?;
    m.add_function(wrap_pyfunction!(auc_improvement, m)?)?;
    m.add_function(wrap_pyfunction!(logloss_improvement, m)?)?;
    m.add_function(wrap_pyfunction!(top_k, m)?)?;
    m.add_function(wrap_pyfunction!(product_top_k, m)?)?;
    m.add_function(wrap_pyfunction!(check_grad, m)?)?;
    m.add_function(wrap_pyfunction!(bench_scaling, m)?)?;
    Ok(())
}

#[pymodule]
fn lmn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
