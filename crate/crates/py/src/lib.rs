//! Python bindings: schedules, tokenization, contraction, the theorem
//! harness and the training/evaluation jobs.

use std::collections::HashMap;
use std::path::PathBuf;

use gendd::config::RunConfig;
use gendd::contraction::{CenterSource, ContractionSpec};
use gendd::error::GenddError;
use gendd::pipeline;
use gendd::schedule::{NoiseSchedule, ScheduleKind};
use gendd::theorem::{self, SweepConfig};
use gendd::tokenizer;
use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: GenddError) -> PyErr {
    match e {
        GenddError::Config(_) | GenddError::Validation(_) => PyValueError::new_err(e.to_string()),
        GenddError::Io { .. } | GenddError::Setup(_) => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Forward-diffusion variance schedule.
#[pyclass(name = "NoiseSchedule", module = "pygendd", frozen)]
struct PySchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (kind = "cosine", max_step = 1000))]
    fn new(kind: &str, max_step: usize) -> PyResult<Self> {
        let kind: ScheduleKind = kind.parse().map_err(to_py)?;
        Ok(PySchedule { inner: NoiseSchedule::build(kind, max_step).map_err(to_py)? })
    }

    #[getter]
    fn max_step(&self) -> usize {
        self.inner.max_step()
    }

    fn alpha_bar(&self, m: usize) -> PyResult<f64> {
        if m > self.inner.max_step() {
            return Err(PyValueError::new_err(format!("step {m} exceeds {}", self.inner.max_step())));
        }
        Ok(self.inner.alpha_bar(m))
    }

    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    fn forward_noise(&self, x0: Vec<f64>, m: usize, eps: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.forward_noise(&x0, m, &eps).map_err(to_py)
    }

    /// Kept base steps of an `s`-step sampling view.
    fn respace(&self, s: usize) -> PyResult<Vec<usize>> {
        Ok(self.inner.respace(s).map_err(to_py)?.steps().to_vec())
    }

    fn __repr__(&self) -> String {
        format!("NoiseSchedule(kind='{}', max_step={})", self.inner.kind(), self.inner.max_step())
    }
}

/// Splits `features` (B x d_t) into B x n x d_tok tokens.
#[pyfunction]
fn split(features: Vec<Vec<f64>>, token_dim: usize) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let f = matrix(features)?;
    let cond = Array2::zeros((f.nrows(), 1));
    let batch = tokenizer::split(f.view(), token_dim, cond.view(), None).map_err(to_py)?;
    Ok(batch.tokens.outer_iter().map(|s| s.rows().into_iter().map(|r| r.to_vec()).collect()).collect())
}

/// Inverse of [`split`].
#[pyfunction]
fn assemble(tokens: Vec<Vec<Vec<f64>>>, feature_dim: usize) -> PyResult<Vec<Vec<f64>>> {
    let b = tokens.len();
    let n = tokens.first().map_or(0, Vec::len);
    let d = tokens.first().and_then(|t| t.first()).map_or(0, Vec::len);
    let flat: Vec<f64> = tokens.into_iter().flatten().flatten().collect();
    let t = Array3::from_shape_vec((b, n, d), flat).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(rows(&tokenizer::assemble(t.view(), feature_dim).map_err(to_py)?))
}

/// `lam * x0 + (1 - lam) * centers[label]`.
#[pyfunction]
fn contract(x0: Vec<f64>, centers: Vec<Vec<f64>>, label: usize, lam: f64) -> PyResult<Vec<f64>> {
    let spec = ContractionSpec::new(lam, matrix(centers)?, CenterSource::ClassifierWeights).map_err(to_py)?;
    spec.contract(&x0, Some(label)).map_err(to_py)
}

/// Clean-feature estimate from a noisy state and predicted noise.
#[pyfunction]
fn single_step_x0(schedule: &PySchedule, x_m: Vec<f64>, m: usize, eps_pred: Vec<f64>) -> PyResult<Vec<f64>> {
    theorem::single_step_x0(&x_m, m, &eps_pred, &schedule.inner).map_err(to_py)
}

/// `(grad_gendd, grad_multitask)` at `x0_est`.
#[pyfunction]
fn surrogate_gradients(
    x0_est: Vec<f64>,
    x0: Vec<f64>,
    weights: Vec<Vec<f64>>,
    label: usize,
    lam: f64,
    alpha_bar: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let w = matrix(weights)?;
    if label >= w.nrows() || w.ncols() != x0.len() || x0.len() != x0_est.len() {
        return Err(PyValueError::new_err("shape mismatch between weights, label and features"));
    }
    let center = w.row(label).to_vec();
    Ok((
        theorem::grad_gendd_closed_form(&x0_est, &x0, &center, lam, alpha_bar),
        theorem::grad_multitask(&x0_est, &x0, w.view(), label, lam, alpha_bar),
    ))
}

/// Confidence sweep of the surrogate residual; writes CSV and plot to `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, scenarios_per_bucket = 1000, lam = 0.9, feature_dim = 64, num_classes = 10, seed = 0))]
fn verify_theorem(
    out_dir: PathBuf,
    scenarios_per_bucket: usize,
    lam: f64,
    feature_dim: usize,
    num_classes: usize,
    seed: u64,
) -> PyResult<HashMap<String, f64>> {
    let sweep = SweepConfig { scenarios_per_bucket, lambda: lam, feature_dim, num_classes, seed, ..SweepConfig::default() };
    let r = pipeline::verify_theorem(&sweep, &out_dir).map_err(to_py)?;
    let mut out = HashMap::from([
        ("high_confidence_count".to_string(), r.high_confidence_count as f64),
        ("high_confidence_median_residual".to_string(), r.high_confidence_median_residual),
        ("high_confidence_median_cosine".to_string(), r.high_confidence_median_cosine),
        ("monotone".to_string(), f64::from(u8::from(r.monotone))),
        ("passed".to_string(), f64::from(u8::from(r.passed()))),
    ]);
    for b in &r.buckets {
        out.insert(format!("bucket_{}_median_residual", b.confidence_bucket), b.median_residual);
    }
    Ok(out)
}

/// Effective config for a preset or file plus `key=value` overrides, as TOML.
#[pyfunction]
#[pyo3(signature = (source = "smoke", overrides = Vec::new()))]
fn load_config(source: &str, overrides: Vec<String>) -> PyResult<String> {
    RunConfig::load(source, &overrides).and_then(|c| c.to_toml()).map_err(to_py)
}

fn outcome(o: &pipeline::TrainOutcome) -> HashMap<String, f64> {
    let mut m = HashMap::from([
        ("top1".to_string(), o.report.top1),
        ("top5".to_string(), o.report.top5),
        ("teacher_top1".to_string(), o.teacher_top1),
        ("steps".to_string(), o.metrics.len() as f64),
    ]);
    if let (Some(first), Some(last)) = (o.metrics.first(), o.metrics.last()) {
        m.insert("first_loss".into(), first.loss);
        m.insert("last_loss".into(), last.loss);
    }
    m
}

/// Trains GenDD; `steps` caps the optimizer steps.
#[pyfunction]
#[pyo3(signature = (source = "smoke", overrides = Vec::new(), steps = None))]
fn train(py: Python<'_>, source: &str, overrides: Vec<String>, steps: Option<usize>) -> PyResult<HashMap<String, f64>> {
    let config = RunConfig::load(source, &overrides).map_err(to_py)?;
    let o = py.detach(|| pipeline::train_gendd_steps(config, steps.unwrap_or(usize::MAX))).map_err(to_py)?;
    Ok(outcome(&o))
}

/// Trains the CE + KL baseline.
#[pyfunction]
#[pyo3(signature = (source = "smoke", overrides = Vec::new()))]
fn train_kl(py: Python<'_>, source: &str, overrides: Vec<String>) -> PyResult<HashMap<String, f64>> {
    let config = RunConfig::load(source, &overrides).map_err(to_py)?;
    let o = py.detach(|| pipeline::train_kl(config)).map_err(to_py)?;
    Ok(outcome(&o))
}

/// Validation metrics of a checkpoint.
#[pyfunction]
#[pyo3(signature = (checkpoint, overrides = Vec::new()))]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, overrides: Vec<String>) -> PyResult<HashMap<String, f64>> {
    let r = py.detach(|| pipeline::evaluate_checkpoint(&checkpoint, &overrides)).map_err(to_py)?;
    Ok(HashMap::from([("top1".to_string(), r.top1), ("top5".to_string(), r.top5)]))
}

#[pymodule]
fn pygendd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(assemble, m)?)?;
    m.add_function(wrap_pyfunction!(contract, m)?)?;
    m.add_function(wrap_pyfunction!(single_step_x0, m)?)?;
    m.add_function(wrap_pyfunction!(surrogate_gradients, m)?)?;
    m.add_function(wrap_pyfunction!(verify_theorem, m)?)?;
    m.add_function(wrap_pyfunction!(load_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(train_kl, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
