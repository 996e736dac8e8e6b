use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ::cpsearch::bench;
use ::cpsearch::conformal::{IntervalPredictor, PredictionInterval};
use ::cpsearch::optimizer::{run_autocp, SearchConfig};
use ::cpsearch::{cate, dataset, Error, Matrix};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidInput(_) | Error::DimensionMismatch { .. } | Error::Config(_) | Error::Parse { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(format!("{}: {e}", e.kind())),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(to_py)
}

fn pairs(intervals: Vec<PredictionInterval>) -> Vec<(f64, f64)> {
    intervals.into_iter().map(|iv| (iv.lower, iv.upper)).collect()
}

/// A full pipeline: model and hyperparameters, estimator, calibration.
#[pyclass(name = "PipelineSpec", frozen, from_py_object)]
#[derive(Clone)]
struct PySpec(::cpsearch::PipelineSpec);

#[pymethods]
impl PySpec {
    /// One of the named baseline pipelines, e.g. ``"SCP-RF"`` or ``"CQR-NN"``.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        bench::preset(name)
            .map(PySpec)
            .ok_or_else(|| PyValueError::new_err(format!("unknown preset '{name}'")))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(PySpec).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("spec serializes")
    }

    #[getter]
    fn estimator(&self) -> &'static str {
        self.0.estimator.name()
    }

    #[getter]
    fn calibration(&self) -> String {
        self.0.calibration.to_string()
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }

    fn __repr__(&self) -> String {
        format!("PipelineSpec('{}')", self.0)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

/// A fitted conformal predictor.
#[pyclass(name = "IntervalPredictor", frozen)]
struct PyPredictor(IntervalPredictor);

#[pymethods]
impl PyPredictor {
    #[staticmethod]
    #[pyo3(signature = (spec, x, y, alpha=0.1, seed=0))]
    fn fit(py: Python<'_>, spec: &PySpec, x: Vec<Vec<f64>>, y: Vec<f64>, alpha: f64, seed: u64) -> PyResult<Self> {
        let x = matrix(x)?;
        let spec = spec.0;
        py.detach(|| IntervalPredictor::fit(&spec, &x, &y, alpha, seed))
            .map(PyPredictor)
            .map_err(to_py)
    }

    /// ``(lower, upper)`` for every row of ``x``.
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<(f64, f64)>> {
        self.0.predict_intervals(&matrix(x)?).map(pairs).map_err(to_py)
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha()
    }
}

/// Searches pipelines on ``(x, y)``; returns the winning spec, its refitted
/// predictor and the evaluation history as ``(spec, cv_length, flagged)``.
#[pyfunction]
#[pyo3(signature = (x, y, alpha=0.1, config=None, n_iter=None, seed=0))]
fn search(
    py: Python<'_>,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    alpha: f64,
    config: Option<&str>,
    n_iter: Option<usize>,
    seed: u64,
) -> PyResult<(PySpec, PyPredictor, Vec<(PySpec, f64, bool)>)> {
    let mut cfg = match config {
        Some(text) => SearchConfig::from_toml(text).map_err(to_py)?,
        None => SearchConfig::default(),
    };
    if let Some(n) = n_iter {
        cfg.budget.n_iter = n;
    }
    cfg.budget.seed = seed;
    let data = dataset::Dataset::new(matrix(x)?, y).map_err(to_py)?;
    let out = py.detach(|| run_autocp(&data, alpha, &cfg)).map_err(to_py)?;
    let history = out
        .history
        .records
        .iter()
        .map(|r| (PySpec(r.spec), r.mean_length, r.flagged))
        .collect();
    Ok((PySpec(out.best().spec), PyPredictor(out.predictor), history))
}

/// Treatment-effect interval from per-arm response intervals.
#[pyfunction]
#[pyo3(signature = (interval0, interval1, alpha0=0.05, alpha1=0.05))]
fn combine_cate(interval0: (f64, f64), interval1: (f64, f64), alpha0: f64, alpha1: f64) -> (f64, f64, bool) {
    let iv0 = PredictionInterval::new(interval0.0, interval0.1);
    let iv1 = PredictionInterval::new(interval1.0, interval1.1);
    let c = cate::combine(&iv0, &iv1, (alpha0, alpha1));
    (c.lower, c.upper, c.flagged)
}

/// Runs a preset over repeated splits of a CSV file or ``synthetic:<name>``;
/// returns the mean and std of test coverage and length.
#[pyfunction]
#[pyo3(signature = (data, preset, splits=20, alpha=0.1, seed=0, target=None))]
fn benchmark(
    py: Python<'_>,
    data: &str,
    preset: &str,
    splits: usize,
    alpha: f64,
    seed: u64,
    target: Option<&str>,
) -> PyResult<(f64, f64, f64, f64)> {
    let ds = match data.strip_prefix("synthetic:") {
        Some(name) => ::cpsearch::synthetic::named(name, seed)
            .ok_or_else(|| PyValueError::new_err(format!("unknown synthetic dataset '{name}'")))?,
        None => dataset::load_csv(data, target).map_err(to_py)?,
    };
    let config = bench::BenchConfig {
        dataset: data.to_string(),
        alpha,
        n_splits: splits,
        seed,
        ..bench::BenchConfig::default()
    };
    let algorithm = bench::Algorithm::preset(preset).map_err(to_py)?;
    let r = py.detach(|| bench::run_benchmark(&ds, &config, &algorithm)).map_err(to_py)?;
    let a = r.aggregate;
    Ok((a.coverage_mean, a.coverage_std, a.length_mean, a.length_std))
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    bench::PRESETS.to_vec()
}

#[pymodule]
fn cpsearch(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySpec>()?;
    m.add_class::<PyPredictor>()?;
    m.add_function(wrap_pyfunction!(search, m)?)?;
    m.add_function(wrap_pyfunction!(combine_cate, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    Ok(())
}
