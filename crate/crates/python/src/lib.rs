use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use weakiv::estimators::{self, StructuralEstimate, VarianceConvention};
use weakiv::harness::{self, ExperimentConfig};
use weakiv::lar::{self, RBConfig};
use weakiv::reduced_form::{fgls_reduced_form, noise_covariance, ols_reduced_form};
use weakiv::{dgp, Error, IdentificationMode, Stream};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::RankDeficient { .. } | Error::NonPsd { .. } => PyRuntimeError::new_err(e.to_string()),
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn mode(name: &str) -> PyResult<IdentificationMode> {
    match name {
        "weak" => Ok(IdentificationMode::Weak),
        "strong" => Ok(IdentificationMode::Strong),
        other => Err(PyValueError::new_err(format!("mode must be 'weak' or 'strong', got {other:?}"))),
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("{what}: rows have different lengths")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Observed sample: outcome `y`, regressors `x` (n×d), instruments `z` (n×k).
#[pyclass(name = "Dataset", module = "weakiv", frozen, skip_from_py_object)]
struct PyDataset {
    inner: weakiv::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(y: Vec<f64>, x: Vec<Vec<f64>>, z: Vec<Vec<f64>>) -> PyResult<Self> {
        let inner =
            weakiv::Dataset::new(DVector::from_vec(y), rows_to_matrix(&x, "x")?, rows_to_matrix(&z, "z")?)
                .map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Draw a sample from the built-in heteroskedastic design.
    #[staticmethod]
    #[pyo3(signature = (mode = "weak", n = 1000, seed = 0))]
    fn simulate(mode: &str, n: usize, seed: u64) -> PyResult<Self> {
        let cfg = dgp::builtin_config(self::mode(mode)?, n, seed);
        let inner = dgp::draw_dataset(&cfg, &Stream::new(seed)).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.dims().n
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.dims().k
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.dims().d
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y().iter().copied().collect()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(self.inner.x())
    }

    #[getter]
    fn z(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(self.inner.z())
    }

    fn __repr__(&self) -> String {
        let d = self.inner.dims();
        format!("Dataset(n={}, k={}, d={})", d.n, d.k, d.d)
    }
}

#[pyclass(name = "Estimate", module = "weakiv", frozen, get_all)]
struct PyEstimate {
    estimator: String,
    beta_hat: Vec<f64>,
    condition: f64,
    extreme: bool,
    /// Draws kept by a Rao-Blackwellized estimator.
    draws_used: Option<usize>,
    draws_non_finite: Option<usize>,
}

#[pymethods]
impl PyEstimate {
    fn __repr__(&self) -> String {
        format!("Estimate(estimator={:?}, beta_hat={:?})", self.estimator, self.beta_hat)
    }
}

impl From<StructuralEstimate> for PyEstimate {
    fn from(e: StructuralEstimate) -> Self {
        PyEstimate {
            estimator: e.estimator.label().to_owned(),
            beta_hat: e.beta_hat.iter().copied().collect(),
            condition: e.condition,
            extreme: e.extreme,
            draws_used: None,
            draws_non_finite: None,
        }
    }
}

#[pyfunction]
fn tsls(data: &PyDataset) -> PyResult<PyEstimate> {
    estimators::tsls(&data.inner).map(Into::into).map_err(to_py)
}

/// Feasible optimal IV with cell-wise weights estimated from 2SLS residuals.
#[pyfunction]
fn optimal_iv(data: &PyDataset) -> PyResult<PyEstimate> {
    estimators::optimal_iv_feasible(&data.inner, Default::default()).map(Into::into).map_err(to_py)
}

#[pyfunction]
fn two_step_gmm(data: &PyDataset) -> PyResult<PyEstimate> {
    estimators::two_step_gmm(&data.inner).map(Into::into).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (data, c = 1.0))]
fn fuller(data: &PyDataset, c: f64) -> PyResult<PyEstimate> {
    estimators::fuller(&data.inner, c).map(Into::into).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (data, variance_convention = "printed"))]
fn unbiased(data: &PyDataset, variance_convention: &str) -> PyResult<PyEstimate> {
    let convention = match variance_convention {
        "printed" => VarianceConvention::AsPrinted,
        "pi" => VarianceConvention::PiVariance,
        other => return Err(PyValueError::new_err(format!("variance_convention must be 'printed' or 'pi', got {other:?}"))),
    };
    let fit = ols_reduced_form(&data.inner).map_err(to_py)?;
    estimators::unbiased_scalar(&fit, convention).map(Into::into).map_err(to_py)
}

fn rb(data: &PyDataset, optimal: bool, draws: usize, inner_draws: usize, seed: u64) -> Result<PyEstimate, Error> {
    let ols = ols_reduced_form(&data.inner)?;
    let gls = fgls_reduced_form(&data.inner)?;
    let noise = noise_covariance(&ols, &gls);
    let out = if optimal {
        lar::rb_optimal_iv(&data.inner, &gls, &noise, &RBConfig::new(draws, inner_draws, Stream::new(seed))?)?
    } else {
        lar::rb_tsls(&gls, &noise, &data.inner.zz(), &RBConfig::new(draws, 1, Stream::new(seed))?)?
    };
    let mut est = PyEstimate::from(out.estimate);
    est.draws_used = Some(out.draws.used);
    est.draws_non_finite = Some(out.draws.non_finite);
    Ok(est)
}

#[pyfunction]
#[pyo3(signature = (data, draws = 100, seed = 0))]
fn rb_tsls(py: Python<'_>, data: &PyDataset, draws: usize, seed: u64) -> PyResult<PyEstimate> {
    py.detach(|| rb(data, false, draws, 1, seed)).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (data, draws = 50, inner_draws = 100, seed = 0))]
fn rb_optimal_iv(py: Python<'_>, data: &PyDataset, draws: usize, inner_draws: usize, seed: u64) -> PyResult<PyEstimate> {
    py.detach(|| rb(data, true, draws, inner_draws, seed)).map_err(to_py)
}

/// Concentration parameter of the built-in design, as a d×d nested list.
#[pyfunction]
#[pyo3(signature = (mode = "weak", n = 1000))]
fn concentration(mode: &str, n: usize) -> PyResult<Vec<Vec<f64>>> {
    let mu = dgp::builtin_config(self::mode(mode)?, n, 0).concentration().map_err(to_py)?;
    Ok(matrix_to_rows(&mu))
}

/// JSON config of the built-in replication experiment.
#[pyfunction]
#[pyo3(signature = (mode = "weak"))]
fn replication_config(mode: &str) -> PyResult<String> {
    let cfg = harness::replication_experiment(self::mode(mode)?);
    serde_json::to_string(&cfg).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Run a Monte Carlo experiment from a JSON config string; returns the result as JSON.
#[pyfunction]
#[pyo3(signature = (config, workers = 0, include_metadata = false))]
fn run_experiment(py: Python<'_>, config: &str, workers: usize, include_metadata: bool) -> PyResult<String> {
    let cfg: ExperimentConfig = serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let result = py.detach(|| harness::run_experiment_with_workers(&cfg, workers)).map_err(to_py)?;
    let value = if include_metadata {
        serde_json::to_value(&result).map_err(|e| PyValueError::new_err(e.to_string()))?
    } else {
        result.comparable_value()
    };
    Ok(value.to_string())
}

#[pymodule]
#[pyo3(name = "weakiv")]
fn weakiv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyEstimate>()?;
    m.add_function(wrap_pyfunction!(tsls, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_iv, m)?)?;
    m.add_function(wrap_pyfunction!(two_step_gmm, m)?)?;
    m.add_function(wrap_pyfunction!(fuller, m)?)?;
    m.add_function(wrap_pyfunction!(unbiased, m)?)?;
    m.add_function(wrap_pyfunction!(rb_tsls, m)?)?;
    m.add_function(wrap_pyfunction!(rb_optimal_iv, m)?)?;
    m.add_function(wrap_pyfunction!(concentration, m)?)?;
    m.add_function(wrap_pyfunction!(replication_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
