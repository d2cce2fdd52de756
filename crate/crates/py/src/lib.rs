use std::path::Path;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyIndexError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use crowd_al::active;
use crowd_al::bandit::{self, DeltaPolicy};
use crowd_al::features;
use crowd_al::harness::{self, ExperimentConfig, RoundRecord};
use crowd_al::mechanism;
use crowd_al::model::{self, FitOptions, GammaUpdate};
use crowd_al::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Numerical(_) | Error::PoolExhausted => PyRuntimeError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn vector(v: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(v)
}

fn vectors(rows: Vec<Vec<f64>>) -> Vec<DVector<f64>> {
    rows.into_iter().map(vector).collect()
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("matrix rows have different lengths"));
    }
    Ok(DMatrix::from_row_iterator(n, d, rows.into_iter().flatten()))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

type Rows = Vec<Vec<f64>>;
type Dicts<'py> = Vec<Bound<'py, PyDict>>;

fn list(v: &DVector<f64>) -> Vec<f64> {
    v.as_slice().to_vec()
}

/// Instances and the sparse annotator-by-instance label table.
#[pyclass(name = "Dataset")]
struct PyDataset(model::CrowdDataset);

#[pymethods]
impl PyDataset {
    #[new]
    fn new(instances: Vec<Vec<f64>>, annotators: usize) -> PyResult<Self> {
        model::CrowdDataset::new(vectors(instances), annotators).map(Self).map_err(to_py)
    }

    fn add_instance(&mut self, x: Vec<f64>) -> PyResult<usize> {
        self.0.add_instance(vector(x)).map_err(to_py)
    }

    fn add_label(&mut self, instance: usize, annotator: usize, y: f64) -> PyResult<()> {
        self.0.add_label(instance, annotator, y).map_err(to_py)
    }

    fn label(&self, instance: usize, annotator: usize) -> Option<f64> {
        self.0.label(instance, annotator)
    }

    fn counts(&self) -> Vec<usize> {
        self.0.counts()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn annotators(&self) -> usize {
        self.0.annotators()
    }

    #[getter]
    fn label_count(&self) -> usize {
        self.0.label_count()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Gaussian posterior over the regression weights.
#[pyclass(name = "WeightPosterior", skip_from_py_object)]
#[derive(Clone)]
struct PyWeightPosterior(model::WeightPosterior);

#[pymethods]
impl PyWeightPosterior {
    #[new]
    fn new(mean: Vec<f64>, precision: Vec<Vec<f64>>) -> PyResult<Self> {
        model::WeightPosterior::new(vector(mean), matrix(precision)?).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn isotropic(dim: usize, precision: f64) -> PyResult<Self> {
        model::WeightPosterior::isotropic(dim, precision).map(Self).map_err(to_py)
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        list(self.0.mean())
    }

    #[getter]
    fn precision(&self) -> Vec<Vec<f64>> {
        rows(self.0.precision())
    }

    fn covariance(&self) -> Vec<Vec<f64>> {
        rows(&self.0.covariance())
    }

    fn ln_det_precision(&self) -> f64 {
        self.0.ln_det_precision()
    }

    /// Predictive mean and weight-induced variance at `x`.
    fn predictive(&self, x: Vec<f64>) -> PyResult<(f64, f64)> {
        model::predictive(&vector(x), &self.0).map_err(to_py)
    }

    /// Uncertainty score `x' Lambda^-1 x`.
    fn score(&self, x: Vec<f64>) -> PyResult<f64> {
        active::instance_score(&vector(x), &self.0).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("WeightPosterior(dim={})", self.0.dim())
    }
}

/// Gamma posterior over one annotator's precision.
#[pyclass(name = "PrecisionPosterior", skip_from_py_object)]
#[derive(Clone)]
struct PyPrecisionPosterior(model::PrecisionPosterior);

#[pymethods]
impl PyPrecisionPosterior {
    #[new]
    fn new(shape: f64, rate: f64) -> PyResult<Self> {
        model::PrecisionPosterior::new(shape, rate).map(Self).map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> f64 {
        self.0.shape()
    }

    #[getter]
    fn rate(&self) -> f64 {
        self.0.rate()
    }

    fn expected(&self) -> f64 {
        self.0.expected()
    }

    fn __repr__(&self) -> String {
        format!("PrecisionPosterior(shape={}, rate={})", self.0.shape(), self.0.rate())
    }
}

#[pyclass(name = "Fit", get_all)]
struct PyFit {
    weights: PyWeightPosterior,
    precisions: Vec<PyPrecisionPosterior>,
    sweeps: usize,
    converged: bool,
    final_delta: f64,
}

#[pymethods]
impl PyFit {
    fn expected_precisions(&self) -> Vec<f64> {
        self.precisions.iter().map(|p| p.0.expected()).collect()
    }
}

/// Mean-field variational fit. Priors default to `N(0, I)` and `Gamma(1, 1)`.
#[pyfunction]
#[pyo3(signature = (dataset, weight_prior=None, precision_priors=None, tolerance=1e-6, max_sweeps=200, literal_rate=false))]
fn fit(
    py: Python<'_>,
    dataset: PyRef<'_, PyDataset>,
    weight_prior: Option<PyRef<'_, PyWeightPosterior>>,
    precision_priors: Option<Vec<PyRef<'_, PyPrecisionPosterior>>>,
    tolerance: f64,
    max_sweeps: usize,
    literal_rate: bool,
) -> PyResult<PyFit> {
    let data = &dataset.0;
    let prior = match weight_prior {
        Some(p) => p.0.clone(),
        None => model::WeightPosterior::isotropic(data.dim(), 1.0).map_err(to_py)?,
    };
    let gammas = match precision_priors {
        Some(ps) => ps.iter().map(|p| p.0).collect(),
        None => vec![model::PrecisionPosterior::new(1.0, 1.0).map_err(to_py)?; data.annotators()],
    };
    let options = FitOptions {
        tolerance,
        max_sweeps,
        gamma_update: if literal_rate { GammaUpdate::PaperLiteral } else { GammaUpdate::Corrected },
    };
    let out = py
        .detach(|| model::fit_variational(data, &prior, &gammas, &options, None))
        .map_err(to_py)?;
    Ok(PyFit {
        weights: PyWeightPosterior(out.weights),
        precisions: out.precisions.into_iter().map(PyPrecisionPosterior).collect(),
        sweeps: out.report.iterations,
        converged: out.report.converged,
        final_delta: out.report.final_delta,
    })
}

/// Index of the pool instance with the highest uncertainty score.
#[pyfunction]
fn select_instance(pool: Vec<Vec<f64>>, weights: PyRef<'_, PyWeightPosterior>) -> PyResult<usize> {
    let pool = vectors(pool);
    active::select_instance(pool.iter().enumerate(), &weights.0).map_err(to_py)
}

/// `det Lambda_n / det Lambda_{n+1}` after one label of precision `beta` at `x`.
#[pyfunction]
fn det_shrinkage(weights: PyRef<'_, PyWeightPosterior>, x: Vec<f64>, beta: f64) -> PyResult<f64> {
    active::det_shrinkage(&weights.0, &vector(x), beta).map_err(to_py)
}

/// Robust UCB annotator selection with truncated-mean estimates.
#[pyclass(name = "Bandit")]
struct PyBandit(bandit::BanditState);

#[pymethods]
impl PyBandit {
    /// `horizon=None` uses the anytime confidence schedule.
    #[new]
    #[pyo3(signature = (arms, moment_bound, horizon=None))]
    fn new(arms: usize, moment_bound: f64, horizon: Option<u64>) -> PyResult<Self> {
        let policy = horizon.map_or(DeltaPolicy::Anytime, DeltaPolicy::FixedHorizon);
        bandit::BanditState::new(arms, moment_bound, policy).map(Self).map_err(to_py)
    }

    fn select(&self) -> usize {
        self.0.select_annotator()
    }

    /// Records a squared residual for arm `j`; returns whether it was accepted.
    fn record(&mut self, j: usize, residual_sq: f64) -> PyResult<bool> {
        self.check(j)?;
        self.0.record_outcome(j, residual_sq).map(|o| o.accepted).map_err(to_py)
    }

    fn pulls(&self, j: usize) -> PyResult<usize> {
        self.check(j)?;
        Ok(self.0.pulls(j))
    }

    fn mean(&self, j: usize) -> PyResult<f64> {
        self.check(j)?;
        Ok(self.0.mean(j))
    }

    fn ucb_index(&self, j: usize) -> PyResult<f64> {
        self.check(j)?;
        Ok(self.0.ucb_index(j))
    }

    #[getter]
    fn round(&self) -> u64 {
        self.0.round()
    }

    #[getter]
    fn discarded(&self) -> u64 {
        self.0.discarded()
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.0.truncation_threshold()
    }
}

impl PyBandit {
    fn check(&self, j: usize) -> PyResult<()> {
        if j < self.0.arms() {
            Ok(())
        } else {
            Err(PyIndexError::new_err(format!("arm {j} out of range for {} arms", self.0.arms())))
        }
    }
}

/// Clamped linear payment on the estimated precision.
#[pyclass(name = "PaymentScheme")]
struct PyPaymentScheme(mechanism::PaymentScheme);

#[pymethods]
impl PyPaymentScheme {
    #[new]
    fn new(budget: f64, beta_lower: f64, beta_upper: f64) -> PyResult<Self> {
        mechanism::PaymentScheme::new(budget, beta_lower, beta_upper).map(Self).map_err(to_py)
    }

    fn payment(&self, beta_hat: f64) -> f64 {
        mechanism::payment(beta_hat, &self.0)
    }

    fn settle(&self, posterior: PyRef<'_, PyPrecisionPosterior>) -> f64 {
        mechanism::settle(&posterior.0, &self.0)
    }
}

/// Normalized points plus the per-column mean and scale.
#[pyfunction]
fn normalize(points: Vec<Vec<f64>>) -> PyResult<(Rows, Vec<f64>, Vec<f64>)> {
    let (out, norm) = features::normalize(&vectors(points)).map_err(to_py)?;
    Ok((out.iter().map(list).collect(), list(norm.mean()), list(norm.scale())))
}

/// Seeded k-means; returns centers and assignments.
#[pyfunction]
fn kmeans(points: Vec<Vec<f64>>, k: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let out = features::kmeans(&vectors(points), k, seed).map_err(to_py)?;
    Ok((out.centers.iter().map(list).collect(), out.assignments))
}

/// Sigmoid basis features of `x` around `centers`.
#[pyfunction]
fn sigmoid_features(x: Vec<f64>, centers: Vec<Vec<f64>>, scale: f64) -> PyResult<Vec<f64>> {
    let spec = features::TransformSpec::sigmoid(vectors(centers), scale).map_err(to_py)?;
    features::transform(&vector(x), &spec).map(|v| list(&v)).map_err(to_py)
}

#[pyfunction]
fn rmse(predicted: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    harness::rmse(&predicted, &truth).map_err(to_py)
}

fn record_dict<'py>(py: Python<'py>, r: &RoundRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("rep", r.rep)?;
    d.set_item("round", r.round)?;
    d.set_item("instance", r.instance)?;
    d.set_item("annotator", r.annotator)?;
    d.set_item("label", r.label)?;
    d.set_item("accepted", r.accepted)?;
    d.set_item("rmse", r.rmse)?;
    d.set_item("regret", r.regret)?;
    d.set_item("discarded", r.discarded)?;
    d.set_item("payment", r.payment)?;
    Ok(d)
}

fn config(text: &str) -> PyResult<ExperimentConfig> {
    ExperimentConfig::from_toml(text, Path::new("<config>")).map_err(to_py)
}

/// Runs an experiment from TOML config text; returns per-round records and
/// per-repetition summaries as dicts.
#[pyfunction]
#[pyo3(signature = (config_toml=""))]
fn run_experiment<'py>(
    py: Python<'py>,
    config_toml: &str,
) -> PyResult<(Dicts<'py>, Dicts<'py>)> {
    let cfg = config(config_toml)?;
    let out = py.detach(|| harness::run_experiment(&cfg)).map_err(to_py)?;
    let records = out.records.iter().map(|r| record_dict(py, r)).collect::<PyResult<_>>()?;
    let summaries = out
        .summaries
        .iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("rep", s.rep)?;
            d.set_item("rounds", s.rounds)?;
            d.set_item("rmse", s.rmse)?;
            d.set_item("regret", s.regret)?;
            d.set_item("discarded", s.discarded)?;
            d.set_item("payment", s.payment)?;
            d.set_item("truncated", s.truncated)?;
            d.set_item("pulls", s.pulls.clone())?;
            Ok(d)
        })
        .collect::<PyResult<_>>()?;
    Ok((records, summaries))
}

/// Test RMSE of a fit on the fully labeled training pool, one per split.
#[pyfunction]
#[pyo3(signature = (config_toml=""))]
fn fit_pool(py: Python<'_>, config_toml: &str) -> PyResult<Vec<f64>> {
    let cfg = config(config_toml)?;
    let fits = py
        .detach(|| harness::load_data(&cfg).and_then(|raw| harness::fit_full_pool(&cfg, &raw)))
        .map_err(to_py)?;
    Ok(fits.iter().map(|f| f.rmse).collect())
}

#[pymodule]
fn crowd_al_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyWeightPosterior>()?;
    m.add_class::<PyPrecisionPosterior>()?;
    m.add_class::<PyFit>()?;
    m.add_class::<PyBandit>()?;
    m.add_class::<PyPaymentScheme>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(select_instance, m)?)?;
    m.add_function(wrap_pyfunction!(det_shrinkage, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(sigmoid_features, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(fit_pool, m)?)?;
    Ok(())
}
