//! Mean-field variational inference for linear regression from several
//! annotators with unknown, annotator-specific noise precision.
//!
//! The generative model is `y_ij ~ N(w' x_i, 1/beta_j)` with a Gaussian prior
//! on `w` and independent Gamma priors on each `beta_j`. The approximate
//! posterior factorises as `q(w) q(beta_1) ... q(beta_m)`; the two factor
//! updates depend on each other, so [`fit_variational`] alternates them until
//! the parameters stop moving.
//!
//! [`CrowdDataset`] keeps per-annotator sufficient statistics
//! (`sum x x'`, `sum y x`, `sum y^2`) so a sweep costs `O(m d^3)` regardless of
//! how many labels have been collected.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative tolerance for the symmetry check on a precision matrix.
const SYMMETRY_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug)]
struct AnnotatorStats {
    count: usize,
    gram: DMatrix<f64>,
    cross: DVector<f64>,
    sum_sq: f64,
}

impl AnnotatorStats {
    fn new(dim: usize) -> Self {
        AnnotatorStats {
            count: 0,
            gram: DMatrix::zeros(dim, dim),
            cross: DVector::zeros(dim),
            sum_sq: 0.0,
        }
    }

    fn push(&mut self, x: &DVector<f64>, y: f64) {
        self.count += 1;
        self.gram.ger(1.0, x, x, 1.0);
        self.cross.axpy(y, x, 1.0);
        self.sum_sq += y * y;
    }
}

/// Instances plus the sparse set of labels the crowd has provided for them.
///
/// At most one label is stored per (instance, annotator) pair.
#[derive(Clone, Debug)]
pub struct CrowdDataset {
    dim: usize,
    instances: Vec<DVector<f64>>,
    labels: BTreeMap<(usize, usize), f64>,
    stats: Vec<AnnotatorStats>,
}

impl CrowdDataset {
    pub fn new(instances: Vec<DVector<f64>>, annotators: usize) -> Result<Self> {
        let dim = instances
            .first()
            .map(|x| x.len())
            .ok_or_else(|| Error::invalid("dataset needs at least one instance"))?;
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        if let Some(i) = instances.iter().position(|x| x.len() != dim) {
            return Err(Error::invalid(format!(
                "instance {i} has dimension {}, expected {dim}",
                instances[i].len()
            )));
        }
        if annotators == 0 {
            return Err(Error::invalid("dataset needs at least one annotator"));
        }
        Ok(CrowdDataset {
            dim,
            instances,
            labels: BTreeMap::new(),
            stats: (0..annotators).map(|_| AnnotatorStats::new(dim)).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn annotators(&self) -> usize {
        self.stats.len()
    }

    pub fn instance(&self, i: usize) -> &DVector<f64> {
        &self.instances[i]
    }

    pub fn instances(&self) -> &[DVector<f64>] {
        &self.instances
    }

    pub fn add_instance(&mut self, x: DVector<f64>) -> Result<usize> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "instance has dimension {}, expected {}",
                x.len(),
                self.dim
            )));
        }
        self.instances.push(x);
        Ok(self.instances.len() - 1)
    }

    /// Records annotator `j`'s label for instance `i`.
    pub fn add_label(&mut self, i: usize, j: usize, y: f64) -> Result<()> {
        if i >= self.instances.len() {
            return Err(Error::invalid(format!("instance {i} out of range")));
        }
        if j >= self.stats.len() {
            return Err(Error::invalid(format!("annotator {j} out of range")));
        }
        if !y.is_finite() {
            return Err(Error::invalid(format!("label for ({i}, {j}) is not finite")));
        }
        if self.labels.contains_key(&(i, j)) {
            return Err(Error::invalid(format!(
                "annotator {j} already labeled instance {i}"
            )));
        }
        self.labels.insert((i, j), y);
        self.stats[j].push(&self.instances[i], y);
        Ok(())
    }

    pub fn label(&self, i: usize, j: usize) -> Option<f64> {
        self.labels.get(&(i, j)).copied()
    }

    /// All labels as `((instance, annotator), label)`, ordered by instance.
    pub fn labels(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.labels.iter().map(|(&k, &v)| (k, v))
    }

    pub fn label_count(&self) -> usize {
        self.labels.len()
    }

    /// `n_j`, the number of labels from each annotator.
    pub fn counts(&self) -> Vec<usize> {
        self.stats.iter().map(|s| s.count).collect()
    }

    /// The `n x m` indicator matrix `I`.
    pub fn indicator(&self) -> DMatrix<u8> {
        let mut ind = DMatrix::zeros(self.instances.len(), self.stats.len());
        for &(i, j) in self.labels.keys() {
            ind[(i, j)] = 1;
        }
        ind
    }

    /// Rows of the instances labeled by annotator `j`, in instance order.
    pub fn labeled_rows(&self, j: usize) -> DMatrix<f64> {
        let rows: Vec<_> = self
            .labels
            .keys()
            .filter(|&&(_, jj)| jj == j)
            .map(|&(i, _)| self.instances[i].transpose())
            .collect();
        if rows.is_empty() {
            DMatrix::zeros(0, self.dim)
        } else {
            DMatrix::from_rows(&rows)
        }
    }
}

/// Gaussian posterior `N(mean, precision^-1)` over the regression weights.
///
/// The Cholesky factor of the precision is computed once on construction and
/// reused by every solve.
#[derive(Clone, Debug)]
pub struct WeightPosterior {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
}

impl WeightPosterior {
    pub fn new(mean: DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::invalid("weight dimension must be at least 1"));
        }
        if precision.nrows() != d || precision.ncols() != d {
            return Err(Error::invalid(format!(
                "precision is {}x{}, mean has dimension {d}",
                precision.nrows(),
                precision.ncols()
            )));
        }
        if mean.iter().chain(precision.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numerical("posterior contains non-finite values"));
        }
        let scale = precision.amax().max(1.0);
        for r in 0..d {
            for c in (r + 1)..d {
                if (precision[(r, c)] - precision[(c, r)]).abs() > SYMMETRY_TOLERANCE * scale {
                    return Err(Error::invalid("precision matrix is not symmetric"));
                }
            }
        }
        let factor = Cholesky::new(precision.clone())
            .ok_or_else(|| Error::numerical("precision matrix is not positive definite"))?;
        Ok(WeightPosterior {
            mean,
            precision,
            factor,
        })
    }

    /// Zero mean, `precision * I`.
    pub fn isotropic(dim: usize, precision: f64) -> Result<Self> {
        WeightPosterior::new(
            DVector::zeros(dim),
            DMatrix::identity(dim, dim) * precision,
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// `precision^-1 v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(v)
    }

    /// `x' precision^-1 x`, computed as `|L^-1 x|^2` so it is never negative.
    pub fn inverse_quadratic(&self, x: &DVector<f64>) -> f64 {
        self.factor
            .l_dirty()
            .solve_lower_triangular(x)
            .map(|z| z.norm_squared())
            .unwrap_or(f64::INFINITY)
    }

    /// `precision^-1 m` for a square matrix `m`.
    pub fn covariance(&self) -> DMatrix<f64> {
        self.factor.inverse()
    }

    pub fn ln_det_precision(&self) -> f64 {
        2.0 * self.factor.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "vector has dimension {}, posterior has dimension {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Gamma posterior over one annotator's noise precision (shape/rate form).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecisionPosterior {
    shape: f64,
    rate: f64,
}

impl PrecisionPosterior {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape.is_finite() && shape > 0.0 && rate.is_finite() && rate > 0.0) {
            return Err(Error::invalid(format!(
                "gamma parameters must be positive and finite (shape {shape}, rate {rate})"
            )));
        }
        Ok(PrecisionPosterior { shape, rate })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// `E[beta] = shape / rate`.
    pub fn expected(&self) -> f64 {
        self.shape / self.rate
    }
}

impl Default for PrecisionPosterior {
    fn default() -> Self {
        PrecisionPosterior {
            shape: 1.0,
            rate: 1.0,
        }
    }
}

pub fn expected_precision(p: &PrecisionPosterior) -> f64 {
    p.expected()
}

/// Which form of the Gamma rate update to use.
///
/// The update adds, for each label, the expected squared residual
/// `E[(y - w'x)^2] = y^2 - 2 y mu'x + mu' x x' mu + x' Lambda^-1 x`.
/// `PaperLiteral` drops the factor 2 on the cross term, which matches a
/// widely circulated printed form of the update but is not the mean-field
/// optimum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GammaUpdate {
    #[default]
    Corrected,
    PaperLiteral,
}

/// Weight-factor update: `Lambda_n = Lambda_0 + sum_j E[beta_j] sum_i x_i x_i'`
/// and `mu_n = Lambda_n^-1 (Lambda_0 mu_0 + sum_j E[beta_j] sum_i y_ij x_i)`.
///
/// Zero expected precisions are allowed; such annotators contribute nothing.
pub fn vi_update_weights(
    dataset: &CrowdDataset,
    expected_betas: &[f64],
    prior: &WeightPosterior,
) -> Result<WeightPosterior> {
    if prior.dim() != dataset.dim() {
        return Err(Error::invalid(format!(
            "prior has dimension {}, dataset has dimension {}",
            prior.dim(),
            dataset.dim()
        )));
    }
    if expected_betas.len() != dataset.annotators() {
        return Err(Error::invalid(format!(
            "{} precisions given for {} annotators",
            expected_betas.len(),
            dataset.annotators()
        )));
    }
    if let Some(b) = expected_betas.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
        return Err(Error::invalid(format!("expected precision {b} is invalid")));
    }

    let active: Vec<_> = dataset
        .stats
        .iter()
        .zip(expected_betas)
        .filter(|(s, &b)| s.count > 0 && b > 0.0)
        .collect();
    if active.is_empty() {
        return Ok(prior.clone());
    }

    let mut precision = prior.precision.clone();
    let mut rhs = &prior.precision * &prior.mean;
    for (stats, &beta) in active {
        precision += &stats.gram * beta;
        rhs.axpy(beta, &stats.cross, 1.0);
    }
    let factor = Cholesky::new(precision.clone())
        .ok_or_else(|| Error::numerical("updated weight precision is not positive definite"))?;
    let mean = factor.solve(&rhs);
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("updated weight mean is not finite"));
    }
    Ok(WeightPosterior {
        mean,
        precision,
        factor,
    })
}

/// Gamma-factor update for annotator `j`.
///
/// `shape = a_0 + n_j / 2`; the rate adds half the expected squared residual
/// of every label from `j` under the current weight posterior.
pub fn vi_update_precision(
    dataset: &CrowdDataset,
    weights: &WeightPosterior,
    prior: &PrecisionPosterior,
    j: usize,
    form: GammaUpdate,
) -> Result<PrecisionPosterior> {
    if j >= dataset.annotators() {
        return Err(Error::invalid(format!("annotator {j} out of range")));
    }
    if weights.dim() != dataset.dim() {
        return Err(Error::invalid("weight posterior and dataset dimensions differ"));
    }
    precision_update(&dataset.stats[j], weights, &weights.covariance(), prior, j, form)
}

/// `tr(S_j Lambda^-1)` is taken against a covariance computed once per sweep.
fn precision_update(
    stats: &AnnotatorStats,
    weights: &WeightPosterior,
    covariance: &DMatrix<f64>,
    prior: &PrecisionPosterior,
    j: usize,
    form: GammaUpdate,
) -> Result<PrecisionPosterior> {
    if stats.count == 0 {
        return Ok(*prior);
    }
    let mu = &weights.mean;
    let cross = stats.cross.dot(mu);
    let quad = (&stats.gram * mu).dot(mu);
    let trace = stats.gram.dot(covariance);
    let cross_factor = match form {
        GammaUpdate::Corrected => 2.0,
        GammaUpdate::PaperLiteral => 1.0,
    };
    let shape = prior.shape + stats.count as f64 / 2.0;
    let rate = prior.rate + 0.5 * (stats.sum_sq - cross_factor * cross) + 0.5 * trace + 0.5 * quad;
    if !(rate.is_finite() && rate > 0.0) {
        return Err(Error::numerical(format!(
            "gamma rate for annotator {j} became {rate}"
        )));
    }
    Ok(PrecisionPosterior { shape, rate })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub gamma_update: GammaUpdate,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tolerance: 1e-6,
            max_sweeps: 200,
            gamma_update: GammaUpdate::Corrected,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitReport {
    pub iterations: usize,
    pub converged: bool,
    /// Largest absolute parameter change in the last sweep.
    pub final_delta: f64,
}

#[derive(Clone, Debug)]
pub struct VariationalFit {
    pub weights: WeightPosterior,
    pub precisions: Vec<PrecisionPosterior>,
    pub report: FitReport,
}

impl VariationalFit {
    pub fn expected_precisions(&self) -> Vec<f64> {
        self.precisions.iter().map(PrecisionPosterior::expected).collect()
    }
}

fn weight_change(a: &WeightPosterior, b: &WeightPosterior) -> f64 {
    let dm = (&a.mean - &b.mean).amax();
    let dp = (&a.precision - &b.precision).amax();
    dm.max(dp)
}

fn precision_change(a: &[PrecisionPosterior], b: &[PrecisionPosterior]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p.shape - q.shape).abs().max((p.rate - q.rate).abs()))
        .fold(0.0, f64::max)
}

/// Alternates the weight and precision updates until the largest absolute
/// change of any posterior parameter in a sweep drops below the tolerance.
///
/// Hitting `max_sweeps` is reported, not treated as an error. A warm start
/// replaces the priors as the initial state but the priors still anchor
/// every update.
pub fn fit_variational(
    dataset: &CrowdDataset,
    weight_prior: &WeightPosterior,
    precision_priors: &[PrecisionPosterior],
    options: &FitOptions,
    warm_start: Option<(&WeightPosterior, &[PrecisionPosterior])>,
) -> Result<VariationalFit> {
    if !(options.tolerance > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    if options.max_sweeps == 0 {
        return Err(Error::invalid("max_sweeps must be at least 1"));
    }
    if precision_priors.len() != dataset.annotators() {
        return Err(Error::invalid(format!(
            "{} precision priors for {} annotators",
            precision_priors.len(),
            dataset.annotators()
        )));
    }
    let (mut weights, mut precisions) = match warm_start {
        Some((w, p)) => {
            if p.len() != dataset.annotators() || w.dim() != dataset.dim() {
                return Err(Error::invalid("warm start does not match the dataset"));
            }
            (w.clone(), p.to_vec())
        }
        None => (weight_prior.clone(), precision_priors.to_vec()),
    };

    let mut report = FitReport {
        iterations: 0,
        converged: false,
        final_delta: f64::INFINITY,
    };
    for sweep in 1..=options.max_sweeps {
        let betas: Vec<f64> = precisions.iter().map(PrecisionPosterior::expected).collect();
        let next_weights = vi_update_weights(dataset, &betas, weight_prior)?;
        let covariance = next_weights.covariance();
        let next_precisions = precision_priors
            .iter()
            .zip(&dataset.stats)
            .enumerate()
            .map(|(j, (prior, stats))| {
                precision_update(stats, &next_weights, &covariance, prior, j, options.gamma_update)
            })
            .collect::<Result<Vec<_>>>()?;
        let delta = weight_change(&weights, &next_weights)
            .max(precision_change(&precisions, &next_precisions));
        weights = next_weights;
        precisions = next_precisions;
        report.iterations = sweep;
        report.final_delta = delta;
        if delta < options.tolerance {
            report.converged = true;
            break;
        }
    }
    Ok(VariationalFit {
        weights,
        precisions,
        report,
    })
}

/// Posterior predictive `N(x' mu_n, x' Lambda_n^-1 x)` for a noiseless target.
pub fn predictive(x: &DVector<f64>, weights: &WeightPosterior) -> Result<(f64, f64)> {
    weights.check_dim(x)?;
    Ok((x.dot(&weights.mean), weights.inverse_quadratic(x)))
}
