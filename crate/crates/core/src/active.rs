//! Instance selection for the crowd regression model.
//!
//! Adding a label for `x` from an annotator of precision `beta` shrinks the
//! posterior covariance determinant by `1 / (1 + beta x' Lambda^-1 x)`, and
//! the same factor bounds how much the estimator error can contract. The
//! instance and annotator parts of that score separate, so the instance is
//! picked by `x' Lambda^-1 x` alone and the annotator is left to the bandit.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::WeightPosterior;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceScore {
    pub index: usize,
    pub score: f64,
}

/// `x' Lambda_n^-1 x`, the predictive variance of `x` under the posterior.
pub fn instance_score(x: &DVector<f64>, weights: &WeightPosterior) -> Result<f64> {
    if x.len() != weights.dim() {
        return Err(Error::invalid(format!(
            "instance has dimension {}, posterior has dimension {}",
            x.len(),
            weights.dim()
        )));
    }
    Ok(weights.inverse_quadratic(x))
}

pub fn score_pool<'a, I>(pool: I, weights: &WeightPosterior) -> Result<Vec<InstanceScore>>
where
    I: IntoIterator<Item = (usize, &'a DVector<f64>)>,
{
    pool.into_iter()
        .map(|(index, x)| {
            instance_score(x, weights).map(|score| InstanceScore { index, score })
        })
        .collect()
}

/// Index of the pool entry with the largest score; ties go to the lowest index.
pub fn select_instance<'a, I>(pool: I, weights: &WeightPosterior) -> Result<usize>
where
    I: IntoIterator<Item = (usize, &'a DVector<f64>)>,
{
    let mut best: Option<InstanceScore> = None;
    for (index, x) in pool {
        let score = instance_score(x, weights)?;
        best = match best {
            Some(b) if b.score > score || (b.score == score && b.index < index) => Some(b),
            _ => Some(InstanceScore { index, score }),
        };
    }
    best.map(|b| b.index).ok_or(Error::PoolExhausted)
}

/// `det(Lambda_{n+1}^-1) / det(Lambda_n^-1)` after one label of precision
/// `beta` at `x`, by the matrix determinant lemma.
pub fn det_shrinkage(weights: &WeightPosterior, x: &DVector<f64>, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("precision must be positive, got {beta}")));
    }
    Ok(1.0 / (1.0 + beta * instance_score(x, weights)?))
}

/// Lower and upper multiplicative bounds on `|Err(mu_{n+1})| / |Err(mu_n)|`.
///
/// Both come from the eigenvalues of `(I + beta Lambda_n^-1 x x')^-1`. That
/// matrix is not symmetric, so as stated the bounds hold in the
/// `Lambda_n`-weighted norm; in the Euclidean norm they can fail when
/// `Lambda_n` is strongly anisotropic.
pub fn error_contraction_bounds(
    weights: &WeightPosterior,
    x: &DVector<f64>,
    beta: f64,
) -> Result<(f64, f64)> {
    Ok((det_shrinkage(weights, x, beta)?, 1.0))
}
