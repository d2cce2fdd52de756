//! Feature preprocessing: z-score normalization, k-means centers and the
//! sigmoid distance transform `phi_b(x) = 1 / (1 + exp(-|x - R_b| / s))`.

use std::collections::HashSet;

use nalgebra::DVector;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

const MAX_LLOYD_ITERATIONS: usize = 100;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    #[default]
    Linear,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformSpec {
    centers: Vec<DVector<f64>>,
    scale: f64,
    kind: TransformKind,
}

impl TransformSpec {
    pub fn linear() -> Self {
        TransformSpec {
            centers: Vec::new(),
            scale: 1.0,
            kind: TransformKind::Linear,
        }
    }

    /// One output per center; all centers must share a dimension.
    pub fn sigmoid(centers: Vec<DVector<f64>>, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!("sigmoid scale must be positive, got {scale}")));
        }
        let dim = centers
            .first()
            .map(|c| c.len())
            .ok_or_else(|| Error::invalid("sigmoid transform needs at least one center"))?;
        if centers.iter().any(|c| c.len() != dim) {
            return Err(Error::invalid("sigmoid centers have mixed dimensions"));
        }
        Ok(TransformSpec {
            centers,
            scale,
            kind: TransformKind::Sigmoid,
        })
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn centers(&self) -> &[DVector<f64>] {
        &self.centers
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Output dimension for an input of dimension `input_dim`.
    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self.kind {
            TransformKind::Linear => input_dim,
            TransformKind::Sigmoid => self.centers.len(),
        }
    }
}

pub fn transform(x: &DVector<f64>, spec: &TransformSpec) -> Result<DVector<f64>> {
    match spec.kind {
        TransformKind::Linear => Ok(x.clone()),
        TransformKind::Sigmoid => {
            let dim = spec.centers[0].len();
            if x.len() != dim {
                return Err(Error::invalid(format!(
                    "input has dimension {}, centers have dimension {dim}",
                    x.len()
                )));
            }
            Ok(DVector::from_iterator(
                spec.centers.len(),
                spec.centers
                    .iter()
                    .map(|c| 1.0 / (1.0 + (-(x - c).norm() / spec.scale).exp())),
            ))
        }
    }
}

/// Per-feature affine map learned by [`normalize`].
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    mean: DVector<f64>,
    /// Population standard deviation; 0 marks a constant feature.
    scale: DVector<f64>,
}

impl Normalization {
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn scale(&self) -> &DVector<f64> {
        &self.scale
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::invalid(format!(
                "input has dimension {}, normalization has dimension {}",
                x.len(),
                self.mean.len()
            )));
        }
        Ok(DVector::from_fn(x.len(), |c, _| {
            if self.scale[c] == 0.0 {
                0.0
            } else {
                (x[c] - self.mean[c]) / self.scale[c]
            }
        }))
    }
}

/// Z-scores every feature with the population standard deviation.
/// Constant features map to 0.
pub fn normalize(points: &[DVector<f64>]) -> Result<(Vec<DVector<f64>>, Normalization)> {
    let first = points
        .first()
        .ok_or_else(|| Error::invalid("cannot normalize an empty dataset"))?;
    let d = first.len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::invalid("points have mixed dimensions"));
    }
    let n = points.len() as f64;
    let mut mean = DVector::zeros(d);
    for p in points {
        mean += p;
    }
    mean /= n;
    let mut scale = DVector::zeros(d);
    for p in points {
        scale += (p - &mean).map(|v| v * v);
    }
    scale = scale.map(|v: f64| (v / n).sqrt());
    for c in 0..d {
        // Rounding leaves a tiny positive spread on constant columns.
        if scale[c] <= 1e-12 * mean[c].abs().max(1.0) {
            scale[c] = 0.0;
        }
    }
    let norm = Normalization { mean, scale };
    let out = points
        .iter()
        .map(|p| norm.apply(p))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, norm))
}

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub centers: Vec<DVector<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned center after each iteration.
    pub objective_history: Vec<f64>,
}

fn sq_dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm_squared()
}

fn nearest(p: &DVector<f64>, centers: &[DVector<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn objective(points: &[DVector<f64>], centers: &[DVector<f64>], assign: &[usize]) -> f64 {
    points
        .iter()
        .zip(assign)
        .map(|(p, &c)| sq_dist(p, &centers[c]))
        .sum()
}

fn distinct_points(points: &[DVector<f64>]) -> Vec<&DVector<f64>> {
    let mut seen = HashSet::new();
    points
        .iter()
        .filter(|p| seen.insert(p.iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .collect()
}

/// Lloyd iterations from the given initial centers until the assignment
/// stops changing or the iteration cap is hit.
///
/// A cluster that empties takes the point of the largest cluster that lies
/// farthest from that cluster's center.
pub fn lloyd(points: &[DVector<f64>], initial: Vec<DVector<f64>>) -> Result<KMeansFit> {
    let k = initial.len();
    if k == 0 || points.is_empty() {
        return Err(Error::invalid("k-means needs points and at least one center"));
    }
    let d = initial[0].len();
    if points.iter().chain(&initial).any(|p| p.len() != d) {
        return Err(Error::invalid("k-means inputs have mixed dimensions"));
    }
    let mut centers = initial;
    let mut assign: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;

        let mut counts = vec![0usize; k];
        for &c in &assign {
            counts[c] += 1;
        }
        while let Some(empty) = counts.iter().position(|&n| n == 0) {
            let largest = (0..k).fold(0, |best, c| if counts[c] > counts[best] { c } else { best });
            let mut far = None;
            let mut far_d = -1.0;
            for (i, p) in points.iter().enumerate() {
                if assign[i] == largest {
                    let dd = sq_dist(p, &centers[largest]);
                    if dd > far_d {
                        far = Some(i);
                        far_d = dd;
                    }
                }
            }
            let i = far.expect("largest cluster is nonempty");
            assign[i] = empty;
            counts[largest] -= 1;
            counts[empty] += 1;
        }

        let mut sums = vec![DVector::zeros(d); k];
        for (p, &c) in points.iter().zip(&assign) {
            sums[c] += p;
        }
        centers = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| s / n as f64)
            .collect();
        history.push(objective(points, &centers, &assign));
    }
    Ok(KMeansFit {
        centers,
        assignments: assign,
        objective_history: history,
    })
}

/// k-means with `k` initial centers drawn uniformly (without replacement)
/// from the distinct points.
pub fn kmeans(points: &[DVector<f64>], k: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let distinct = distinct_points(points);
    if k > distinct.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {} distinct points",
            distinct.len()
        )));
    }
    let mut rng = seeding::stream(&[seed, seeding::purpose::CENTERS]);
    let initial = index::sample(&mut rng, distinct.len(), k)
        .into_iter()
        .map(|i| distinct[i].clone())
        .collect();
    lloyd(points, initial)
}

pub fn fit_centers(points: &[DVector<f64>], k: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    kmeans(points, k, seed).map(|fit| fit.centers)
}
