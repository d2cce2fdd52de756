//! Tabular input: CSV loading, seeded splits and a synthetic fallback.

use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

/// Feature rows with one real target each.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub features: Vec<DVector<f64>>,
    pub targets: Vec<f64>,
}

impl RawDataset {
    pub fn new(features: Vec<DVector<f64>>, targets: Vec<f64>) -> Result<Self> {
        if features.len() != targets.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} targets",
                features.len(),
                targets.len()
            )));
        }
        if let Some(first) = features.first() {
            if features.iter().any(|x| x.len() != first.len()) {
                return Err(Error::invalid("feature rows have mixed lengths"));
            }
        }
        Ok(RawDataset { features, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, |x| x.len())
    }
}

fn format_error(path: &Path, row: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        row,
        column,
        message: message.into(),
    }
}

/// Reads a comma-separated file whose last column is the target.
///
/// A first row with any non-numeric cell is taken as a header. Rows and
/// columns in errors are 1-based and count the header.
pub fn load_csv(path: impl AsRef<Path>) -> Result<RawDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path)
}

/// [`load_csv`] on in-memory text; `origin` only labels errors.
pub fn parse_csv(text: &str, origin: &Path) -> Result<RawDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut features = Vec::new();
    let mut targets = Vec::new();
    let mut width = None;
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| format_error(origin, row, 0, e.to_string()))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, usize>> = record
            .iter()
            .enumerate()
            .map(|(c, cell)| cell.parse::<f64>().map_err(|_| c + 1))
            .collect();
        if r == 0 && parsed.iter().any(|v| v.is_err()) {
            continue;
        }
        if record.len() < 2 {
            return Err(format_error(origin, row, record.len(), "need at least one feature and a target"));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(format_error(
                    origin,
                    row,
                    record.len(),
                    format!("expected {w} columns, found {}", record.len()),
                ))
            }
            _ => {}
        }
        let mut values = Vec::with_capacity(record.len());
        for (c, v) in parsed.into_iter().enumerate() {
            match v {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    return Err(format_error(
                        origin,
                        row,
                        c + 1,
                        format!("cannot parse {:?} as a finite number", &record[c]),
                    ))
                }
            }
        }
        targets.push(values.pop().expect("at least two columns"));
        features.push(DVector::from_vec(values));
    }
    if targets.is_empty() {
        return Err(format_error(origin, 0, 0, "no data rows"));
    }
    RawDataset::new(features, targets)
}

/// Train and test row indices; the test set takes `round(n * fraction)` rows,
/// at least one and leaving at least one for training.
pub fn split(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::invalid("need at least two rows to split"));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeding::stream(&[seed, seeding::purpose::SPLIT]));
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let test = order.split_off(n - n_test);
    Ok((order, test))
}

/// Linear data `z = w' x` with standard normal features and weights. Targets
/// are noiseless; annotators add the noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub instances: usize,
    pub dim: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            instances: 300,
            dim: 5,
        }
    }
}

/// Draws a synthetic dataset and returns it with its true weights.
pub fn synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(RawDataset, DVector<f64>)> {
    if spec.instances < 2 || spec.dim == 0 {
        return Err(Error::invalid("synthetic data needs at least two rows and one feature"));
    }
    let mut rng = seeding::stream(&[seed, seeding::purpose::SYNTHETIC]);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let w = DVector::from_fn(spec.dim, |_, _| normal());
    let features: Vec<DVector<f64>> = (0..spec.instances)
        .map(|_| DVector::from_fn(spec.dim, |_, _| normal()))
        .collect();
    let targets = features.iter().map(|x| w.dot(x)).collect();
    Ok((RawDataset::new(features, targets)?, w))
}
