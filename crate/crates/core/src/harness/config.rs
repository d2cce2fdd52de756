//! Experiment configuration, read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::SyntheticSpec;
use super::records::RecordFormat;
use crate::crowd::CostFunction;
use crate::error::{Error, Result};
use crate::features::TransformKind;
use crate::mechanism::PaymentScheme;

/// How each round picks its instance and annotator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Variance-based instance, Robust UCB annotator.
    #[default]
    RobustUcb,
    /// Uniform instance, uniform annotator.
    Random,
    /// Variance-based instance, uniform annotator.
    InstanceOnly,
    /// Variance-based instance, one near-noiseless annotator.
    SingleSource,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::RobustUcb,
        Strategy::Random,
        Strategy::InstanceOnly,
        Strategy::SingleSource,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::RobustUcb => "robust_ucb",
            Strategy::Random => "random",
            Strategy::InstanceOnly => "instance_only",
            Strategy::SingleSource => "single_source",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMode {
    /// `delta = T^-2` with `T` the seed labels plus the budget.
    #[default]
    FixedHorizon,
    Anytime,
}

/// The simulated crowd. Noise standard deviations `1/sqrt(beta*)` are drawn
/// from `good_interval` for the first `good` annotators and `bad_interval`
/// for the rest. With a `cost`, every annotator is strategic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotatorSpec {
    pub m: usize,
    pub good: usize,
    pub good_interval: [f64; 2],
    pub bad_interval: [f64; 2],
    pub cost: Option<CostFunction>,
    pub effort_grid: usize,
}

impl Default for AnnotatorSpec {
    fn default() -> Self {
        AnnotatorSpec {
            m: 50,
            good: 40,
            good_interval: [0.1, 1.0],
            bad_interval: [1.0, 2.0],
            cost: None,
            effort_grid: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// CSV input; the synthetic generator is used when absent.
    pub dataset: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub transform: TransformKind,
    /// Sigmoid scale, unless `s_grid` is non-empty.
    pub s: f64,
    /// Candidate sigmoid scales, chosen per repetition by validation RMSE.
    pub s_grid: Vec<f64>,
    pub validation_fraction: f64,
    /// Append a constant feature after the transform.
    pub intercept: bool,
    pub test_fraction: f64,
    pub seed_pool: usize,
    pub annotators: AnnotatorSpec,
    pub budget: usize,
    pub strategy: Strategy,
    /// Moment bound for the bandit; `3 sigma_max^4` when absent.
    pub u: Option<f64>,
    pub sigma_max: f64,
    pub delta_policy: DeltaMode,
    pub scheme: PaymentScheme,
    pub repetitions: usize,
    pub seed: u64,
    /// Stop a repetition once test RMSE falls to this level.
    pub target_rmse: Option<f64>,
    pub output: Option<PathBuf>,
    pub format: RecordFormat,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: None,
            synthetic: SyntheticSpec::default(),
            transform: TransformKind::Linear,
            s: 1.0,
            s_grid: Vec::new(),
            validation_fraction: 0.2,
            intercept: true,
            test_fraction: 0.3,
            seed_pool: 10,
            annotators: AnnotatorSpec::default(),
            budget: 100,
            strategy: Strategy::RobustUcb,
            u: None,
            sigma_max: 2.0,
            delta_policy: DeltaMode::FixedHorizon,
            scheme: PaymentScheme::new(1.0, 1.0, 100.0).expect("valid default scheme"),
            repetitions: 1,
            seed: 0,
            target_rmse: None,
            output: None,
            format: RecordFormat::Csv,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate().map_err(|e| Error::Config {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn moment_bound(&self) -> f64 {
        self.u.unwrap_or(3.0 * self.sigma_max.powi(4))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return fail(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        if self.repetitions == 0 {
            return fail("repetitions must be at least 1".into());
        }
        if self.seed_pool == 0 {
            return fail("seed_pool must be at least 1".into());
        }
        if !(self.s.is_finite() && self.s > 0.0) || self.s_grid.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return fail("sigmoid scales must be positive".into());
        }
        let a = &self.annotators;
        if a.m == 0 || a.good > a.m {
            return fail(format!("need 1 <= m and good <= m, got m={} good={}", a.m, a.good));
        }
        if a.effort_grid < 2 {
            return fail("effort_grid must be at least 2".into());
        }
        for [lo, hi] in [a.good_interval, a.bad_interval] {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
                return fail(format!("annotator interval [{lo}, {hi}] must satisfy 0 < lo <= hi"));
            }
        }
        match self.u {
            Some(u) if !(u.is_finite() && u > 0.0) => return fail(format!("u must be positive, got {u}")),
            None if !(self.sigma_max.is_finite() && self.sigma_max > 0.0) => {
                return fail("sigma_max must be positive".into())
            }
            _ => {}
        }
        if let Some(t) = self.target_rmse {
            if !(t.is_finite() && t >= 0.0) {
                return fail("target_rmse must be nonnegative".into());
            }
        }
        Ok(())
    }
}
