//! Simulated annotators.
//!
//! An annotator labels `x` as `w'x + z` with `z ~ N(0, 1/beta)`, where the
//! precision `beta` is the effort it chooses, capped by its best precision
//! `beta*`. Strategic annotators pick the effort that maximises payment
//! minus cost; the rest always work at `beta*`.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanism::{utility, PaymentScheme};
use crate::seeding;

/// Nonnegative, strictly increasing effort cost with `c(0) = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", try_from = "RawCost")]
pub enum CostFunction {
    /// `a beta`
    Linear { slope: f64 },
    /// `a beta^2`
    Quadratic { coef: f64 },
    /// `a beta + b max(0, beta - knee)^2`
    Threshold { slope: f64, penalty: f64, knee: f64 },
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum RawCost {
    Linear { slope: f64 },
    Quadratic { coef: f64 },
    Threshold { slope: f64, penalty: f64, knee: f64 },
}

impl TryFrom<RawCost> for CostFunction {
    type Error = Error;

    fn try_from(raw: RawCost) -> Result<Self> {
        match raw {
            RawCost::Linear { slope } => CostFunction::linear(slope),
            RawCost::Quadratic { coef } => CostFunction::quadratic(coef),
            RawCost::Threshold {
                slope,
                penalty,
                knee,
            } => CostFunction::threshold(slope, penalty, knee),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{name} must be positive for a strictly increasing cost, got {v}"
        )))
    }
}

impl CostFunction {
    pub fn linear(slope: f64) -> Result<Self> {
        positive("slope", slope)?;
        Ok(CostFunction::Linear { slope })
    }

    pub fn quadratic(coef: f64) -> Result<Self> {
        positive("coefficient", coef)?;
        Ok(CostFunction::Quadratic { coef })
    }

    pub fn threshold(slope: f64, penalty: f64, knee: f64) -> Result<Self> {
        positive("slope", slope)?;
        if !(penalty.is_finite() && penalty >= 0.0 && knee.is_finite() && knee >= 0.0) {
            return Err(Error::invalid("threshold penalty and knee must be nonnegative"));
        }
        Ok(CostFunction::Threshold {
            slope,
            penalty,
            knee,
        })
    }

    pub fn eval(&self, beta: f64) -> f64 {
        match *self {
            CostFunction::Linear { slope } => slope * beta,
            CostFunction::Quadratic { coef } => coef * beta * beta,
            CostFunction::Threshold {
                slope,
                penalty,
                knee,
            } => slope * beta + penalty * (beta - knee).max(0.0).powi(2),
        }
    }
}

impl Default for CostFunction {
    fn default() -> Self {
        CostFunction::Linear { slope: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnotatorProfile {
    pub id: usize,
    pub best_precision: f64,
    pub cost: CostFunction,
    pub strategic: bool,
}

impl AnnotatorProfile {
    pub fn new(id: usize, best_precision: f64) -> Result<Self> {
        if !(best_precision.is_finite() && best_precision > 0.0) {
            return Err(Error::invalid(format!(
                "best precision must be positive, got {best_precision}"
            )));
        }
        Ok(AnnotatorProfile {
            id,
            best_precision,
            cost: CostFunction::default(),
            strategic: false,
        })
    }

    pub fn with_strategy(mut self, cost: CostFunction) -> Self {
        self.cost = cost;
        self.strategic = true;
        self
    }

    /// Noise standard deviation at best effort.
    pub fn best_sigma(&self) -> f64 {
        self.best_precision.sqrt().recip()
    }
}

fn check_interval(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{name} interval [{lo}, {hi}] must satisfy 0 < lo <= hi"
        )))
    }
}

/// `m` non-strategic annotators; the first `good` draw their noise standard
/// deviation `1/sqrt(beta*)` uniformly from `good_interval`, the rest from
/// `bad_interval`.
pub fn make_annotators(
    m: usize,
    good: usize,
    good_interval: (f64, f64),
    bad_interval: (f64, f64),
    seed: u64,
) -> Result<Vec<AnnotatorProfile>> {
    if good > m {
        return Err(Error::invalid(format!("{good} good annotators out of {m}")));
    }
    check_interval("good", good_interval)?;
    check_interval("bad", bad_interval)?;
    let mut rng = seeding::stream(&[seed, seeding::purpose::ANNOTATORS]);
    let mut draw = |(lo, hi): (f64, f64)| -> f64 {
        if lo == hi {
            lo
        } else {
            Uniform::new_inclusive(lo, hi)
                .expect("interval checked above")
                .sample(&mut rng)
        }
    };
    (0..m)
        .map(|id| {
            let sigma = draw(if id < good { good_interval } else { bad_interval });
            AnnotatorProfile::new(id, 1.0 / (sigma * sigma))
        })
        .collect()
}

/// `truth + z` with `z ~ N(0, 1/effort)`.
pub fn noisy_label<R: Rng + ?Sized>(truth: f64, effort: f64, rng: &mut R) -> f64 {
    let sd = effort.sqrt().recip();
    truth + Normal::new(0.0, sd).expect("positive sd").sample(rng)
}

pub fn sample_label<R: Rng + ?Sized>(
    profile: &AnnotatorProfile,
    x: &DVector<f64>,
    w_true: &DVector<f64>,
    effort: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(effort.is_finite() && effort > 0.0) {
        return Err(Error::invalid(format!("effort must be positive, got {effort}")));
    }
    if effort > profile.best_precision {
        return Err(Error::invalid(format!(
            "effort {effort} exceeds annotator {}'s best precision {}",
            profile.id, profile.best_precision
        )));
    }
    if x.len() != w_true.len() {
        return Err(Error::invalid("instance and weight dimensions differ"));
    }
    Ok(noisy_label(w_true.dot(x), effort, rng))
}

/// RNG for the label annotator `annotator` gives on instance `instance`.
///
/// Keyed by the pair, so the noise an annotator adds to an instance does
/// not depend on the order in which a strategy asks for labels.
pub fn label_rng(seed: u64, annotator: usize, instance: usize) -> rand_chacha::ChaCha8Rng {
    seeding::stream(&[
        seed,
        seeding::purpose::LABEL,
        annotator as u64,
        instance as u64,
    ])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffortChoice {
    pub effort: f64,
    pub participates: bool,
}

/// The effort maximising `payment - cost` on a uniform grid of `grid` points
/// over `[0, min(beta*, 1.5 beta_upper)]`.
///
/// An annotator participates only if the best utility is strictly positive;
/// otherwise it reports effort 0. Non-strategic annotators always work at
/// `beta*`.
pub fn optimal_effort(
    profile: &AnnotatorProfile,
    scheme: &PaymentScheme,
    grid: usize,
) -> EffortChoice {
    if !profile.strategic {
        return EffortChoice {
            effort: profile.best_precision,
            participates: true,
        };
    }
    let grid = grid.max(2);
    let hi = profile.best_precision.min(1.5 * scheme.beta_upper());
    let mut best = (0.0, 0.0);
    for i in 0..grid {
        let beta = hi * i as f64 / (grid - 1) as f64;
        let u = utility(beta, &profile.cost, scheme);
        if u > best.1 {
            best = (beta, u);
        }
    }
    if best.1 > 0.0 {
        EffortChoice {
            effort: best.0,
            participates: true,
        }
    } else {
        EffortChoice {
            effort: 0.0,
            participates: false,
        }
    }
}
