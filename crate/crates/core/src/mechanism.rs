//! The clamped linear payment rule and annotator utility.

use serde::{Deserialize, Serialize};

use crate::crowd::CostFunction;
use crate::error::{Error, Result};
use crate::model::PrecisionPosterior;

/// Budget `B` per example and the precision band `[beta_lower, beta_upper]`
/// over which payment rises linearly from 0 to `B`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScheme")]
pub struct PaymentScheme {
    budget: f64,
    beta_lower: f64,
    beta_upper: f64,
}

#[derive(Deserialize)]
struct RawScheme {
    budget: f64,
    beta_lower: f64,
    beta_upper: f64,
}

impl TryFrom<RawScheme> for PaymentScheme {
    type Error = Error;

    fn try_from(raw: RawScheme) -> Result<Self> {
        PaymentScheme::new(raw.budget, raw.beta_lower, raw.beta_upper)
    }
}

impl PaymentScheme {
    pub fn new(budget: f64, beta_lower: f64, beta_upper: f64) -> Result<Self> {
        if !(budget.is_finite() && budget > 0.0) {
            return Err(Error::invalid(format!("budget must be positive, got {budget}")));
        }
        if !(beta_lower.is_finite() && beta_lower > 0.0 && beta_upper.is_finite()) {
            return Err(Error::invalid("precision band must be positive and finite"));
        }
        if beta_lower >= beta_upper {
            return Err(Error::invalid(format!(
                "beta_lower ({beta_lower}) must be below beta_upper ({beta_upper})"
            )));
        }
        Ok(PaymentScheme {
            budget,
            beta_lower,
            beta_upper,
        })
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn beta_lower(&self) -> f64 {
        self.beta_lower
    }

    pub fn beta_upper(&self) -> f64 {
        self.beta_upper
    }
}

/// `B min(1, max(0, (beta - beta_lower) / (beta_upper - beta_lower)))`.
pub fn payment(beta_hat: f64, scheme: &PaymentScheme) -> f64 {
    let frac = (beta_hat - scheme.beta_lower) / (scheme.beta_upper - scheme.beta_lower);
    scheme.budget * frac.clamp(0.0, 1.0)
}

pub fn utility(beta: f64, cost: &CostFunction, scheme: &PaymentScheme) -> f64 {
    payment(beta, scheme) - cost.eval(beta)
}

/// Per-label payment owed to an annotator, paid on the posterior mean of
/// its precision.
pub fn settle(posterior: &PrecisionPosterior, scheme: &PaymentScheme) -> f64 {
    payment(posterior.expected(), scheme)
}
