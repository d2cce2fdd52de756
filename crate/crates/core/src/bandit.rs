//! Robust UCB over annotators.
//!
//! Each annotator is an arm whose reward is the negative squared residual
//! `xi = -(y - mu_w' x)^2`, so the best arm is the one with the smallest noise
//! variance. Squared Gaussian noise is heavy tailed, so the arm means are
//! estimated with a truncated empirical mean: samples with
//! `|xi| > sqrt(u t / ln(1/delta))` are left out, and the index is
//! `mean + sqrt(32 u ln t / n_j)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the confidence level `delta` is set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaPolicy {
    /// `delta = T^-2` for a known horizon `T`.
    FixedHorizon(u64),
    /// `delta_t = max(t, 2)^-2`.
    Anytime,
}

impl DeltaPolicy {
    /// `ln(1/delta)` at round `t`.
    pub fn log_inv_delta(&self, t: u64) -> f64 {
        match *self {
            DeltaPolicy::FixedHorizon(horizon) => 2.0 * (horizon.max(2) as f64).ln(),
            DeltaPolicy::Anytime => 2.0 * (t.max(2) as f64).ln(),
        }
    }
}

/// `sqrt(u t / ln(1/delta))`.
pub fn truncation_threshold_for(moment_bound: f64, t: u64, log_inv_delta: f64) -> f64 {
    (moment_bound * t as f64 / log_inv_delta).sqrt()
}

/// Mean of the samples with `|xi| <= threshold` and how many were kept.
/// Nothing kept gives a mean of 0.
pub fn truncated_mean(samples: &[f64], threshold: f64) -> (f64, usize) {
    let (sum, kept) = samples
        .iter()
        .filter(|xi| xi.abs() <= threshold)
        .fold((0.0, 0usize), |(s, n), xi| (s + xi, n + 1));
    if kept == 0 {
        (0.0, 0)
    } else {
        (sum / kept as f64, kept)
    }
}

/// `mean + sqrt(32 u ln t / pulls)`, or `+inf` for an arm never pulled.
pub fn ucb_index_for(mean: f64, pulls: usize, moment_bound: f64, t: f64) -> f64 {
    if pulls == 0 {
        return f64::INFINITY;
    }
    let log_t = t.ln().max(0.0);
    mean + (32.0 * moment_bound * log_t / pulls as f64).sqrt()
}

/// What happened to one recorded sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    /// The sample was inside the truncation threshold when it arrived.
    pub accepted: bool,
    pub threshold: f64,
}

/// Mutable state of one Robust UCB run.
#[derive(Clone, Debug)]
pub struct BanditState {
    samples: Vec<Vec<f64>>,
    accepted: Vec<usize>,
    means: Vec<f64>,
    round: u64,
    moment_bound: f64,
    delta_policy: DeltaPolicy,
    discarded: u64,
}

impl BanditState {
    pub fn new(arms: usize, moment_bound: f64, delta_policy: DeltaPolicy) -> Result<Self> {
        if arms == 0 {
            return Err(Error::invalid("bandit needs at least one arm"));
        }
        if !(moment_bound.is_finite() && moment_bound > 0.0) {
            return Err(Error::invalid(format!(
                "moment bound must be positive, got {moment_bound}"
            )));
        }
        Ok(BanditState {
            samples: vec![Vec::new(); arms],
            accepted: vec![0; arms],
            means: vec![0.0; arms],
            round: 0,
            moment_bound,
            delta_policy,
            discarded: 0,
        })
    }

    pub fn arms(&self) -> usize {
        self.samples.len()
    }

    /// Total samples recorded so far.
    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn moment_bound(&self) -> f64 {
        self.moment_bound
    }

    pub fn delta_policy(&self) -> DeltaPolicy {
        self.delta_policy
    }

    pub fn pulls(&self, j: usize) -> usize {
        self.samples[j].len()
    }

    pub fn accepted(&self, j: usize) -> usize {
        self.accepted[j]
    }

    pub fn mean(&self, j: usize) -> f64 {
        self.means[j]
    }

    pub fn samples(&self, j: usize) -> &[f64] {
        &self.samples[j]
    }

    /// Samples rejected at the moment they arrived, summed over all rounds.
    pub fn discarded(&self) -> u64 {
        self.discarded
    }

    /// Samples currently outside each arm's last truncation threshold.
    pub fn currently_excluded(&self) -> usize {
        self.samples
            .iter()
            .zip(&self.accepted)
            .map(|(s, &a)| s.len() - a)
            .sum()
    }

    /// Truncation threshold at the current round (taken as at least 1).
    pub fn truncation_threshold(&self) -> f64 {
        let t = self.round.max(1);
        truncation_threshold_for(self.moment_bound, t, self.delta_policy.log_inv_delta(t))
    }

    pub fn ucb_index(&self, j: usize) -> f64 {
        ucb_index_for(self.means[j], self.pulls(j), self.moment_bound, self.round as f64)
    }

    /// Arm with the largest index; unpulled arms first, ties to the lowest index.
    pub fn select_annotator(&self) -> usize {
        let mut best = 0;
        let mut best_index = f64::NEG_INFINITY;
        for j in 0..self.arms() {
            let idx = self.ucb_index(j);
            if idx > best_index {
                best = j;
                best_index = idx;
            }
        }
        best
    }

    /// Stores `-residual_sq` for arm `j`, advances the round and re-filters
    /// all of `j`'s samples against the new threshold.
    pub fn record_outcome(&mut self, j: usize, residual_sq: f64) -> Result<Outcome> {
        if j >= self.arms() {
            return Err(Error::invalid(format!("arm {j} out of range")));
        }
        if !(residual_sq.is_finite() && residual_sq >= 0.0) {
            return Err(Error::invalid(format!(
                "squared residual must be nonnegative, got {residual_sq}"
            )));
        }
        self.round += 1;
        let xi = -residual_sq;
        self.samples[j].push(xi);
        let threshold = self.truncation_threshold();
        let accepted = xi.abs() <= threshold;
        if !accepted {
            self.discarded += 1;
        }
        let (mean, kept) = truncated_mean(&self.samples[j], threshold);
        self.means[j] = mean;
        self.accepted[j] = kept;
        Ok(Outcome {
            accepted,
            threshold,
        })
    }
}

/// Sub-optimality gaps `1/beta_j - 1/beta*` and realised pull counts.
#[derive(Clone, Debug, PartialEq)]
pub struct RegretLedger {
    gaps: Vec<f64>,
    pulls: Vec<u64>,
}

impl RegretLedger {
    pub fn from_precisions(precisions: &[f64]) -> Result<Self> {
        if precisions.is_empty() || precisions.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::invalid("precisions must be positive and finite"));
        }
        let best = precisions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let gaps = precisions.iter().map(|b| 1.0 / b - 1.0 / best).collect();
        Ok(RegretLedger::from_gaps(gaps))
    }

    pub fn from_gaps(gaps: Vec<f64>) -> Self {
        let pulls = vec![0; gaps.len()];
        RegretLedger { gaps, pulls }
    }

    pub fn gaps(&self) -> &[f64] {
        &self.gaps
    }

    pub fn pulls(&self) -> &[u64] {
        &self.pulls
    }

    pub fn record(&mut self, j: usize) {
        self.pulls[j] += 1;
    }

    pub fn regret(&self) -> f64 {
        regret_seq(self)
    }
}

/// `sum_j gap_j T_j(t)`.
pub fn regret_seq(ledger: &RegretLedger) -> f64 {
    ledger
        .gaps
        .iter()
        .zip(&ledger.pulls)
        .map(|(g, &n)| g * n as f64)
        .sum()
}

/// Bandit regret `sum_i (gamma* - gamma_i) T_i` for arm means `gamma_i`.
///
/// With `gamma_j = -1/beta_j` this is the same sum as [`regret_seq`].
pub fn regret_mab(arm_means: &[f64], pulls: &[u64]) -> f64 {
    let best = arm_means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    arm_means
        .iter()
        .zip(pulls)
        .map(|(g, &n)| (best - g) * n as f64)
        .sum()
}

/// `sum_{gap > 0} 32 u ln T / gap + 5 gap`.
pub fn regret_bound(gaps: &[f64], moment_bound: f64, horizon: f64) -> f64 {
    gaps.iter()
        .filter(|&&g| g > 0.0)
        .map(|g| 32.0 * moment_bound * horizon.ln() / g + 5.0 * g)
        .sum()
}
