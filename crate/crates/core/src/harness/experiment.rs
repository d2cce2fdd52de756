//! The labeling loop: seed pool, then one instance and one annotator per round.

use nalgebra::DVector;
use rand::seq::index;
use rand::Rng;

use super::config::{DeltaMode, ExperimentConfig, Strategy};
use super::data::{self, RawDataset};
use super::records::RoundRecord;
use crate::active::select_instance;
use crate::bandit::{BanditState, DeltaPolicy, RegretLedger};
use crate::crowd::{self, make_annotators, noisy_label, optimal_effort, AnnotatorProfile};
use crate::error::{Error, Result};
use crate::features::{self, TransformKind, TransformSpec};
use crate::mechanism::settle;
use crate::model::{fit_variational, CrowdDataset, FitOptions, PrecisionPosterior, VariationalFit, WeightPosterior};
use crate::seeding;

/// Noise standard deviation of the single-source baseline.
pub const SINGLE_SOURCE_SIGMA: f64 = 0.01;
/// Sweep cap for the warm-started refit after each label.
pub const REFIT_SWEEPS: usize = 50;

/// `sqrt(mean((predicted - truth)^2))`.
pub fn rmse(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::invalid(format!(
            "rmse needs equal nonempty lengths, got {} and {}",
            predicted.len(),
            truth.len()
        )));
    }
    let sse: f64 = predicted.iter().zip(truth).map(|(p, z)| (p - z).powi(2)).sum();
    Ok((sse / predicted.len() as f64).sqrt())
}

/// End-of-repetition totals.
#[derive(Clone, Debug, PartialEq)]
pub struct RepetitionSummary {
    pub rep: usize,
    pub rounds: usize,
    pub rmse: f64,
    pub regret: f64,
    pub discarded: u64,
    pub payment: f64,
    /// The unlabeled pool ran out before the budget.
    pub truncated: bool,
    /// Times each participating annotator was chosen, by annotator id.
    pub pulls: Vec<(usize, u64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentOutput {
    pub records: Vec<RoundRecord>,
    pub summaries: Vec<RepetitionSummary>,
}

/// Train/test features after normalization, transform and intercept.
#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub train_rows: Vec<usize>,
    pub train_x: Vec<DVector<f64>>,
    pub train_z: Vec<f64>,
    pub test_x: Vec<DVector<f64>>,
    pub test_z: Vec<f64>,
    pub scale: Option<f64>,
}

fn featurize(x: &DVector<f64>, spec: &TransformSpec, intercept: bool) -> Result<DVector<f64>> {
    let phi = features::transform(x, spec)?;
    Ok(if intercept {
        phi.push(1.0)
    } else {
        phi
    })
}

fn featurize_all(xs: &[DVector<f64>], spec: &TransformSpec, intercept: bool) -> Result<Vec<DVector<f64>>> {
    xs.iter().map(|x| featurize(x, spec, intercept)).collect()
}

/// Affine map from raw labels to the unit scale the model is fitted on.
///
/// The weight prior is `N(0, I)`, so raw targets far from zero (house prices
/// in thousands) get shrunk until the fit explains everything as noise. The
/// center and scale come from the labels the learner has seen, never from
/// the true targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelScale {
    pub center: f64,
    pub scale: f64,
}

impl LabelScale {
    pub fn identity() -> Self {
        LabelScale {
            center: 0.0,
            scale: 1.0,
        }
    }

    /// Mean and population standard deviation of `labels`; a zero spread
    /// keeps scale 1.
    pub fn fit(labels: &[f64]) -> Self {
        if labels.is_empty() {
            return Self::identity();
        }
        let n = labels.len() as f64;
        let center = labels.iter().sum::<f64>() / n;
        let sd = (labels.iter().map(|y| (y - center).powi(2)).sum::<f64>() / n).sqrt();
        LabelScale {
            center,
            scale: if sd > 1e-12 * center.abs().max(1.0) { sd } else { 1.0 },
        }
    }

    pub fn to_model(&self, y: f64) -> f64 {
        (y - self.center) / self.scale
    }

    pub fn to_raw(&self, v: f64) -> f64 {
        self.center + self.scale * v
    }

    /// A precision posterior on the model scale re-expressed for raw labels.
    pub fn raw_precision(&self, p: &PrecisionPosterior) -> PrecisionPosterior {
        PrecisionPosterior::new(p.shape(), p.rate() * self.scale * self.scale)
            .expect("positive rate stays positive")
    }
}

fn predict(fit: &WeightPosterior, scale: &LabelScale, xs: &[DVector<f64>]) -> Vec<f64> {
    xs.iter().map(|x| scale.to_raw(fit.mean().dot(x))).collect()
}

fn test_rmse(fit: &WeightPosterior, scale: &LabelScale, split: &PreparedSplit) -> Result<f64> {
    rmse(&predict(fit, scale, &split.test_x), &split.test_z)
}

fn fit_fresh(ds: &CrowdDataset) -> Result<VariationalFit> {
    let prior = WeightPosterior::isotropic(ds.dim(), 1.0)?;
    let priors = vec![PrecisionPosterior::default(); ds.annotators()];
    fit_variational(ds, &prior, &priors, &FitOptions::default(), None)
}

fn refit(ds: &CrowdDataset, previous: &VariationalFit) -> Result<VariationalFit> {
    let prior = WeightPosterior::isotropic(ds.dim(), 1.0)?;
    let priors = vec![PrecisionPosterior::default(); ds.annotators()];
    let options = FitOptions {
        max_sweeps: REFIT_SWEEPS,
        ..FitOptions::default()
    };
    fit_variational(ds, &prior, &priors, &options, Some((&previous.weights, &previous.precisions)))
}

/// Picks the sigmoid scale whose noiseless-label fit has the lowest RMSE on
/// a validation slice of the training set; ties go to the earlier candidate.
fn select_scale(
    cfg: &ExperimentConfig,
    train: &[DVector<f64>],
    targets: &[f64],
    centers: &[DVector<f64>],
    seed: u64,
) -> Result<f64> {
    let (fit_rows, val_rows) = data::split(
        train.len(),
        cfg.validation_fraction,
        seeding::derive_seed(&[seed, seeding::purpose::VALIDATION]),
    )?;
    let mut best: Option<(f64, f64)> = None;
    for &s in &cfg.s_grid {
        let spec = TransformSpec::sigmoid(centers.to_vec(), s)?;
        let xs: Vec<DVector<f64>> = fit_rows
            .iter()
            .map(|&i| featurize(&train[i], &spec, cfg.intercept))
            .collect::<Result<_>>()?;
        let fit_z: Vec<f64> = fit_rows.iter().map(|&i| targets[i]).collect();
        let label_scale = LabelScale::fit(&fit_z);
        let mut ds = CrowdDataset::new(xs, 1)?;
        for (k, z) in fit_z.iter().enumerate() {
            ds.add_label(k, 0, label_scale.to_model(*z))?;
        }
        let fit = fit_fresh(&ds)?;
        let val_x: Vec<DVector<f64>> = val_rows
            .iter()
            .map(|&i| featurize(&train[i], &spec, cfg.intercept))
            .collect::<Result<_>>()?;
        let val_z: Vec<f64> = val_rows.iter().map(|&i| targets[i]).collect();
        let score = rmse(&predict(&fit.weights, &label_scale, &val_x), &val_z)?;
        if best.is_none_or(|(_, b)| score < b) {
            best = Some((s, score));
        }
    }
    Ok(best.map_or(cfg.s, |(s, _)| s))
}

/// Splits `raw`, normalizes on the training part and applies the configured
/// transform.
pub fn prepare_split(cfg: &ExperimentConfig, raw: &RawDataset, seed: u64) -> Result<PreparedSplit> {
    let (train_rows, test_rows) = data::split(raw.len(), cfg.test_fraction, seed)?;
    let train_raw: Vec<DVector<f64>> = train_rows.iter().map(|&i| raw.features[i].clone()).collect();
    let (train_norm, norm) = features::normalize(&train_raw)?;
    let test_norm: Vec<DVector<f64>> = test_rows
        .iter()
        .map(|&i| norm.apply(&raw.features[i]))
        .collect::<Result<_>>()?;
    let train_z: Vec<f64> = train_rows.iter().map(|&i| raw.targets[i]).collect();
    let (spec, scale) = match cfg.transform {
        TransformKind::Linear => (TransformSpec::linear(), None),
        TransformKind::Sigmoid => {
            let centers = features::fit_centers(&train_norm, raw.dim(), seed)?;
            let s = if cfg.s_grid.is_empty() {
                cfg.s
            } else {
                select_scale(cfg, &train_norm, &train_z, &centers, seed)?
            };
            (TransformSpec::sigmoid(centers, s)?, Some(s))
        }
    };
    Ok(PreparedSplit {
        train_x: featurize_all(&train_norm, &spec, cfg.intercept)?,
        train_z,
        test_x: featurize_all(&test_norm, &spec, cfg.intercept)?,
        test_z: test_rows.iter().map(|&i| raw.targets[i]).collect(),
        train_rows,
        scale,
    })
}

/// Participating annotators with their committed efforts.
pub fn build_crowd(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<(AnnotatorProfile, f64)>> {
    if cfg.strategy == Strategy::SingleSource {
        let beta = SINGLE_SOURCE_SIGMA.powi(-2);
        return Ok(vec![(AnnotatorProfile::new(0, beta)?, beta)]);
    }
    let a = &cfg.annotators;
    let [glo, ghi] = a.good_interval;
    let [blo, bhi] = a.bad_interval;
    let profiles = make_annotators(a.m, a.good, (glo, ghi), (blo, bhi), seed)?;
    let crowd: Vec<(AnnotatorProfile, f64)> = profiles
        .into_iter()
        .map(|p| match a.cost {
            Some(cost) => p.with_strategy(cost),
            None => p,
        })
        .filter_map(|p| {
            let choice = optimal_effort(&p, &cfg.scheme, a.effort_grid);
            choice.participates.then_some((p, choice.effort))
        })
        .collect();
    if crowd.is_empty() {
        return Err(Error::invalid("no annotator participates under the payment scheme"));
    }
    Ok(crowd)
}

fn label_for(seed: u64, profile: &AnnotatorProfile, effort: f64, row: usize, truth: f64) -> f64 {
    noisy_label(truth, effort, &mut crowd::label_rng(seed, profile.id, row))
}

/// One repetition with seed `cfg.seed + rep`.
pub fn run_repetition(cfg: &ExperimentConfig, raw: &RawDataset, rep: usize) -> Result<(Vec<RoundRecord>, RepetitionSummary)> {
    let seed = cfg.seed.wrapping_add(rep as u64);
    let split = prepare_split(cfg, raw, seed)?;
    let crowd = build_crowd(cfg, seed)?;
    let arms = crowd.len();
    let n_train = split.train_x.len();

    let mut ds = CrowdDataset::new(split.train_x.clone(), arms)?;
    let mut seed_rng = seeding::stream(&[seed, seeding::purpose::SEED_POOL]);
    let seed_pool = index::sample(&mut seed_rng, n_train, cfg.seed_pool.min(n_train)).into_vec();
    let mut pool: Vec<usize> = (0..n_train).filter(|i| !seed_pool.contains(i)).collect();

    let mut seed_labels = Vec::with_capacity(seed_pool.len() * arms);
    for &i in &seed_pool {
        for (j, (profile, effort)) in crowd.iter().enumerate() {
            let y = label_for(seed, profile, *effort, split.train_rows[i], split.train_z[i]);
            seed_labels.push((i, j, y));
        }
    }
    let scale = LabelScale::fit(&seed_labels.iter().map(|l| l.2).collect::<Vec<_>>());
    for &(i, j, y) in &seed_labels {
        ds.add_label(i, j, scale.to_model(y))?;
    }
    let mut fit = fit_fresh(&ds)?;
    let residual = |fit: &VariationalFit, i: usize, y: f64| y - scale.to_raw(fit.weights.mean().dot(&split.train_x[i]));

    let policy = match cfg.delta_policy {
        DeltaMode::FixedHorizon => DeltaPolicy::FixedHorizon((seed_labels.len() + cfg.budget) as u64),
        DeltaMode::Anytime => DeltaPolicy::Anytime,
    };
    let mut bandit = BanditState::new(arms, cfg.moment_bound(), policy)?;
    for &(i, j, y) in &seed_labels {
        let r = residual(&fit, i, y);
        bandit.record_outcome(j, r * r)?;
    }
    let efforts: Vec<f64> = crowd.iter().map(|(_, e)| *e).collect();
    let mut ledger = RegretLedger::from_precisions(&efforts)?;
    let mut policy_rng = seeding::stream(&[seed, seeding::purpose::POLICY, cfg.strategy as u64]);

    let mut payment = 0.0;
    let mut rmse_now = test_rmse(&fit.weights, &scale, &split)?;
    let mut records = vec![RoundRecord {
        rep,
        round: 0,
        instance: None,
        annotator: None,
        label: None,
        accepted: None,
        rmse: rmse_now,
        regret: 0.0,
        discarded: bandit.discarded(),
        payment,
    }];
    let mut truncated = false;
    let mut rounds = 0;
    for round in 1..=cfg.budget {
        if cfg.target_rmse.is_some_and(|t| rmse_now <= t) {
            break;
        }
        if pool.is_empty() {
            truncated = true;
            break;
        }
        let pos = match cfg.strategy {
            Strategy::Random => policy_rng.random_range(0..pool.len()),
            _ => {
                let chosen = select_instance(pool.iter().map(|&i| (i, ds.instance(i))), &fit.weights)?;
                pool.iter().position(|&i| i == chosen).expect("chosen from pool")
            }
        };
        let i = pool.remove(pos);
        let j = match cfg.strategy {
            Strategy::RobustUcb => bandit.select_annotator(),
            Strategy::Random | Strategy::InstanceOnly => policy_rng.random_range(0..arms),
            Strategy::SingleSource => 0,
        };
        let (profile, effort) = &crowd[j];
        let row = split.train_rows[i];
        let y = label_for(seed, profile, *effort, row, split.train_z[i]);
        let r = residual(&fit, i, y);
        ds.add_label(i, j, scale.to_model(y))?;
        let outcome = bandit.record_outcome(j, r * r)?;
        ledger.record(j);
        fit = refit(&ds, &fit)?;
        payment += settle(&scale.raw_precision(&fit.precisions[j]), &cfg.scheme);
        rmse_now = test_rmse(&fit.weights, &scale, &split)?;
        rounds = round;
        records.push(RoundRecord {
            rep,
            round,
            instance: Some(row),
            annotator: Some(profile.id),
            label: Some(y),
            accepted: Some(outcome.accepted),
            rmse: rmse_now,
            regret: ledger.regret(),
            discarded: bandit.discarded(),
            payment,
        });
    }
    let summary = RepetitionSummary {
        rep,
        rounds,
        rmse: rmse_now,
        regret: ledger.regret(),
        discarded: bandit.discarded(),
        payment,
        truncated,
        pulls: crowd.iter().map(|(p, _)| p.id).zip(ledger.pulls().iter().copied()).collect(),
    };
    Ok((records, summary))
}

fn parallel_reps<T: Send>(
    reps: usize,
    job: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(reps).max(1);
    let mut results: Vec<Option<Result<T>>> = (0..reps).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (w, chunk) in results.chunks_mut(reps.div_ceil(workers)).enumerate() {
            let job = &job;
            let start = w * reps.div_ceil(workers);
            scope.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(job(start + k));
                }
            });
        }
    });
    results.into_iter().map(|r| r.expect("every repetition ran")).collect()
}

/// Loads the configured data (or draws the synthetic set) and runs every
/// repetition. Repetitions run concurrently; output is in repetition order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let raw = load_data(cfg)?;
    run_on(cfg, &raw)
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<RawDataset> {
    match &cfg.dataset {
        Some(path) => data::load_csv(path),
        None => Ok(data::synthetic(&cfg.synthetic, cfg.seed)?.0),
    }
}

pub fn run_on(cfg: &ExperimentConfig, raw: &RawDataset) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mut out = ExperimentOutput::default();
    for (records, summary) in parallel_reps(cfg.repetitions, |rep| run_repetition(cfg, raw, rep))? {
        out.records.extend(records);
        out.summaries.push(summary);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitSummary {
    pub rep: usize,
    pub rmse: f64,
    pub sweeps: usize,
    pub converged: bool,
    pub scale: Option<f64>,
}

/// Fits on the whole training pool labeled by every annotator, without
/// active learning, once per repetition.
pub fn fit_full_pool(cfg: &ExperimentConfig, raw: &RawDataset) -> Result<Vec<FitSummary>> {
    cfg.validate()?;
    parallel_reps(cfg.repetitions, |rep| {
        let seed = cfg.seed.wrapping_add(rep as u64);
        let split = prepare_split(cfg, raw, seed)?;
        let crowd = build_crowd(cfg, seed)?;
        let mut ds = CrowdDataset::new(split.train_x.clone(), crowd.len())?;
        let mut labels = Vec::with_capacity(ds.len() * crowd.len());
        for i in 0..ds.len() {
            for (j, (profile, effort)) in crowd.iter().enumerate() {
                labels.push((i, j, label_for(seed, profile, *effort, split.train_rows[i], split.train_z[i])));
            }
        }
        let scale = LabelScale::fit(&labels.iter().map(|l| l.2).collect::<Vec<_>>());
        for (i, j, y) in labels {
            ds.add_label(i, j, scale.to_model(y))?;
        }
        let fit = fit_fresh(&ds)?;
        Ok(FitSummary {
            rep,
            rmse: test_rmse(&fit.weights, &scale, &split)?,
            sweeps: fit.report.iterations,
            converged: fit.report.converged,
            scale: split.scale,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 3.5355339059327378, epsilon = 1e-15);
        assert_eq!(rmse(&[2.0], &[0.0]).unwrap(), 2.0);
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            synthetic: data::SyntheticSpec { instances: 60, dim: 3 },
            annotators: super::super::config::AnnotatorSpec {
                m: 4,
                good: 2,
                ..Default::default()
            },
            budget: 15,
            repetitions: 2,
            ..Default::default()
        }
    }

    #[test]
    fn label_scale_round_trips() {
        let s = LabelScale::fit(&[1.0, 3.0]);
        assert_eq!((s.center, s.scale), (2.0, 1.0));
        let s = LabelScale::fit(&[10.0, 30.0]);
        assert_eq!(s.to_model(30.0), 1.0);
        assert_eq!(s.to_raw(-1.0), 10.0);
        assert_eq!(LabelScale::fit(&[5.0, 5.0]).scale, 1.0);
        let p = PrecisionPosterior::new(4.0, 1.0).unwrap();
        assert_eq!(s.raw_precision(&p).expected(), 4.0 / 100.0);
    }

    #[test]
    fn budget_zero_gives_baseline_rows() {
        let cfg = ExperimentConfig { budget: 0, ..small() };
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.records.len(), 2);
        assert!(out.records.iter().all(|r| r.round == 0 && r.instance.is_none()));
    }

    #[test]
    fn records_are_consistent() {
        for strategy in Strategy::ALL {
            let cfg = ExperimentConfig { strategy, ..small() };
            let out = run_experiment(&cfg).unwrap();
            assert_eq!(out.records.len(), 2 * 16);
            for rep in out.records.chunks(16) {
                for w in rep.windows(2) {
                    assert_eq!(w[1].round, w[0].round + 1);
                    assert!(w[1].regret >= w[0].regret);
                    assert!(w[1].discarded >= w[0].discarded);
                    assert!(w[1].payment >= w[0].payment);
                }
                let mut seen: Vec<usize> = rep.iter().filter_map(|r| r.instance).collect();
                seen.sort();
                seen.dedup();
                assert_eq!(seen.len(), 15);
                assert!(rep.iter().all(|r| r.rmse >= 0.0));
            }
            if strategy == Strategy::SingleSource {
                assert!(out.summaries.iter().all(|s| s.regret == 0.0));
            }
        }
    }

    #[test]
    fn pool_exhaustion_truncates() {
        let cfg = ExperimentConfig {
            synthetic: data::SyntheticSpec { instances: 20, dim: 2 },
            budget: 50,
            repetitions: 1,
            ..small()
        };
        let out = run_experiment(&cfg).unwrap();
        let s = &out.summaries[0];
        assert!(s.truncated);
        assert_eq!(s.rounds, 14 - 10);
        assert_eq!(out.records.len(), 1 + 4);
    }

    #[test]
    fn target_rmse_stops_early() {
        let cfg = ExperimentConfig {
            target_rmse: Some(1e6),
            ..small()
        };
        let out = run_experiment(&cfg).unwrap();
        assert!(out.summaries.iter().all(|s| s.rounds == 0 && !s.truncated));
    }

    #[test]
    fn strategic_crowd_excludes_non_participants() {
        let mut cfg = small();
        cfg.annotators.cost = Some(crowd::CostFunction::linear(1e6).unwrap());
        assert!(build_crowd(&cfg, 0).is_err());
        cfg.annotators.cost = Some(crowd::CostFunction::quadratic(1e-4).unwrap());
        let crowd = build_crowd(&cfg, 0).unwrap();
        assert!(crowd.iter().all(|(p, e)| p.strategic && *e > cfg.scheme.beta_lower()));
    }

    #[test]
    fn sigmoid_scale_selection() {
        let cfg = ExperimentConfig {
            transform: TransformKind::Sigmoid,
            s_grid: vec![0.5, 2.0, 8.0],
            ..small()
        };
        let raw = load_data(&cfg).unwrap();
        let split = prepare_split(&cfg, &raw, 0).unwrap();
        assert!(cfg.s_grid.contains(&split.scale.unwrap()));
        assert_eq!(split.train_x[0].len(), 4);
        assert!(split.train_x.iter().all(|x| x[3] == 1.0 && x.iter().all(|v| (0.5..=1.0).contains(v))));
    }

    #[test]
    fn full_pool_fit_runs() {
        let cfg = small();
        let raw = load_data(&cfg).unwrap();
        let fits = fit_full_pool(&cfg, &raw).unwrap();
        assert_eq!(fits.len(), 2);
        assert!(fits.iter().all(|f| f.rmse < 0.5 && f.converged));
    }
}
