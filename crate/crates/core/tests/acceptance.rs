//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crowd_al::active::{det_shrinkage, error_contraction_bounds, select_instance};
use crowd_al::bandit::{regret_bound, truncated_mean, truncation_threshold_for, BanditState, DeltaPolicy, RegretLedger};
use crowd_al::crowd::{make_annotators, noisy_label, optimal_effort, AnnotatorProfile, CostFunction};
use crowd_al::harness::{self, ExperimentConfig, Strategy};
use crowd_al::mechanism::{utility, PaymentScheme};
use crowd_al::model::{
    fit_variational, vi_update_weights, CrowdDataset, FitOptions, PrecisionPosterior, WeightPosterior,
};
use crowd_al::seeding;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn housing() -> Option<PathBuf> {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/housing.csv");
    p.exists().then_some(p)
}

fn rng(keys: &[u64]) -> rand_chacha::ChaCha8Rng {
    seeding::stream(keys)
}

fn random_spd<R: Rng>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.05
}

fn random_vec<R: Rng>(d: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c1_determinant_lemma() -> Outcome {
    let mut r = rng(&[1, 1]);
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let d = 1 + k % 10;
        let lambda = random_spd(d, &mut r);
        let x = random_vec(d, &mut r);
        let beta = r.random_range(0.01..10.0);
        let w = WeightPosterior::new(DVector::zeros(d), lambda.clone()).unwrap();
        let updated = &lambda + &x * x.transpose() * beta;
        let oracle = lambda.clone().lu().determinant() / updated.lu().determinant();
        let got = det_shrinkage(&w, &x, beta).unwrap();
        worst = worst.max((got - oracle).abs() / oracle.abs());
    }
    outcome(worst <= 1e-9, format!("max relative error {worst:.2e} over 1000 matrices, d <= 10"))
}

fn c2_conjugacy() -> Outcome {
    let mut r = rng(&[2, 1]);
    let d = 4;
    let beta = 2.5;
    let w_true = random_vec(d, &mut r);
    let xs: Vec<DVector<f64>> = (0..30).map(|_| random_vec(d, &mut r)).collect();
    let mut ds = CrowdDataset::new(xs.clone(), 1).unwrap();
    let mut ys = Vec::new();
    for (i, x) in xs.iter().enumerate() {
        let y = noisy_label(w_true.dot(x), beta, &mut r);
        ds.add_label(i, 0, y).unwrap();
        ys.push(y);
    }
    let prior_precision = random_spd(d, &mut r);
    let prior_mean = random_vec(d, &mut r);
    let prior = WeightPosterior::new(prior_mean.clone(), prior_precision.clone()).unwrap();
    // a Gamma prior this concentrated pins E[beta] to `beta` within ~1e-13
    let k = 1e14;
    let pinned = PrecisionPosterior::new(beta * k, k).unwrap();
    let fit = fit_variational(&ds, &prior, &[pinned], &FitOptions::default(), None).unwrap();

    // sequential Kalman updates of (mean, covariance), one observation at a time
    let mut m = prior_mean;
    let mut cov = prior_precision.try_inverse().unwrap();
    for (x, y) in xs.iter().zip(&ys) {
        let sx = &cov * x;
        let gain = &sx / (1.0 / beta + x.dot(&sx));
        m += &gain * (y - x.dot(&m));
        cov -= &gain * sx.transpose();
    }
    let dm = (fit.weights.mean() - &m).amax();
    let dc = (fit.weights.covariance() - &cov).amax();
    let dp = (fit.weights.precision() - cov.try_inverse().unwrap()).amax()
        / fit.weights.precision().amax();
    outcome(
        dm <= 1e-8 && dc <= 1e-8 && dp <= 1e-8,
        format!("max |mean diff| {dm:.2e}, |cov diff| {dc:.2e}, relative |precision diff| {dp:.2e}"),
    )
}

fn crowd_fit_error(n: usize, seed: u64) -> f64 {
    let d = 5;
    let mut r = rng(&[3, seed]);
    let w_true = random_vec(d, &mut r);
    let crowd = make_annotators(3, 2, (0.1, 1.0), (1.0, 2.0), seed).unwrap();
    let xs: Vec<DVector<f64>> = (0..n).map(|_| random_vec(d, &mut r)).collect();
    let mut ds = CrowdDataset::new(xs.clone(), 3).unwrap();
    for (i, x) in xs.iter().enumerate() {
        for (j, p) in crowd.iter().enumerate() {
            ds.add_label(i, j, noisy_label(w_true.dot(x), p.best_precision, &mut r)).unwrap();
        }
    }
    let prior = WeightPosterior::isotropic(d, 1.0).unwrap();
    let priors = vec![PrecisionPosterior::default(); 3];
    let fit = fit_variational(&ds, &prior, &priors, &FitOptions::default(), None).unwrap();
    (fit.weights.mean() - w_true).norm()
}

fn c3_consistency() -> Outcome {
    let small = mean(&(0..10).map(|s| crowd_fit_error(100, s)).collect::<Vec<_>>());
    let large = mean(&(0..10).map(|s| crowd_fit_error(2000, s)).collect::<Vec<_>>());
    outcome(
        large <= 0.1 && large < small,
        format!("mean |mu - w*| = {small:.4} at n=100, {large:.4} at n=2000"),
    )
}

/// Monte-Carlo estimate of `|E_y[mu_{n+1}] - w| / |mu_n - w|` with its
/// standard error, plus the bounds and the exact ratio.
fn contraction_scenario(seed: u64) -> (f64, f64, f64, f64) {
    let d = 5;
    let mut r = rng(&[4, seed]);
    let w_true = random_vec(d, &mut r);
    let crowd = make_annotators(3, 2, (0.1, 1.0), (1.0, 2.0), seed).unwrap();
    let xs: Vec<DVector<f64>> = (0..20).map(|_| random_vec(d, &mut r)).collect();
    let mut ds = CrowdDataset::new(xs.clone(), 3).unwrap();
    for (i, x) in xs.iter().enumerate() {
        for (j, p) in crowd.iter().enumerate() {
            ds.add_label(i, j, noisy_label(w_true.dot(x), p.best_precision, &mut r)).unwrap();
        }
    }
    let prior = WeightPosterior::isotropic(d, 1.0).unwrap();
    let priors = vec![PrecisionPosterior::default(); 3];
    let posterior = fit_variational(&ds, &prior, &priors, &FitOptions::default(), None)
        .unwrap()
        .weights;
    let pool: Vec<DVector<f64>> = (0..200).map(|_| random_vec(d, &mut r)).collect();
    let k = select_instance(pool.iter().enumerate(), &posterior).unwrap();
    let x = pool[k].clone();
    let beta = crowd[0].best_precision;

    let redraws = 2000;
    let err_n = posterior.mean() - &w_true;
    let errs: Vec<DVector<f64>> = (0..redraws)
        .map(|_| {
            let y = noisy_label(w_true.dot(&x), beta, &mut r);
            let mut one = CrowdDataset::new(vec![x.clone()], 1).unwrap();
            one.add_label(0, 0, y).unwrap();
            vi_update_weights(&one, &[beta], &posterior).unwrap().mean() - &w_true
        })
        .collect();
    let avg = errs.iter().fold(DVector::zeros(d), |a, e| a + e) / redraws as f64;
    let ratio = avg.norm() / err_n.norm();
    let dir = &avg / avg.norm();
    let proj: Vec<f64> = errs.iter().map(|e| dir.dot(e)).collect();
    let pm = mean(&proj);
    let sd = (proj.iter().map(|p| (p - pm).powi(2)).sum::<f64>() / (redraws - 1) as f64).sqrt();
    let mc_err = sd / (redraws as f64).sqrt() / err_n.norm();
    let (lower, _) = error_contraction_bounds(&posterior, &x, beta).unwrap();
    (ratio, mc_err, lower, exact_ratio(&posterior, &x, beta, &err_n))
}

fn exact_ratio(posterior: &WeightPosterior, x: &DVector<f64>, beta: f64, err: &DVector<f64>) -> f64 {
    let d = x.len();
    let a = DMatrix::identity(d, d) + posterior.covariance() * x * x.transpose() * beta;
    (a.try_inverse().unwrap() * err).norm() / err.norm()
}

fn c4_error_contraction() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for seed in 0..10 {
        let (ratio, mc, lower, exact) = contraction_scenario(seed);
        let ok = ratio >= lower - 3.0 * mc && ratio <= 1.0 + 3.0 * mc;
        pass &= ok;
        if !ok || seed == 0 {
            details.push(format!(
                "seed {seed}: ratio {ratio:.4} (exact {exact:.4}, MC err {mc:.1e}) vs [{lower:.4}, 1]"
            ));
        }
    }
    outcome(pass, format!("10 scenarios x 2000 redraws; {}", details.join("; ")))
}

fn c5_truncated_mean() -> Outcome {
    let (delta, n, trials) = (0.05f64, 200usize, 1000);
    let log_inv_delta = (1.0 / delta).ln();
    let mut rates = Vec::new();
    for (k, sigma) in [0.5f64, 1.0, 2.0].into_iter().enumerate() {
        let beta = sigma.powi(-2);
        let u = 3.0 * sigma.powi(4);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut r = rng(&[5, k as u64]);
        let bound = -1.0 / beta + 4.0 * (u * log_inv_delta / n as f64).sqrt();
        let threshold = truncation_threshold_for(u, n as u64, log_inv_delta);
        let violations = (0..trials)
            .filter(|_| {
                let samples: Vec<f64> = (0..n).map(|_| -noise.sample(&mut r).powi(2)).collect();
                truncated_mean(&samples, threshold).0 > bound
            })
            .count();
        rates.push((sigma, violations as f64 / trials as f64));
    }
    let worst = rates.iter().map(|r| r.1).fold(0.0, f64::max);
    outcome(
        worst <= 0.07,
        format!(
            "violation rates {} (limit 0.07)",
            rates.iter().map(|(s, v)| format!("sigma={s}: {v:.3}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

struct BanditRun {
    regret_500: f64,
    regret_end: f64,
    discarded: u64,
}

const HORIZON: u64 = 5000;
const MOMENT_BOUND: f64 = 48.0;

fn bandit_run(betas: &[f64], seed: u64) -> BanditRun {
    let mut state = BanditState::new(betas.len(), MOMENT_BOUND, DeltaPolicy::FixedHorizon(HORIZON)).unwrap();
    let mut ledger = RegretLedger::from_precisions(betas).unwrap();
    let noise: Vec<Normal<f64>> = betas.iter().map(|b| Normal::new(0.0, b.sqrt().recip()).unwrap()).collect();
    let mut r = rng(&[6, seed]);
    let mut regret_500 = 0.0;
    let mut last_w = 0;
    for t in 1..=HORIZON {
        let j = state.select_annotator();
        let z: f64 = noise[j].sample(&mut r);
        state.record_outcome(j, z * z).unwrap();
        ledger.record(j);
        assert!(state.discarded() >= last_w);
        last_w = state.discarded();
        if t == 500 {
            regret_500 = ledger.regret();
        }
    }
    BanditRun {
        regret_500,
        regret_end: ledger.regret(),
        discarded: state.discarded(),
    }
}

fn c6_c7_bandit() -> (Outcome, Outcome) {
    let crowd = make_annotators(5, 4, (0.1, 1.0), (1.0, 2.0), 6).unwrap();
    let betas: Vec<f64> = crowd.iter().map(|p| p.best_precision).collect();
    let runs: Vec<BanditRun> = (0..20).map(|s| bandit_run(&betas, s)).collect();
    let ledger = RegretLedger::from_precisions(&betas).unwrap();
    let bound = regret_bound(ledger.gaps(), MOMENT_BOUND, HORIZON as f64);
    let r_end = mean(&runs.iter().map(|r| r.regret_end).collect::<Vec<_>>());
    let r_500 = mean(&runs.iter().map(|r| r.regret_500).collect::<Vec<_>>());
    let w = mean(&runs.iter().map(|r| r.discarded as f64).collect::<Vec<_>>());
    let w_limit = 4.0 * (HORIZON as f64).ln().powi(2);
    let sigmas: Vec<String> = crowd.iter().map(|p| format!("{:.2}", p.best_sigma())).collect();
    (
        outcome(
            r_end <= bound && r_end / 5000.0 < r_500 / 500.0,
            format!(
                "sigmas [{}], u={MOMENT_BOUND}: mean regret {r_end:.1} <= bound {bound:.0}; per-round {:.4} at 5000 vs {:.4} at 500",
                sigmas.join(", "),
                r_end / 5000.0,
                r_500 / 500.0
            ),
        ),
        outcome(w <= w_limit, format!("mean W(5000) = {w:.1} <= {w_limit:.1}")),
    )
}

fn protocol_config() -> ExperimentConfig {
    ExperimentConfig {
        dataset: housing(),
        transform: crowd_al::features::TransformKind::Sigmoid,
        s_grid: vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
        ..ExperimentConfig::default()
    }
}

fn c8_baseline_ordering() -> Outcome {
    let base = ExperimentConfig {
        budget: 100,
        repetitions: 10,
        ..protocol_config()
    };
    let raw = harness::load_data(&base).unwrap();
    let mut stats = Vec::new();
    for strategy in [Strategy::RobustUcb, Strategy::InstanceOnly, Strategy::Random] {
        let cfg = ExperimentConfig { strategy, ..base.clone() };
        let out = harness::run_on(&cfg, &raw).unwrap();
        let rmse = mean(&out.summaries.iter().map(|s| s.rmse).collect::<Vec<_>>());
        let regret = mean(&out.summaries.iter().map(|s| s.regret).collect::<Vec<_>>());
        stats.push((strategy, rmse, regret));
    }
    let (u, i, r) = (stats[0], stats[1], stats[2]);
    let pass = u.1 <= i.1 && i.1 <= r.1 && u.2 < i.2 && i.2 < r.2;
    let source = if base.dataset.is_some() { "housing" } else { "synthetic fallback" };
    outcome(
        pass,
        format!(
            "{source}: rmse {:.4} / {:.4} / {:.4}, regret {:.2} / {:.2} / {:.2} (robust_ucb / instance_only / random)",
            u.1, i.1, r.1, u.2, i.2, r.2
        ),
    )
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crowd-al"))
}

fn c9_full_pool_bracket() -> Outcome {
    let Some(data) = housing() else {
        return outcome(false, "data/housing.csv is missing");
    };
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("fit.toml");
    std::fs::write(
        &config,
        "transform = \"sigmoid\"\ns_grid = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0]\n",
    )
    .unwrap();
    let out = cli()
        .args(["fit", "--data"])
        .arg(&data)
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    let mean_rmse = text
        .lines()
        .find_map(|l| l.strip_prefix("mean rmse="))
        .and_then(|l| l.split_whitespace().next())
        .and_then(|v| v.parse::<f64>().ok());
    match mean_rmse {
        Some(v) if out.status.success() => outcome(
            (4.0..=5.6).contains(&v),
            format!("mean test RMSE over 10 splits {v:.4} (bracket [4.0, 5.6])"),
        ),
        _ => outcome(false, format!("fit failed: {}", String::from_utf8_lossy(&out.stderr))),
    }
}

fn c10_mechanism_audit() -> Outcome {
    let mut r = rng(&[10, 0]);
    let mut participants = 0;
    let mut violations = 0;
    let mut c1_participants = 0;
    for _ in 0..100 {
        let b = r.random_range(1.0..20.0);
        let lo = r.random_range(0.5..5.0);
        let hi = lo + r.random_range(0.5..10.0);
        let scheme = PaymentScheme::new(b, lo, hi).unwrap();
        let best = r.random_range(0.5..3.0) * hi;
        let costs = [
            CostFunction::linear(r.random_range(0.05..1.0) * b / hi).unwrap(),
            CostFunction::quadratic(r.random_range(0.01..1.0) * b / (hi * hi)).unwrap(),
            CostFunction::threshold(
                r.random_range(0.05..1.0) * b / hi,
                r.random_range(0.1..5.0) * b / (hi * hi),
                r.random_range(lo..hi),
            )
            .unwrap(),
        ];
        for cost in costs {
            let p = AnnotatorProfile::new(0, best).unwrap().with_strategy(cost);
            let choice = optimal_effort(&p, &scheme, 1000);
            if choice.participates {
                participants += 1;
                if !(utility(choice.effort, &cost, &scheme) >= 0.0 && choice.effort > lo) {
                    violations += 1;
                }
            }
        }
        // c(beta) >= P(beta) everywhere once the slope reaches B / beta_upper
        let c1 = CostFunction::linear(r.random_range(1.0..3.0) * b / hi).unwrap();
        let p = AnnotatorProfile::new(0, best).unwrap().with_strategy(c1);
        if optimal_effort(&p, &scheme, 1000).participates {
            c1_participants += 1;
        }
    }
    outcome(
        violations == 0 && c1_participants == 0 && participants > 0,
        format!(
            "{participants} participants over 300 annotator-scheme pairs, {violations} IR/quality violations; {c1_participants} of 100 never-profitable annotators participated"
        ),
    )
}

fn c11_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut configs = vec![("synthetic", "budget = 40\nrepetitions = 2\nstrategy = \"random\"\n".to_string())];
    if let Some(data) = housing() {
        configs.push((
            "housing",
            format!(
                "dataset = {:?}\nbudget = 20\nrepetitions = 2\ntransform = \"sigmoid\"\ns_grid = [1.0, 4.0]\n",
                data.to_string_lossy()
            ),
        ));
    }
    let mut notes = Vec::new();
    let mut pass = true;
    for (name, text) in configs {
        let config = dir.path().join(format!("{name}.toml"));
        std::fs::write(&config, text).unwrap();
        for format in ["csv", "jsonl"] {
            let outputs: Vec<Vec<u8>> = (0..2)
                .map(|k| {
                    let out = dir.path().join(format!("{name}-{k}.{format}"));
                    let status = cli()
                        .args(["run", "--config"])
                        .arg(&config)
                        .args(["--format", format, "--seed", "11", "--out"])
                        .arg(&out)
                        .output()
                        .unwrap();
                    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
                    std::fs::read(out).unwrap()
                })
                .collect();
            let same = outputs[0] == outputs[1] && !outputs[0].is_empty();
            pass &= same;
            notes.push(format!("{name}/{format} {}", if same { "identical" } else { "DIFFER" }));
        }
    }
    outcome(pass, notes.join(", "))
}

fn print_line(n: usize, name: &str, limit: Option<Duration>, o: &Outcome, elapsed: Duration) -> bool {
    let pass = o.pass && limit.is_none_or(|l| elapsed <= l);
    let limit_note = limit.map_or(String::new(), |l| format!(" (limit {}s)", l.as_secs()));
    println!(
        "{} criterion {n:>2} {name}: {} [{:.1}s{limit_note}]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    pass
}

fn report(n: usize, name: &str, limit: Option<Duration>, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = run();
    print_line(n, name, limit, &o, start.elapsed())
}

fn main() {
    let secs = |s| Some(Duration::from_secs(s));
    let mut results = vec![
        report(1, "determinant lemma", secs(10), c1_determinant_lemma),
        report(2, "conjugacy oracle", secs(1), c2_conjugacy),
        report(3, "consistency", secs(60), c3_consistency),
        report(4, "error contraction", secs(30), c4_error_contraction),
        report(5, "truncated-mean concentration", secs(30), c5_truncated_mean),
    ];
    let start = Instant::now();
    let (c6, c7) = c6_c7_bandit();
    let shared = start.elapsed();
    results.push(print_line(6, "regret bound", secs(300), &c6, shared));
    results.push(print_line(7, "discard bound", secs(300), &c7, shared));
    results.extend([
        report(8, "baseline ordering", secs(900), c8_baseline_ordering),
        report(9, "full-pool RMSE bracket", secs(300), c9_full_pool_bracket),
        report(10, "mechanism audit", secs(10), c10_mechanism_audit),
        report(11, "determinism", None, c11_determinism),
    ]);
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
