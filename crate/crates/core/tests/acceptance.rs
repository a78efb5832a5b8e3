//! Acceptance criteria 1-9. Runs as a plain binary under `cargo test` and
//! prints one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use grm_core::bayes::{sample_posterior, summarize_posterior, BayesConfig};
use grm_core::evaluation::{CalibrationMethod, EvaluationConfig};
use grm_core::math::{logistic, pearson};
use grm_core::mml::{calibrate_mml, MmlConfig};
use grm_core::quadrature::{trapezoid_grid, GaussHermite};
use grm_core::scoring::{
    mml_score_objective, score_eap, score_mml, score_wle, wle_objective, ScoringMethod, TruncatedNormalPrior,
};
use grm_core::study::{generate_truth, run_synthetic_study, StudyConfig, StudyReport};
use grm_core::{
    category_probability, logistic_normal_integral, response_log_likelihood, simulate_responses, Item, ItemParameters,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_item(rng: &mut ChaCha8Rng, id: String) -> Item {
    let j = rng.random_range(2..=7);
    let mut t: Vec<f64> = (0..j - 1).map(|_| rng.random_range(-4.0..4.0)).collect();
    t.sort_by(f64::total_cmp);
    for k in 1..t.len() {
        if t[k] <= t[k - 1] {
            t[k] = t[k - 1] + 1e-3;
        }
    }
    Item::new(id, rng.random_range(0.2..4.0), t).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_sum = 0.0f64;
    let mut monotone = true;
    for k in 0..10_000 {
        let item = random_item(&mut rng, format!("i{k}"));
        let theta = rng.random_range(-8.0..8.0);
        let total: f64 = (0..item.categories()).map(|j| category_probability(theta, &item, j).unwrap()).sum();
        worst_sum = worst_sum.max((total - 1.0).abs());
        let delta = rng.random_range(1e-3..1.0);
        for j in 1..item.categories() {
            let (a, b) = (item.cumulative(theta, j), item.cumulative(theta + delta, j));
            if !(b > a || (a == b && 1.0 - a < 1e-12)) {
                monotone = false;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst_sum < 1e-12 && monotone && elapsed < Duration::from_secs(1),
        format!("max |sum-1| = {worst_sum:.2e}, monotone = {monotone}, {elapsed:.2?}"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let gh = GaussHermite::new(201);
    let mut worst = 0.0f64;
    for lam in [0.5, 1.0, 2.0, 4.0] {
        for k in 0..=120 {
            let d = -6.0 + 0.1 * k as f64;
            worst = worst.max((logistic_normal_integral(d, 0.0, lam, 0.0) - logistic(lam * d)).abs());
            for sigma in [0.25, 0.5, 1.0, 2.0] {
                let exact = gh.expect(d, sigma, |t| logistic(lam * t));
                worst = worst.max((logistic_normal_integral(d, sigma, lam, 0.0) - exact).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 0.01 && elapsed < Duration::from_secs(1),
        format!("max deviation {worst:.5}, {elapsed:.2?}"),
    )
}

fn recovery(truth: &ItemParameters, fit: &ItemParameters) -> (f64, f64) {
    let lt: Vec<f64> = truth.iter().map(|i| i.discrimination).collect();
    let lf: Vec<f64> = fit.iter().map(|i| i.discrimination).collect();
    let tt: Vec<f64> = truth.iter().flat_map(|i| i.thresholds.clone()).collect();
    let tf: Vec<f64> = fit.iter().flat_map(|i| i.thresholds.clone()).collect();
    (pearson(&lt, &lf).unwrap_or(f64::NAN), pearson(&tt, &tf).unwrap_or(f64::NAN))
}

fn recovery_config(persons: usize, seed: u64, threshold_range: [f64; 2]) -> StudyConfig {
    StudyConfig {
        persons,
        items: 10,
        categories: 4,
        threshold_range,
        seed,
        ..Default::default()
    }
}

fn criterion_3() -> Outcome {
    let config = recovery_config(1000, 3, [-2.5, 2.5]);
    let truth = generate_truth(&config).unwrap();
    let r = simulate_responses(&truth.items, &truth.thetas, 31);
    let start = Instant::now();
    let fit = calibrate_mml(&r, &MmlConfig::default()).unwrap();
    let elapsed = start.elapsed();
    let ascent = fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-8);
    let (rl, rt) = recovery(&truth.items, &fit.items);
    outcome(
        ascent && fit.converged && rl > 0.9 && rt > 0.95 && elapsed < Duration::from_secs(60),
        format!(
            "{} EM iterations, ascent = {ascent}, r_lambda = {rl:.4}, r_tau = {rt:.4}, {elapsed:.2?}",
            fit.iterations
        ),
    )
}

fn criterion_4() -> Outcome {
    let config = recovery_config(500, 4, [0.2, 2.5]);
    let truth = generate_truth(&config).unwrap();
    let r = simulate_responses(&truth.items, &truth.thetas, 41);
    let start = Instant::now();
    let draws = sample_posterior(&r, &BayesConfig { seed: 4, ..Default::default() }).unwrap();
    let elapsed = start.elapsed();
    let unit = draws.standardized();
    let k = draws.n_item_params();
    let rhat = |d: &grm_core::bayes::PosteriorDraws| d.diagnostics[..k].iter().map(|x| x.rhat).fold(0.0, f64::max);
    let (raw_rhat, unit_rhat) = (rhat(&draws), rhat(&unit));
    let summary = summarize_posterior(&unit).unwrap();
    let (rl, rt) = recovery(&truth.items, &summary.items);
    let true_values: Vec<f64> = truth
        .items
        .iter()
        .map(|i| i.discrimination)
        .chain(truth.items.iter().flat_map(|i| i.thresholds.clone()))
        .collect();
    let covered = true_values
        .iter()
        .enumerate()
        .filter(|&(p, &v)| {
            let (lo, hi) = unit.interval(p, 0.9);
            lo <= v && v <= hi
        })
        .count();
    let coverage = covered as f64 / true_values.len() as f64;
    outcome(
        raw_rhat <= 1.01
            && unit_rhat <= 1.01
            && rl > 0.9
            && rt > 0.95
            && coverage >= 0.8
            && elapsed < Duration::from_secs(15 * 60),
        format!(
            "max item R-hat {raw_rhat:.4} (unit scale {unit_rhat:.4}), r_lambda = {rl:.4}, r_tau = {rt:.4}, \
             90% coverage {covered}/{}, {elapsed:.2?}",
            true_values.len()
        ),
    )
}

/// Posterior mean and sd under the truncated prior by a 100,001-point trapezoid.
fn dense_eap(row: &[Option<u8>], bank: &ItemParameters, prior: &TruncatedNormalPrior) -> (f64, f64) {
    let (nodes, weights) = trapezoid_grid(prior.lower, prior.upper, 100_001);
    let logs: Vec<f64> = nodes
        .iter()
        .map(|&t| response_log_likelihood(row, t, bank) - 0.5 * ((t - prior.mean) / prior.sd).powi(2))
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for ((&t, &w), &l) in nodes.iter().zip(&weights).zip(&logs) {
        let p = w * (l - top).exp();
        z += p;
        m1 += p * t;
        m2 += p * t * t;
    }
    let mean = m1 / z;
    (mean, (m2 / z - mean * mean).max(0.0).sqrt())
}

fn grid_argmax(f: impl Fn(f64) -> f64) -> f64 {
    let n = 100_001;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for k in 0..n {
        let t = -8.0 + 16.0 * k as f64 / (n - 1) as f64;
        let v = f(t);
        if v > best.0 {
            best = (v, t);
        }
    }
    best.1
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let prior = TruncatedNormalPrior::default();
    let mut worst = BTreeMap::from([("wle", 0.0f64), ("mml", 0.0), ("eap", 0.0)]);
    let mut scoring_time = Duration::ZERO;
    let start = Instant::now();
    for r in 0..100 {
        let bank = ItemParameters::new((0..5).map(|i| random_item(&mut rng, format!("r{r}i{i}"))).collect()).unwrap();
        let row: Vec<Option<u8>> = bank.iter().map(|it| Some(rng.random_range(0..it.categories()) as u8)).collect();
        let t = Instant::now();
        let wle = score_wle(&row, &bank).unwrap().estimate;
        let mml = score_mml(&row, &bank).unwrap().estimate;
        let eap = score_eap(&row, &bank, &prior).unwrap().estimate;
        scoring_time += t.elapsed();
        let w = worst.get_mut("wle").unwrap();
        *w = w.max((wle.mean - grid_argmax(|t| wle_objective(&row, t, &bank))).abs());
        let w = worst.get_mut("mml").unwrap();
        *w = w.max((mml.mean - grid_argmax(|t| mml_score_objective(&row, t, &bank))).abs());
        let (m, s) = dense_eap(&row, &bank, &prior);
        let w = worst.get_mut("eap").unwrap();
        *w = w.max((eap.mean - m).abs()).max((eap.sd - s).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst.values().all(|&w| w < 1e-4) && scoring_time < Duration::from_secs(10),
        format!(
            "max |estimate - oracle|: wle {:.2e}, mml {:.2e}, eap {:.2e}; scorers {scoring_time:.2?}, with oracles {elapsed:.2?}",
            worst["wle"], worst["mml"], worst["eap"]
        ),
    )
}

fn study_config() -> StudyConfig {
    StudyConfig {
        domain: "acceptance".into(),
        persons: 1000,
        items: 20,
        categories: 5,
        folds: 4,
        seed: 6,
        ..Default::default()
    }
}

fn criterion_6(report: &StudyReport, elapsed: Duration) -> Outcome {
    let mut pass = elapsed < Duration::from_secs(3600);
    let mut detail = Vec::new();
    for scoring in [ScoringMethod::Eap, ScoringMethod::Mml] {
        let bayes = &report.deviance_pair(CalibrationMethod::Bayes, scoring).unwrap().expected;
        let mml = &report.deviance_pair(CalibrationMethod::Mml, scoring).unwrap().expected;
        let wins = bayes
            .per_fold
            .iter()
            .zip(&mml.per_fold)
            .filter(|(b, m)| b.converged && m.converged && b.deviance < m.deviance)
            .count();
        pass &= wins >= 3;
        detail.push(format!("{scoring}: bayes < mml in {wins}/4 folds"));
    }
    for calibration in CalibrationMethod::ALL {
        let total = |s| report.deviance_pair(calibration, s).unwrap().expected.total;
        let (wle, eap, mml) = (total(ScoringMethod::Wle), total(ScoringMethod::Eap), total(ScoringMethod::Mml));
        pass &= wle > eap && wle > mml;
        detail.push(format!("{calibration} totals wle {wle:.1} eap {eap:.1} mml {mml:.1}"));
    }
    let excluded: usize = report.deviance.iter().map(|p| p.expected.excluded_folds.len()).sum();
    detail.push(format!("{excluded} excluded fold reports, study {elapsed:.2?}"));
    outcome(pass, detail.join("; "))
}

fn criterion_7(report: &StudyReport) -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    for calibration in CalibrationMethod::ALL {
        let r = |s| report.agreement_with_calibration(calibration, s).unwrap_or(f64::NAN);
        let (eap, mml, wle) = (r(ScoringMethod::Eap), r(ScoringMethod::Mml), r(ScoringMethod::Wle));
        pass &= eap > 0.99 && mml > 0.99 && wle < eap && wle < mml;
        detail.push(format!("{calibration}: r_eap {eap:.5} r_mml {mml:.5} r_wle {wle:.5}"));
    }
    outcome(pass, detail.join("; "))
}

fn criterion_8(report: &StudyReport) -> Outcome {
    let prior = TruncatedNormalPrior::default();
    let mut banks: Vec<ItemParameters> = report.calibrations.iter().map(|c| c.items.clone()).collect();
    for seed in 0..20 {
        let config = StudyConfig {
            items: 12,
            categories: 4,
            persons: 1,
            threshold_range: [-2.5, 2.5],
            seed: 800 + seed,
            ..Default::default()
        };
        banks.push(generate_truth(&config).unwrap().items);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut cases, mut shrunk, mut inside) = (0, 0, 0);
    for bank in &banks {
        for mask in 0..25 {
            let keep: Vec<bool> = (0..bank.len()).map(|_| mask == 0 || rng.random_bool(0.6)).collect();
            if !keep.iter().any(|&k| k) {
                continue;
            }
            for top in [false, true] {
                let row: Vec<Option<u8>> = bank
                    .iter()
                    .zip(&keep)
                    .map(|(it, &k)| k.then_some(if top { it.categories() as u8 - 1 } else { 0 }))
                    .collect();
                let eap = score_eap(&row, bank, &prior).unwrap().estimate.mean;
                let mml = score_mml(&row, bank).unwrap().estimate.mean;
                cases += 1;
                shrunk += (eap.abs() < mml.abs()) as usize;
                inside += (eap > -5.0 && eap < 5.0) as usize;
            }
        }
    }
    outcome(
        shrunk == cases && inside == cases,
        format!("{cases} extreme rows: |eap| < |mml| in {shrunk}, eap inside (-5, 5) in {inside}"),
    )
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name == "manifest.json" {
            continue;
        }
        out.insert(name, std::fs::read(&path).unwrap());
    }
    out
}

/// The manifest minus its wall-clock fields, with output paths made relative.
fn stable_manifest(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let m = v.as_object_mut().unwrap();
    m.remove("started_unix");
    m.remove("finished_unix");
    let prefix = dir.to_string_lossy().into_owned();
    for a in m.get_mut("outputs").unwrap().as_array_mut().unwrap() {
        let p = a["path"].as_str().unwrap().trim_start_matches(&prefix).to_string();
        a["path"] = serde_json::Value::String(p);
    }
    v
}

fn criterion_9() -> Outcome {
    let config = StudyConfig {
        domain: "repeat".into(),
        persons: 200,
        control_persons: 100,
        items: 8,
        categories: 4,
        folds: 2,
        seed: 9,
        evaluation: EvaluationConfig {
            bayes: BayesConfig {
                warmup: 300,
                samples_per_chain: 300,
                ..Default::default()
            },
            ..Default::default()
        },
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let start = Instant::now();
    run_synthetic_study(&config, &a).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    pool.install(|| run_synthetic_study(&config, &b)).unwrap();
    let elapsed = start.elapsed();
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    let differing: Vec<&String> = ta.keys().filter(|k| ta.get(*k) != tb.get(*k)).collect();
    let manifests_match = stable_manifest(&a) == stable_manifest(&b);
    outcome(
        differing.is_empty() && ta.len() == tb.len() && manifests_match,
        format!(
            "{} report files compared, {} differ {differing:?}, manifests match = {manifests_match}, {elapsed:.2?}",
            ta.len(),
            differing.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failures += (!o.pass) as usize;
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    report(5, criterion_5());
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let study = run_synthetic_study(&study_config(), dir.path()).unwrap();
    let elapsed = start.elapsed();
    report(6, criterion_6(&study, elapsed));
    report(7, criterion_7(&study));
    report(8, criterion_8(&study));
    report(9, criterion_9());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
