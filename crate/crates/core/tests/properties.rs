use proptest::prelude::*;

use grm_core::evaluation::{fold_deviance, point_deviance};
use grm_core::io;
use grm_core::math::logistic;
use grm_core::quadrature::GaussHermite;
use grm_core::scoring::{score_eap, score_mml, score_wle, TruncatedNormalPrior};
use grm_core::{
    category_probability, expected_category_probability, fisher_information, logistic_normal_integral, AbilityEstimate,
    Item, ItemParameters, ResponseMatrix,
};

fn item_strategy() -> impl Strategy<Value = Item> {
    (0.2f64..4.0, prop::collection::vec(-3.0f64..3.0, 1..6)).prop_map(|(lam, mut t)| {
        t.sort_by(f64::total_cmp);
        for k in 1..t.len() {
            if t[k] - t[k - 1] < 0.05 {
                t[k] = t[k - 1] + 0.05;
            }
        }
        Item::new("i", lam, t).unwrap()
    })
}

fn bank_strategy(min: usize, max: usize) -> impl Strategy<Value = ItemParameters> {
    prop::collection::vec(item_strategy(), min..max).prop_map(|items| {
        ItemParameters::new(
            items
                .into_iter()
                .enumerate()
                .map(|(k, it)| Item::new(format!("item{k}"), it.discrimination, it.thresholds.clone()).unwrap())
                .collect(),
        )
        .unwrap()
    })
}

/// A bank with a row of observed categories, at least one non-missing.
fn bank_and_row() -> impl Strategy<Value = (ItemParameters, Vec<Option<u8>>)> {
    bank_strategy(2, 8).prop_flat_map(|bank| {
        let cells: Vec<_> = bank
            .iter()
            .map(|it| prop::option::weighted(0.85, 0..it.categories() as u8))
            .collect();
        (Just(bank), cells).prop_filter("needs a response", |(_, row)| row.iter().any(Option::is_some))
    })
}

fn gauss_hermite_probability(item: &Item, mean: f64, sd: f64, j: usize) -> f64 {
    GaussHermite::new(201).expect(mean, sd, |t| category_probability(t, item, j).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn probabilities_sum_to_one(item in item_strategy(), theta in -10.0f64..10.0) {
        let total: f64 = (0..item.categories()).map(|j| category_probability(theta, &item, j).unwrap()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cumulative_curves_increase(item in item_strategy(), theta in -6.0f64..6.0, step in 0.01f64..1.0) {
        for j in 1..item.categories() {
            prop_assert!(item.cumulative(theta + step, j) > item.cumulative(theta, j));
        }
    }

    #[test]
    fn information_matches_expected_curvature(item in item_strategy(), theta in -3.0f64..3.0) {
        let h = 1e-4;
        let curvature: f64 = (0..item.categories())
            .map(|j| {
                let lp = |t: f64| category_probability(t, &item, j).unwrap().ln();
                let d2 = (lp(theta + h) - 2.0 * lp(theta) + lp(theta - h)) / (h * h);
                -category_probability(theta, &item, j).unwrap() * d2
            })
            .sum();
        let bank = ItemParameters::new(vec![item]).unwrap();
        let info = fisher_information(theta, &bank);
        prop_assert!((info - curvature).abs() <= 1e-3 * info.max(1e-3), "{info} vs {curvature}");
    }

    #[test]
    fn zero_sd_expected_probability_is_close_to_exact(item in item_strategy(), theta in -5.0f64..5.0) {
        for j in 0..item.categories() {
            let e = expected_category_probability(AbilityEstimate::new(theta, 0.0), &item, j).unwrap();
            let p = category_probability(theta, &item, j).unwrap();
            prop_assert!((e - p).abs() < 0.02, "category {j}: {e} vs {p}");
        }
    }

    #[test]
    fn expected_probabilities_are_a_distribution(item in item_strategy(), mean in -4.0f64..4.0, sd in 0.0f64..3.0) {
        let total: f64 = (0..item.categories())
            .map(|j| expected_category_probability(AbilityEstimate::new(mean, sd), &item, j).unwrap())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        let exact: f64 = (0..item.categories()).map(|j| gauss_hermite_probability(&item, mean, sd, j)).sum();
        prop_assert!((exact - 1.0).abs() < 1e-9);
    }

    #[test]
    fn scorers_ignore_item_order((bank, row) in bank_and_row(), seed in any::<u64>()) {
        let n = bank.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.rotate_left((seed % n as u64) as usize);
        if seed % 2 == 0 {
            order.reverse();
        }
        let shuffled = ItemParameters::new(order.iter().map(|&k| bank.items()[k].clone()).collect()).unwrap();
        let row2: Vec<Option<u8>> = order.iter().map(|&k| row[k]).collect();
        let prior = TruncatedNormalPrior::default();
        let pairs = [
            (score_wle(&row, &bank).unwrap(), score_wle(&row2, &shuffled).unwrap()),
            (score_mml(&row, &bank).unwrap(), score_mml(&row2, &shuffled).unwrap()),
            (score_eap(&row, &bank, &prior).unwrap(), score_eap(&row2, &shuffled, &prior).unwrap()),
        ];
        for (a, b) in pairs {
            let tol = 1e-5 * a.estimate.sd.max(1.0);
            prop_assert!((a.estimate.mean - b.estimate.mean).abs() < tol, "{a:?} vs {b:?}");
            prop_assert!((a.estimate.sd - b.estimate.sd).abs() < tol);
            prop_assert_eq!(a.flag, b.flag);
        }
    }

    #[test]
    fn eap_stays_inside_the_prior_support((bank, row) in bank_and_row(), sd in 0.3f64..3.0) {
        let prior = TruncatedNormalPrior::symmetric(sd, 5.0);
        let s = score_eap(&row, &bank, &prior).unwrap().estimate;
        prop_assert!(s.mean > -5.0 && s.mean < 5.0);
        prop_assert!(s.sd > 0.0 && s.sd <= 5.0);
    }

    #[test]
    fn raising_a_dichotomous_response_never_lowers_wle_or_eap(
        params in prop::collection::vec((0.3f64..3.0, -2.5f64..2.5), 2..8),
        bits in prop::collection::vec(any::<bool>(), 8),
        flip in 0usize..8,
    ) {
        let n = params.len();
        let bank = ItemParameters::new(
            params.iter().enumerate().map(|(k, &(l, t))| Item::new(format!("d{k}"), l, vec![t]).unwrap()).collect(),
        )
        .unwrap();
        let flip = flip % n;
        let mut low: Vec<Option<u8>> = bits[..n].iter().map(|&b| Some(b as u8)).collect();
        low[flip] = Some(0);
        let mut high = low.clone();
        high[flip] = Some(1);
        let prior = TruncatedNormalPrior::default();
        let tol = 1e-7;
        prop_assert!(score_wle(&high, &bank).unwrap().estimate.mean >= score_wle(&low, &bank).unwrap().estimate.mean - tol);
        prop_assert!(
            score_eap(&high, &bank, &prior).unwrap().estimate.mean >= score_eap(&low, &bank, &prior).unwrap().estimate.mean - tol
        );
    }

    #[test]
    fn eap_shrinks_extreme_rows_more_than_mml(
        params in prop::collection::vec((0.5f64..2.5, -0.3f64..0.3, 0.3f64..1.5), 5..12),
        top in any::<bool>(),
    ) {
        let n = params.len();
        let bank = ItemParameters::new(
            params
                .iter()
                .enumerate()
                .map(|(k, &(l, jitter, gap))| {
                    let t = -2.0 + 4.0 * k as f64 / (n - 1) as f64 + jitter - gap / 2.0;
                    Item::new(format!("x{k}"), l, vec![t, t + gap]).unwrap()
                })
                .collect(),
        )
        .unwrap();
        let row = vec![Some(if top { 2 } else { 0 }); bank.len()];
        let eap = score_eap(&row, &bank, &TruncatedNormalPrior::default()).unwrap().estimate.mean;
        let mml = score_mml(&row, &bank).unwrap().estimate.mean;
        prop_assert!(eap.abs() < mml.abs(), "eap {eap} mml {mml}");
        prop_assert!(eap.abs() < 5.0);
    }

    #[test]
    fn point_deviance_is_fold_deviance_at_zero_sd(
        (bank, row) in bank_and_row(),
        means in prop::collection::vec(-3.0f64..3.0, 1..4),
    ) {
        let persons = means.len();
        let entries: Vec<Option<u8>> = (0..persons).flat_map(|_| row.clone()).collect();
        let m = ResponseMatrix::new("p", (0..persons).map(|p| format!("p{p}")).collect(), bank.ids(), bank.categories(), entries).unwrap();
        let with_sd: Vec<AbilityEstimate> = means.iter().map(|&t| AbilityEstimate::new(t, 0.7)).collect();
        let zero: Vec<AbilityEstimate> = means.iter().map(|&t| AbilityEstimate::new(t, 0.0)).collect();
        prop_assert_eq!(point_deviance(&with_sd, &m, &bank).unwrap(), fold_deviance(&zero, &m, &bank).unwrap());
    }

    #[test]
    fn items_and_responses_round_trip(bank in bank_strategy(1, 6), seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.json");
        io::save_items(&bank, &path).unwrap();
        prop_assert_eq!(io::load_items(&path).unwrap(), bank.clone());

        let thetas: Vec<f64> = (0..7).map(|k| (k as f64 - 3.0) * 0.9).collect();
        let m = grm_core::simulate_responses(&bank, &thetas, seed);
        let rpath = dir.path().join("r.csv");
        io::save_responses(&m, &rpath).unwrap();
        let back = io::load_responses_for(&rpath, &bank).unwrap().with_domain(m.domain().to_string());
        prop_assert_eq!(&back, &m);

        let abilities: Vec<AbilityEstimate> = thetas.iter().map(|&t| AbilityEstimate::new(t / 3.0, (t * t).sqrt() / 7.0)).collect();
        let apath = dir.path().join("a.csv");
        io::save_abilities(m.person_ids(), &abilities, &apath).unwrap();
        let (ids, back) = io::load_abilities(&apath).unwrap();
        prop_assert_eq!(ids, m.person_ids().to_vec());
        prop_assert_eq!(back, abilities);
    }
}

#[test]
fn probit_approximation_is_within_bound_of_the_logistic() {
    for lam in [0.5, 1.0, 2.0, 4.0] {
        for k in 0..=1200 {
            let d = -6.0 + 0.01 * k as f64;
            let err = (logistic_normal_integral(d, 0.0, lam, 0.0) - logistic(lam * d)).abs();
            assert!(err < 0.01, "λ={lam}, θ-τ={d}: {err}");
        }
    }
}

#[test]
fn probit_approximation_tracks_quadrature_with_uncertainty() {
    let gh = GaussHermite::new(201);
    for lam in [0.5, 1.0, 2.0, 4.0] {
        for sigma in [0.25, 0.5, 1.0, 2.0] {
            for k in 0..=120 {
                let d = -6.0 + 0.1 * k as f64;
                let exact = gh.expect(d, sigma, |t| logistic(lam * t));
                let err = (logistic_normal_integral(d, sigma, lam, 0.0) - exact).abs();
                assert!(err < 0.01, "λ={lam}, σ={sigma}, θ-τ={d}: {err}");
            }
        }
    }
}
