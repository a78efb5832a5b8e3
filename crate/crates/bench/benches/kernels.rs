use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use grm_core::bayes::{log_posterior_density, BayesModel, LogDensity};
use grm_core::mml::{calibrate_mml, MmlConfig};
use grm_core::scoring::{score_batch, ScoringMethod};
use grm_core::study::{generate_truth, StudyConfig};
use grm_core::{expected_category_probability, simulate_responses, AbilityEstimate, ItemParameters, ResponseMatrix};

fn data(persons: usize, items: usize, categories: usize) -> (ItemParameters, ResponseMatrix) {
    let config = StudyConfig {
        persons,
        items,
        categories,
        seed: 11,
        ..Default::default()
    };
    let truth = generate_truth(&config).unwrap();
    let r = simulate_responses(&truth.items, &truth.thetas, 12);
    (truth.items, r)
}

fn kernels(c: &mut Criterion) {
    let (items, responses) = data(1000, 20, 5);
    let item = &items.items()[0];
    c.bench_function("expected_probability_5cat", |b| {
        b.iter(|| {
            (0..5)
                .map(|j| expected_category_probability(black_box(AbilityEstimate::new(0.3, 0.4)), item, j).unwrap())
                .sum::<f64>()
        })
    });
    for method in ScoringMethod::ALL {
        c.bench_function(&format!("score_batch_{method}_1000x20"), |b| {
            b.iter(|| score_batch(black_box(&responses), &items, method, None).unwrap())
        });
    }
    let model = BayesModel::new(&responses, true);
    let x = vec![0.1; model.dim()];
    c.bench_function("log_posterior_gradient_1000x20", |b| {
        b.iter(|| log_posterior_density(black_box(&x), &responses, true).unwrap())
    });
    let (_, small) = data(1000, 10, 4);
    let mut group = c.benchmark_group("calibration");
    group.sample_size(10);
    group.bench_function("mml_1000x10", |b| b.iter(|| calibrate_mml(black_box(&small), &MmlConfig::default()).unwrap()));
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
