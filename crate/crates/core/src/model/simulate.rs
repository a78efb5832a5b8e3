use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::model::{ItemParameters, ResponseMatrix};

/// Draws one response per person and item from the model probabilities.
///
/// Each person gets an independent ChaCha stream keyed by their row index,
/// so the result does not depend on how rows are scheduled across threads.
pub fn simulate_responses(items: &ItemParameters, thetas: &[f64], seed: u64) -> ResponseMatrix {
    let rows: Vec<Vec<Option<u8>>> = thetas
        .par_iter()
        .enumerate()
        .map(|(p, &theta)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            items
                .iter()
                .map(|it| {
                    let u: f64 = rng.random();
                    // X = #{j ≥ 1 : u < P(X ≥ j)} since the cumulative curve is decreasing in j
                    let x = (1..it.categories())
                        .take_while(|&j| u < it.cumulative(theta, j))
                        .count();
                    Some(x as u8)
                })
                .collect()
        })
        .collect();
    let person_ids = (1..=thetas.len()).map(|p| format!("p{p}")).collect();
    ResponseMatrix::new(
        "simulated",
        person_ids,
        items.ids(),
        items.categories(),
        rows.into_iter().flatten().collect(),
    )
    .expect("simulated responses conform to their items")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Item;

    fn bank(lam: f64, taus: &[f64]) -> ItemParameters {
        ItemParameters::new(vec![Item::new("x", lam, taus.to_vec()).unwrap()]).unwrap()
    }

    #[test]
    fn deterministic_given_seed() {
        let items = bank(1.3, &[-1.0, 0.0, 1.0]);
        let thetas: Vec<f64> = (0..200).map(|k| (k as f64 - 100.0) / 40.0).collect();
        assert_eq!(
            simulate_responses(&items, &thetas, 17),
            simulate_responses(&items, &thetas, 17)
        );
        assert_ne!(
            simulate_responses(&items, &thetas, 17),
            simulate_responses(&items, &thetas, 18)
        );
    }

    #[test]
    fn degenerate_probabilities_give_top_category() {
        let items = bank(50.0, &[-1.0, 0.0, 1.0]);
        let m = simulate_responses(&items, &[10.0; 100], 3);
        assert!(m.rows().all(|r| r[0] == Some(3)));
    }

    #[test]
    fn binomial_proportion() {
        let items = bank(1.0, &[0.0]);
        let m = simulate_responses(&items, &vec![0.0; 10_000], 99);
        let ones = m.rows().filter(|r| r[0] == Some(1)).count() as f64 / 10_000.0;
        // sd of the proportion is 0.005, so 0.02 is four standard errors
        assert!((ones - 0.5).abs() < 0.02, "{ones}");
    }
}
