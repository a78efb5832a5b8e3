//! The graded response model: item parameters, response data, category
//! probabilities, Fisher information and synthetic data generation.

mod item;
mod responses;
mod simulate;

use serde::{Deserialize, Serialize};

use crate::error::{GrmError, Result};

pub use item::{
    category_probability, expected_category_probability, logistic_normal_integral, Item,
    PROBABILITY_FLOOR, PROBIT_SCALE,
};
pub(crate) use item::{cell_terms, item_cell_terms};
pub use responses::ResponseMatrix;
pub use simulate::simulate_responses;

/// Calibrated item bank. Serializes as a JSON array of `{id, discrimination, thresholds}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Item>", into = "Vec<Item>")]
pub struct ItemParameters {
    items: Vec<Item>,
}

impl TryFrom<Vec<Item>> for ItemParameters {
    type Error = GrmError;

    fn try_from(items: Vec<Item>) -> Result<Self> {
        ItemParameters::new(items)
    }
}

impl From<ItemParameters> for Vec<Item> {
    fn from(p: ItemParameters) -> Self {
        p.items
    }
}

impl ItemParameters {
    pub fn new(items: Vec<Item>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for it in &items {
            if !seen.insert(it.id.as_str()) {
                return Err(GrmError::InvalidItem {
                    id: it.id.clone(),
                    reason: "duplicate item id".into(),
                });
            }
        }
        Ok(ItemParameters { items })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.items.iter().map(|i| i.id.clone()).collect()
    }

    pub fn categories(&self) -> Vec<usize> {
        self.items.iter().map(Item::categories).collect()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Item> {
        self.items.iter()
    }
}

impl std::ops::Index<usize> for ItemParameters {
    type Output = Item;

    fn index(&self, i: usize) -> &Item {
        &self.items[i]
    }
}

/// Gaussian summary `N(mean, sd²)` of one person's ability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbilityEstimate {
    pub mean: f64,
    pub sd: f64,
}

impl AbilityEstimate {
    pub const fn new(mean: f64, sd: f64) -> Self {
        AbilityEstimate { mean, sd }
    }

    /// The same mean with the uncertainty dropped.
    pub const fn point(self) -> Self {
        AbilityEstimate {
            mean: self.mean,
            sd: 0.0,
        }
    }
}

/// `Σ_i log P(x_i | θ)` over the non-missing entries of a row. Returns `-∞`
/// when an observed category has probability exactly zero.
pub fn response_log_likelihood(row: &[Option<u8>], theta: f64, items: &ItemParameters) -> f64 {
    debug_assert_eq!(row.len(), items.len());
    row.iter()
        .zip(items.iter())
        .filter_map(|(x, it)| x.map(|x| item_cell_terms(it, theta, x as usize).log_p))
        .sum()
}

/// Test information `I(θ) = Σ_i Σ_j P'_ij² / P_ij`.
pub fn fisher_information(theta: f64, items: &ItemParameters) -> f64 {
    items.iter().map(|it| it.information(theta)).sum()
}

/// Information restricted to the items a person answered, with its θ-derivative.
pub(crate) fn row_information(row: &[Option<u8>], theta: f64, items: &ItemParameters) -> (f64, f64) {
    row.iter()
        .zip(items.iter())
        .filter(|(x, _)| x.is_some())
        .fold((0.0, 0.0), |(i, s), (_, it)| {
            let (a, b) = it.information_with_slope(theta);
            (i + a, s + b)
        })
}
