use serde::{Deserialize, Serialize};

use crate::error::{GrmError, Result};
use crate::math::{logistic_pair, normal_cdf};
use crate::model::AbilityEstimate;
use crate::quadrature::GaussHermite;

/// Probit slope used to approximate the logistic curve: `logistic(x) ≈ Φ(x / 1.702)`.
/// The minimax choice keeps the approximation error below 0.0095 everywhere.
pub const PROBIT_SCALE: f64 = 1.0 / 1.702;

/// Floor applied to predicted probabilities before taking logarithms.
pub const PROBABILITY_FLOOR: f64 = 1e-300;

/// One graded-response item: a discrimination and `J - 1` strictly increasing thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawItem")]
pub struct Item {
    pub id: String,
    pub discrimination: f64,
    pub thresholds: Vec<f64>,
}

#[derive(Deserialize)]
struct RawItem {
    id: String,
    discrimination: f64,
    thresholds: Vec<f64>,
}

impl TryFrom<RawItem> for Item {
    type Error = GrmError;

    fn try_from(raw: RawItem) -> Result<Self> {
        Item::new(raw.id, raw.discrimination, raw.thresholds)
    }
}

impl Item {
    pub fn new(id: impl Into<String>, discrimination: f64, thresholds: Vec<f64>) -> Result<Self> {
        let id = id.into();
        let invalid = |reason: String| GrmError::InvalidItem {
            id: id.clone(),
            reason,
        };
        if !(discrimination.is_finite() && discrimination > 0.0) {
            return Err(invalid(format!(
                "discrimination must be finite and positive, got {discrimination}"
            )));
        }
        if thresholds.is_empty() {
            return Err(invalid("an item needs at least two categories".into()));
        }
        if thresholds.iter().any(|t| !t.is_finite()) {
            return Err(invalid("thresholds must be finite".into()));
        }
        if thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(format!(
                "thresholds must be strictly increasing, got {thresholds:?}"
            )));
        }
        Ok(Item {
            id,
            discrimination,
            thresholds,
        })
    }

    /// Number of response categories `J`.
    #[inline]
    pub fn categories(&self) -> usize {
        self.thresholds.len() + 1
    }

    /// `P(X ≥ j | θ)`, with `P(X ≥ 0) = 1` and `P(X ≥ J) = 0`.
    #[inline]
    pub fn cumulative(&self, theta: f64, j: usize) -> f64 {
        if j == 0 {
            1.0
        } else if j >= self.categories() {
            0.0
        } else {
            logistic_pair(self.discrimination * (theta - self.thresholds[j - 1])).0
        }
    }

    /// `P(X = j | θ)` without range checks. Computed as a product so that the
    /// result keeps relative precision when both cumulative terms are close to one.
    #[inline]
    pub fn probability(&self, theta: f64, j: usize) -> f64 {
        let jmax = self.categories() - 1;
        let lam = self.discrimination;
        match (j, j == jmax) {
            (0, _) => logistic_pair(lam * (theta - self.thresholds[0])).1,
            (_, true) => logistic_pair(lam * (theta - self.thresholds[j - 1])).0,
            _ => {
                let (lo, hi) = (self.thresholds[j - 1], self.thresholds[j]);
                let gap = -(-lam * (hi - lo)).exp_m1();
                logistic_pair(lam * (theta - lo)).0 * logistic_pair(lam * (theta - hi)).1 * gap
            }
        }
    }

    pub fn probabilities(&self, theta: f64) -> Vec<f64> {
        (0..self.categories())
            .map(|j| self.probability(theta, j))
            .collect()
    }

    /// Item information `Σ_j P'_j² / P_j` and its derivative in θ.
    pub fn information_with_slope(&self, theta: f64) -> (f64, f64) {
        let lam = self.discrimination;
        let n = self.categories();
        // First and second θ-derivatives of the cumulative curves, boundaries included.
        let mut d1 = vec![0.0; n + 1];
        let mut d2 = vec![0.0; n + 1];
        for k in 1..n {
            let (s, c) = logistic_pair(lam * (theta - self.thresholds[k - 1]));
            d1[k] = lam * s * c;
            d2[k] = lam * d1[k] * (c - s);
        }
        let mut info = 0.0;
        let mut slope = 0.0;
        for j in 0..n {
            let p = self.probability(theta, j);
            if p <= 0.0 {
                continue;
            }
            let dp = d1[j] - d1[j + 1];
            let ddp = d2[j] - d2[j + 1];
            info += dp * dp / p;
            slope += 2.0 * dp * ddp / p - dp * dp * dp / (p * p);
        }
        (info, slope)
    }

    #[inline]
    pub fn information(&self, theta: f64) -> f64 {
        self.information_with_slope(theta).0
    }

    /// `P(X = j)` under a Gaussian ability summary, using the probit approximation
    /// of the logistic-normal integral for both cumulative terms.
    pub fn expected_probability(&self, ability: AbilityEstimate, j: usize) -> f64 {
        let n = self.categories();
        let lam = self.discrimination;
        let arg = |tau: f64| probit_argument(ability.mean, ability.sd, lam, tau);
        let p = if j == 0 {
            normal_cdf(-arg(self.thresholds[0]))
        } else if j == n - 1 {
            normal_cdf(arg(self.thresholds[j - 1]))
        } else {
            let a = arg(self.thresholds[j - 1]);
            let b = arg(self.thresholds[j]);
            if b > 0.0 {
                // both terms in the upper tail: subtract survival functions instead
                normal_cdf(-b) - normal_cdf(-a)
            } else {
                normal_cdf(a) - normal_cdf(b)
            }
        };
        p.clamp(PROBABILITY_FLOOR, 1.0)
    }

    /// Same quantity as [`Item::expected_probability`] but integrating the exact
    /// logistic curve against the Gaussian with the supplied quadrature rule.
    pub fn expected_probability_exact(
        &self,
        ability: AbilityEstimate,
        j: usize,
        rule: &GaussHermite,
    ) -> f64 {
        rule.expect(ability.mean, ability.sd, |t| self.probability(t, j))
            .clamp(PROBABILITY_FLOOR, 1.0)
    }
}

#[inline]
fn probit_argument(theta: f64, sigma: f64, lambda: f64, tau: f64) -> f64 {
    let k = PROBIT_SCALE * lambda;
    k * (theta - tau) / (1.0 + (k * sigma).powi(2)).sqrt()
}

/// Approximates `∫ logistic(λ(φ − τ)) dN(φ; θ, σ²)` by a scaled probit.
pub fn logistic_normal_integral(theta: f64, sigma: f64, lambda: f64, tau: f64) -> f64 {
    normal_cdf(probit_argument(theta, sigma, lambda, tau))
}

/// `P(X = j | θ)` for a single item, with range and domain checks.
pub fn category_probability(theta: f64, item: &Item, j: usize) -> Result<f64> {
    if !theta.is_finite() {
        return Err(GrmError::NonFinite {
            what: "theta",
            value: theta,
        });
    }
    if j >= item.categories() {
        return Err(GrmError::CategoryOutOfRange {
            index: j,
            categories: item.categories(),
        });
    }
    Ok(item.probability(theta, j))
}

/// `P(X = j)` when θ is only known as a Gaussian summary (clamped to `[1e-300, 1]`).
pub fn expected_category_probability(ability: AbilityEstimate, item: &Item, j: usize) -> Result<f64> {
    if j >= item.categories() {
        return Err(GrmError::CategoryOutOfRange {
            index: j,
            categories: item.categories(),
        });
    }
    Ok(item.expected_probability(ability, j))
}

/// Log-probability of one cell and its partial derivatives with respect to the
/// two cumulative logits `u = λ(θ − τ_j)` and `v = λ(θ − τ_{j+1})`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CellTerms {
    pub log_p: f64,
    pub d_u: f64,
    pub d_v: f64,
}

/// `u` is absent for the lowest category and `v` for the highest. `gap` is
/// `1 − exp(v − u)`, which depends only on the item and may be cached.
#[inline]
pub(crate) fn cell_terms(u: Option<f64>, v: Option<f64>, gap: f64) -> CellTerms {
    match (u, v) {
        (Some(u), Some(v)) => {
            let (su, cu) = logistic_pair(u);
            let (sv, cv) = logistic_pair(v);
            if su > 0.0 && cv > 0.0 && cu > 0.0 && sv > 0.0 {
                CellTerms {
                    log_p: su.ln() + cv.ln() + gap.ln(),
                    d_u: cu / (cv * gap),
                    d_v: -sv / (su * gap),
                }
            } else {
                // exponent underflow: stay in log space
                let lu = crate::math::log_logistic(u);
                let lv = crate::math::log_logistic(v);
                CellTerms {
                    log_p: lu + (lv - v) + gap.ln(),
                    d_u: ((lu - u) - (lv - v)).exp() / gap,
                    d_v: -(lv - lu).exp() / gap,
                }
            }
        }
        (Some(u), None) => {
            let (_, cu) = logistic_pair(u);
            CellTerms {
                log_p: crate::math::log_logistic(u),
                d_u: cu,
                d_v: 0.0,
            }
        }
        (None, Some(v)) => {
            let (sv, _) = logistic_pair(v);
            CellTerms {
                log_p: crate::math::log_logistic(-v),
                d_u: 0.0,
                d_v: -sv,
            }
        }
        (None, None) => unreachable!("items have at least two categories"),
    }
}

/// Cell terms evaluated directly from an item at ability θ.
#[inline]
pub(crate) fn item_cell_terms(item: &Item, theta: f64, j: usize) -> CellTerms {
    let lam = item.discrimination;
    let n = item.categories();
    let u = (j > 0).then(|| lam * (theta - item.thresholds[j - 1]));
    let v = (j + 1 < n).then(|| lam * (theta - item.thresholds[j]));
    let gap = if j > 0 && j + 1 < n {
        -(-lam * (item.thresholds[j] - item.thresholds[j - 1])).exp_m1()
    } else {
        1.0
    };
    cell_terms(u, v, gap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(lam: f64, taus: &[f64]) -> Item {
        Item::new("i", lam, taus.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(Item::new("a", 0.0, vec![0.0]).is_err());
        assert!(Item::new("a", f64::NAN, vec![0.0]).is_err());
        assert!(Item::new("a", 1.0, vec![]).is_err());
        assert!(Item::new("a", 1.0, vec![0.5, 0.5]).is_err());
        assert!(Item::new("a", 1.0, vec![0.5, f64::INFINITY]).is_err());
    }

    #[test]
    fn symmetric_dichotomous_half() {
        let it = item(1.0, &[0.0]);
        assert_eq!(category_probability(0.0, &it, 1).unwrap(), 0.5);
    }

    #[test]
    fn top_category_value() {
        // P(X=2) = logistic(1.5 * (2 - 1)) = 1/(1+e^{-1.5}) = 0.8175744761936437
        let it = item(1.5, &[-1.0, 1.0]);
        let p = category_probability(2.0, &it, 2).unwrap();
        assert!((p - 0.817_574_476_193_643_7).abs() < 1e-15);
    }

    #[test]
    fn index_and_domain_errors() {
        let it = item(1.0, &[0.0]);
        assert!(matches!(
            category_probability(0.0, &it, 2),
            Err(GrmError::CategoryOutOfRange { .. })
        ));
        assert!(matches!(
            category_probability(f64::NAN, &it, 0),
            Err(GrmError::NonFinite { .. })
        ));
    }

    #[test]
    fn extreme_probabilities_keep_precision() {
        let it = item(3.0, &[-2.0, -1.0, 0.0]);
        // far above all thresholds the middle categories are tiny but positive
        let p = it.probability(40.0, 1);
        assert!(p > 0.0 && p < 1e-40);
        let t = item_cell_terms(&it, 40.0, 1);
        assert!((t.log_p - p.ln()).abs() < 1e-9);
        let t = item_cell_terms(&it, 400.0, 1);
        assert!(t.log_p.is_finite() && t.d_u.is_finite() && t.d_v.is_finite());
    }

    #[test]
    fn cell_gradient_matches_finite_difference() {
        let it = item(1.3, &[-0.7, 0.2, 1.4]);
        for j in 0..4 {
            for &theta in &[-2.0, 0.1, 1.9] {
                let t = item_cell_terms(&it, theta, j);
                let h = 1e-6;
                let lp = |th: f64| it.probability(th, j).ln();
                let fd = (lp(theta + h) - lp(theta - h)) / (2.0 * h);
                let analytic = it.discrimination * (t.d_u + t.d_v);
                assert!((fd - analytic).abs() < 1e-6, "j={j} θ={theta}");
            }
        }
    }

    #[test]
    fn information_slope_matches_finite_difference() {
        let it = item(1.7, &[-1.0, 0.3, 0.9, 2.0]);
        for &theta in &[-3.0, -0.5, 0.4, 2.5] {
            let h = 1e-5;
            let fd = (it.information(theta + h) - it.information(theta - h)) / (2.0 * h);
            let (_, slope) = it.information_with_slope(theta);
            assert!((fd - slope).abs() < 1e-6 * (1.0 + slope.abs()), "θ={theta}");
        }
    }

    #[test]
    fn expected_probability_symmetric_point() {
        let it = item(1.0, &[0.0]);
        let p = expected_category_probability(AbilityEstimate::new(0.0, 1.0), &it, 1).unwrap();
        assert!((p - 0.5).abs() < 1e-15);
    }

    #[test]
    fn logistic_normal_integral_midpoint() {
        for &(s, l) in &[(0.0, 1.0), (0.3, 2.0), (3.0, 0.5)] {
            assert_eq!(logistic_normal_integral(0.7, s, l, 0.7), 0.5);
        }
    }

    #[test]
    fn json_validation_applies_on_deserialize() {
        let bad = r#"{"id":"x","discrimination":1.0,"thresholds":[1.0,0.0]}"#;
        assert!(serde_json::from_str::<Item>(bad).is_err());
        let good = r#"{"id":"x","discrimination":1.0,"thresholds":[0.0,1.0]}"#;
        assert_eq!(serde_json::from_str::<Item>(good).unwrap().categories(), 3);
    }
}
