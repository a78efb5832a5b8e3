//! Scoring a response row against fixed item parameters.
//!
//! Three estimators produce a Gaussian ability summary `(θ̂, ŝ)`:
//!
//! * **WLE** maximizes the Jeffreys-penalized likelihood `ln L(θ) + ½ ln I(θ)`,
//!   Warm's bias-corrected estimator in its usual polytomous form, with
//!   `ŝ = 1/√I(θ̂)`.
//! * **MML** maximizes `Σ_i ln P(x_i | N(θ, s(θ)²))`, the response probabilities
//!   averaged over a Gaussian whose sd is imposed by the Cramér–Rao value
//!   `s(θ) = 1/√I(θ)`; `ŝ = s(θ̂)`.
//! * **EAP** is the posterior mean and sd under a truncated normal prior,
//!   computed by quadrature on a fixed grid.
//!
//! WLE and MML search the bracket `[-8, 8]`; an optimum on its edge is clamped
//! there and flagged.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GrmError, Result};
use crate::model::{item_cell_terms, row_information, AbilityEstimate, ItemParameters, ResponseMatrix};
use crate::optimize::{argmax, brent_max};
use crate::quadrature::trapezoid_grid;

/// Search bracket for the optimizing scorers.
pub const SCORE_BOUND: f64 = 8.0;
const SCAN_POINTS: usize = 161;
const SOLVER_TOL: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMethod {
    Wle,
    Mml,
    Eap,
}

impl ScoringMethod {
    pub const ALL: [ScoringMethod; 3] = [ScoringMethod::Eap, ScoringMethod::Wle, ScoringMethod::Mml];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoringMethod::Wle => "wle",
            ScoringMethod::Mml => "mml",
            ScoringMethod::Eap => "eap",
        }
    }
}

impl fmt::Display for ScoringMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoringMethod {
    type Err = GrmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "wle" => Ok(ScoringMethod::Wle),
            "mml" => Ok(ScoringMethod::Mml),
            "eap" => Ok(ScoringMethod::Eap),
            other => Err(GrmError::InvalidConfig(format!("unknown scoring method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFlag {
    Ok,
    /// The optimum sat on the edge of the search bracket.
    Clamped,
    /// The row could not be scored (no observed responses).
    Failed,
}

impl fmt::Display for ScoreFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreFlag::Ok => "ok",
            ScoreFlag::Clamped => "clamped",
            ScoreFlag::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub estimate: AbilityEstimate,
    pub flag: ScoreFlag,
}

/// EAP prior: a normal distribution truncated to `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruncatedNormalPrior {
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Default for TruncatedNormalPrior {
    fn default() -> Self {
        TruncatedNormalPrior {
            mean: 0.0,
            sd: 1.0,
            lower: -5.0,
            upper: 5.0,
        }
    }
}

impl TruncatedNormalPrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.sd > 0.0 && self.sd.is_finite()) {
            return Err(GrmError::InvalidConfig(format!("prior sd must be positive, got {}", self.sd)));
        }
        if !(self.lower < self.upper) || !self.lower.is_finite() || !self.upper.is_finite() {
            return Err(GrmError::InvalidConfig(format!(
                "prior bounds must satisfy lower < upper, got [{}, {}]",
                self.lower, self.upper
            )));
        }
        if !self.mean.is_finite() {
            return Err(GrmError::InvalidConfig("prior mean must be finite".into()));
        }
        Ok(())
    }

    /// Symmetric prior `N(0, sd²)` truncated at `±bound`.
    pub fn symmetric(sd: f64, bound: f64) -> Self {
        TruncatedNormalPrior {
            mean: 0.0,
            sd,
            lower: -bound,
            upper: bound,
        }
    }

    fn log_density(&self, theta: f64) -> f64 {
        let z = (theta - self.mean) / self.sd;
        -0.5 * z * z
    }
}

/// Equally spaced EAP quadrature nodes on the prior support, trapezoid weights.
#[derive(Debug, Clone)]
pub struct ScoringGrid {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl ScoringGrid {
    pub const DEFAULT_NODES: usize = 201;

    pub fn new(prior: &TruncatedNormalPrior, nodes: usize) -> Result<Self> {
        prior.validate()?;
        if nodes < 101 || nodes % 2 == 0 {
            return Err(GrmError::InvalidConfig(format!(
                "scoring grid needs an odd node count >= 101, got {nodes}"
            )));
        }
        let (nodes, weights) = trapezoid_grid(prior.lower, prior.upper, nodes);
        Ok(ScoringGrid { nodes, weights })
    }
}

fn observed(row: &[Option<u8>]) -> bool {
    row.iter().any(Option::is_some)
}

fn require_responses(row: &[Option<u8>], items: &ItemParameters) -> Result<()> {
    if row.len() != items.len() {
        return Err(GrmError::InvalidResponses(format!(
            "row has {} entries for {} items",
            row.len(),
            items.len()
        )));
    }
    if !observed(row) {
        return Err(GrmError::InvalidResponses("row has no observed responses".into()));
    }
    Ok(())
}

/// `d/dθ ln L(θ)` over the observed entries.
fn log_likelihood_slope(row: &[Option<u8>], theta: f64, items: &ItemParameters) -> f64 {
    row.iter()
        .zip(items.iter())
        .filter_map(|(x, it)| {
            x.map(|x| {
                let c = item_cell_terms(it, theta, x as usize);
                it.discrimination * (c.d_u + c.d_v)
            })
        })
        .sum()
}

fn cramer_rao_sd(row: &[Option<u8>], theta: f64, items: &ItemParameters) -> f64 {
    let info = row_information(row, theta, items).0;
    1.0 / info.sqrt()
}

/// Coarse scan of `[-8, 8]` followed by a refinement inside the best cell.
/// Returns the maximizer and whether it was clamped to the bracket edge.
fn scan_then_refine(objective: &impl Fn(f64) -> f64, refine: impl Fn(f64, f64) -> f64) -> (f64, bool) {
    let h = 2.0 * SCORE_BOUND / (SCAN_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..SCAN_POINTS).map(|k| -SCORE_BOUND + h * k as f64).collect();
    let values: Vec<f64> = grid.iter().map(|&t| objective(t)).collect();
    let Some(k) = argmax(&values) else {
        return (0.0, true);
    };
    let lo = grid[k.saturating_sub(1)];
    let hi = grid[(k + 1).min(SCAN_POINTS - 1)];
    let theta = refine(lo, hi);
    let edge = 1e-6;
    if theta <= -SCORE_BOUND + edge {
        (-SCORE_BOUND, true)
    } else if theta >= SCORE_BOUND - edge {
        (SCORE_BOUND, true)
    } else {
        (theta, false)
    }
}

/// Safeguarded Newton on the root of `slope` within `[lo, hi]`; falls back to
/// Brent on `objective` if the bracket does not straddle a sign change.
fn newton_bisect(
    objective: &impl Fn(f64) -> f64,
    slope: &impl Fn(f64) -> f64,
    mut lo: f64,
    mut hi: f64,
) -> f64 {
    let (glo, ghi) = (slope(lo), slope(hi));
    if !(glo >= 0.0 && ghi <= 0.0) || !glo.is_finite() || !ghi.is_finite() {
        return brent_max(objective, lo, hi, SOLVER_TOL).0;
    }
    let mut theta = 0.5 * (lo + hi);
    for _ in 0..100 {
        let g = slope(theta);
        if g == 0.0 {
            return theta;
        }
        if g > 0.0 {
            lo = theta;
        } else {
            hi = theta;
        }
        let h = 1e-6;
        let dg = (slope(theta + h) - slope(theta - h)) / (2.0 * h);
        let newton = theta - g / dg;
        let next = if dg < 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - theta).abs() < SOLVER_TOL || hi - lo < SOLVER_TOL {
            return next;
        }
        theta = next;
    }
    theta
}

/// Jeffreys-penalized objective maximized by the WLE.
pub fn wle_objective(row: &[Option<u8>], theta: f64, items: &ItemParameters) -> f64 {
    crate::model::response_log_likelihood(row, theta, items) + 0.5 * row_information(row, theta, items).0.ln()
}

/// Warm's weighted likelihood estimate.
pub fn score_wle(row: &[Option<u8>], items: &ItemParameters) -> Result<Score> {
    require_responses(row, items)?;
    let objective = |t: f64| wle_objective(row, t, items);
    let slope = |t: f64| {
        let (info, d_info) = row_information(row, t, items);
        log_likelihood_slope(row, t, items) + 0.5 * d_info / info
    };
    let (theta, clamped) = scan_then_refine(&objective, |lo, hi| newton_bisect(&objective, &slope, lo, hi));
    Ok(Score {
        estimate: AbilityEstimate::new(theta, cramer_rao_sd(row, theta, items)),
        flag: if clamped { ScoreFlag::Clamped } else { ScoreFlag::Ok },
    })
}

/// Unpenalized maximum likelihood; infinite for all-extreme rows, where the
/// result is clamped to the bracket edge and flagged.
pub fn score_mle(row: &[Option<u8>], items: &ItemParameters) -> Result<Score> {
    require_responses(row, items)?;
    let objective = |t: f64| crate::model::response_log_likelihood(row, t, items);
    let slope = |t: f64| log_likelihood_slope(row, t, items);
    let (theta, clamped) = scan_then_refine(&objective, |lo, hi| newton_bisect(&objective, &slope, lo, hi));
    Ok(Score {
        estimate: AbilityEstimate::new(theta, cramer_rao_sd(row, theta, items)),
        flag: if clamped { ScoreFlag::Clamped } else { ScoreFlag::Ok },
    })
}

/// Gaussian-marginalized log-likelihood at θ with the sd imposed by the
/// Cramér–Rao value at θ.
pub fn mml_score_objective(row: &[Option<u8>], theta: f64, items: &ItemParameters) -> f64 {
    let sd = cramer_rao_sd(row, theta, items);
    let ability = AbilityEstimate::new(theta, sd);
    row.iter()
        .zip(items.iter())
        .filter_map(|(x, it)| x.map(|x| it.expected_probability(ability, x as usize).ln()))
        .sum()
}

/// MML scoring estimate.
pub fn score_mml(row: &[Option<u8>], items: &ItemParameters) -> Result<Score> {
    require_responses(row, items)?;
    let objective = |t: f64| mml_score_objective(row, t, items);
    let (theta, clamped) = scan_then_refine(&objective, |lo, hi| brent_max(objective, lo, hi, SOLVER_TOL).0);
    Ok(Score {
        estimate: AbilityEstimate::new(theta, cramer_rao_sd(row, theta, items)),
        flag: if clamped { ScoreFlag::Clamped } else { ScoreFlag::Ok },
    })
}

fn eap_on_grid(row: &[Option<u8>], items: &ItemParameters, prior: &TruncatedNormalPrior, grid: &ScoringGrid) -> Score {
    let log_post: Vec<f64> = grid
        .nodes
        .iter()
        .zip(&grid.weights)
        .map(|(&t, &w)| crate::model::response_log_likelihood(row, t, items) + prior.log_density(t) + w.ln())
        .collect();
    let m = log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let post: Vec<f64> = log_post.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = post.iter().sum();
    let mean: f64 = post.iter().zip(&grid.nodes).map(|(p, t)| p * t).sum::<f64>() / z;
    let var: f64 = post.iter().zip(&grid.nodes).map(|(p, t)| p * (t - mean).powi(2)).sum::<f64>() / z;
    Score {
        estimate: AbilityEstimate::new(mean, var.max(0.0).sqrt()),
        flag: ScoreFlag::Ok,
    }
}

/// Expected a posteriori estimate under a truncated normal prior. An empty row
/// returns the prior's own mean and sd.
pub fn score_eap(row: &[Option<u8>], items: &ItemParameters, prior: &TruncatedNormalPrior) -> Result<Score> {
    if row.len() != items.len() {
        return Err(GrmError::InvalidResponses(format!(
            "row has {} entries for {} items",
            row.len(),
            items.len()
        )));
    }
    let grid = ScoringGrid::new(prior, ScoringGrid::DEFAULT_NODES)?;
    Ok(eap_on_grid(row, items, prior, &grid))
}

#[derive(Debug, Clone, Serialize)]
pub struct RowError {
    pub person: usize,
    pub person_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchScores {
    pub method: ScoringMethod,
    pub scores: Vec<Score>,
    pub errors: Vec<RowError>,
}

impl BatchScores {
    pub fn estimates(&self) -> Vec<AbilityEstimate> {
        self.scores.iter().map(|s| s.estimate).collect()
    }
}

/// Scores every row of an item-aligned matrix. Rows that cannot be scored are
/// reported in `errors` and carry a `NaN` estimate with [`ScoreFlag::Failed`].
pub fn score_batch(
    matrix: &ResponseMatrix,
    items: &ItemParameters,
    method: ScoringMethod,
    prior: Option<&TruncatedNormalPrior>,
) -> Result<BatchScores> {
    if matrix.items() != items.len() {
        return Err(GrmError::InvalidResponses(format!(
            "matrix has {} items, bank has {}",
            matrix.items(),
            items.len()
        )));
    }
    let prior = prior.copied().unwrap_or_default();
    let grid = ScoringGrid::new(&prior, ScoringGrid::DEFAULT_NODES)?;
    let results: Vec<Result<Score>> = (0..matrix.persons())
        .into_par_iter()
        .map(|p| {
            let row = matrix.row(p);
            match method {
                ScoringMethod::Wle => score_wle(row, items),
                ScoringMethod::Mml => score_mml(row, items),
                ScoringMethod::Eap => Ok(eap_on_grid(row, items, &prior, &grid)),
            }
        })
        .collect();
    let mut scores = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for (p, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => scores.push(s),
            Err(e) => {
                errors.push(RowError {
                    person: p,
                    person_id: matrix.person_ids()[p].clone(),
                    message: e.to_string(),
                });
                scores.push(Score {
                    estimate: AbilityEstimate::new(f64::NAN, f64::NAN),
                    flag: ScoreFlag::Failed,
                });
            }
        }
    }
    Ok(BatchScores { method, scores, errors })
}
