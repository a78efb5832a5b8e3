//! Cross-validated predictive deviance of calibration/scoring pairs.
//!
//! For a left-out person with Gaussian ability summary `N(θ̂, ŝ²)` each observed
//! response contributes `−2 ln P̄(x)`, where `P̄` averages the category
//! probability over the ability summary. The point variant forces `ŝ = 0`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{sample_posterior, summarize_posterior, BayesConfig, PosteriorDraws};
use crate::error::{GrmError, Result};
use crate::math::pearson;
use crate::mml::{calibrate_mml, MmlConfig};
use crate::model::{AbilityEstimate, ItemParameters, ResponseMatrix};
use crate::quadrature::GaussHermite;
use crate::scoring::{score_batch, ScoreFlag, ScoringMethod, TruncatedNormalPrior};

/// Gauss–Hermite nodes used by the exact-integral deviance.
pub const EXACT_INTEGRAL_NODES: usize = 201;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPartition {
    pub k: usize,
    pub seed: u64,
    /// Fold index (`0..k`) of every person.
    pub assignments: Vec<usize>,
}

impl FoldPartition {
    /// Persons in `fold`, in their original order.
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&p| self.assignments[p] == fold).collect()
    }

    /// Persons outside `fold`, in their original order.
    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&p| self.assignments[p] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Random balanced partition of `persons` into `k` folds. The first
/// `persons mod k` folds receive one extra member.
pub fn partition_folds(persons: usize, k: usize, seed: u64) -> Result<FoldPartition> {
    if k < 2 {
        return Err(GrmError::InvalidConfig(format!("need at least 2 folds, got {k}")));
    }
    if persons < k {
        return Err(GrmError::InvalidConfig(format!("{persons} persons cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..persons).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignments = vec![0; persons];
    for (r, &p) in order.iter().enumerate() {
        assignments[p] = r % k;
    }
    Ok(FoldPartition { k, seed, assignments })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMethod {
    Bayes,
    Mml,
}

impl CalibrationMethod {
    pub const ALL: [CalibrationMethod; 2] = [CalibrationMethod::Bayes, CalibrationMethod::Mml];

    pub fn as_str(self) -> &'static str {
        match self {
            CalibrationMethod::Bayes => "bayes",
            CalibrationMethod::Mml => "mml",
        }
    }
}

impl fmt::Display for CalibrationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CalibrationMethod {
    type Err = GrmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bayes" => Ok(CalibrationMethod::Bayes),
            "mml" => Ok(CalibrationMethod::Mml),
            other => Err(GrmError::InvalidConfig(format!("unknown calibration method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DevianceVariant {
    /// Ability uncertainty integrated out.
    Expected,
    /// Ability sd forced to zero.
    Point,
}

/// How `P̄(x)` is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegralMode {
    /// Probit approximation of the logistic-normal integral.
    #[default]
    Approximate,
    /// Gauss–Hermite quadrature of the logistic curve.
    Exact,
}

fn check_aligned(abilities: &[AbilityEstimate], left_out: &ResponseMatrix, items: &ItemParameters) -> Result<()> {
    if abilities.len() != left_out.persons() {
        return Err(GrmError::InvalidResponses(format!(
            "{} abilities for {} persons",
            abilities.len(),
            left_out.persons()
        )));
    }
    if left_out.item_ids() != items.ids().as_slice() {
        return Err(GrmError::InvalidResponses(
            "left-out responses are not aligned to the item bank".into(),
        ));
    }
    if let Some(i) = (0..items.len()).find(|&i| left_out.categories()[i] > items[i].categories()) {
        return Err(GrmError::InvalidResponses(format!(
            "item `{}` has more response categories than its parameters",
            items[i].id
        )));
    }
    Ok(())
}

/// Per-person deviance contributions `−2 Σ_i ln P̄(x_pi)`.
pub fn person_deviances(
    abilities: &[AbilityEstimate],
    left_out: &ResponseMatrix,
    items: &ItemParameters,
    mode: IntegralMode,
) -> Result<Vec<f64>> {
    check_aligned(abilities, left_out, items)?;
    let rule = match mode {
        IntegralMode::Exact => Some(GaussHermite::new(EXACT_INTEGRAL_NODES)),
        IntegralMode::Approximate => None,
    };
    Ok((0..left_out.persons())
        .into_par_iter()
        .map(|p| {
            let a = abilities[p];
            let mut d = 0.0;
            for (i, x) in left_out.row(p).iter().enumerate() {
                if let Some(x) = x {
                    let prob = match &rule {
                        Some(r) if a.sd > 0.0 => items[i].expected_probability_exact(a, *x as usize, r),
                        Some(_) => items[i].probability(a.mean, *x as usize).max(crate::model::PROBABILITY_FLOOR),
                        None => items[i].expected_probability(a, *x as usize),
                    };
                    d -= 2.0 * prob.ln();
                }
            }
            d
        })
        .collect())
}

/// Deviance of left-out responses under Gaussian ability summaries.
pub fn fold_deviance(abilities: &[AbilityEstimate], left_out: &ResponseMatrix, items: &ItemParameters) -> Result<f64> {
    Ok(person_deviances(abilities, left_out, items, IntegralMode::Approximate)?.iter().sum())
}

/// [`fold_deviance`] with every ability sd set to zero.
pub fn point_deviance(abilities: &[AbilityEstimate], left_out: &ResponseMatrix, items: &ItemParameters) -> Result<f64> {
    let points: Vec<AbilityEstimate> = abilities.iter().map(|a| a.point()).collect();
    fold_deviance(&points, left_out, items)
}

/// Settings shared by every calibration and scoring job of an evaluation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub mml: MmlConfig,
    pub bayes: BayesConfig,
    pub prior: TruncatedNormalPrior,
    pub integral: IntegralMode,
}

/// Item point estimates and calibration-sample abilities from either method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub method: CalibrationMethod,
    pub items: ItemParameters,
    /// Person ids of the calibration sample, parallel to `abilities`.
    pub person_ids: Vec<String>,
    pub abilities: Vec<AbilityEstimate>,
    pub converged: bool,
    pub excluded_items: Vec<String>,
}

/// Calibrates with `method`. Bayesian item estimates are posterior means on
/// the unit ability scale; convergence is judged on the item parameters.
pub fn calibrate(responses: &ResponseMatrix, method: CalibrationMethod, config: &EvaluationConfig) -> Result<Calibration> {
    match method {
        CalibrationMethod::Mml => {
            let fit = calibrate_mml(responses, &config.mml)?;
            Ok(Calibration {
                method,
                items: fit.items,
                person_ids: responses.person_ids().to_vec(),
                abilities: fit.abilities,
                converged: fit.converged,
                excluded_items: fit.excluded_items,
            })
        }
        CalibrationMethod::Bayes => Ok(calibrate_bayes(responses, &config.bayes)?.0),
    }
}

/// Bayesian calibration that also hands back the raw posterior draws.
pub fn calibrate_bayes(responses: &ResponseMatrix, config: &BayesConfig) -> Result<(Calibration, PosteriorDraws)> {
    let draws = sample_posterior(responses, config)?;
    let summary = summarize_posterior(&draws.standardized())?;
    let calibration = Calibration {
        method: CalibrationMethod::Bayes,
        items: summary.items,
        person_ids: responses.person_ids().to_vec(),
        abilities: summary.abilities,
        converged: draws.items_converged,
        excluded_items: Vec::new(),
    };
    Ok((calibration, draws))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub deviance: f64,
    pub persons: usize,
    pub responses: usize,
    pub converged: bool,
    /// Left-out persons whose row could not be scored; they are left out of `deviance`.
    pub unscored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevianceReport {
    pub calibration: CalibrationMethod,
    pub scoring: ScoringMethod,
    pub variant: DevianceVariant,
    pub per_fold: Vec<FoldResult>,
    /// Sum over converged folds.
    pub total: f64,
    /// Folds left out of `total` because calibration did not converge.
    pub excluded_folds: Vec<usize>,
}

impl DevianceReport {
    fn from_folds(
        calibration: CalibrationMethod,
        scoring: ScoringMethod,
        variant: DevianceVariant,
        per_fold: Vec<FoldResult>,
    ) -> Self {
        let total = per_fold.iter().filter(|f| f.converged).map(|f| f.deviance).sum();
        let excluded_folds = per_fold.iter().filter(|f| !f.converged).map(|f| f.fold).collect();
        DevianceReport {
            calibration,
            scoring,
            variant,
            per_fold,
            total,
            excluded_folds,
        }
    }

    pub fn fold_deviances(&self) -> Vec<f64> {
        self.per_fold.iter().map(|f| f.deviance).collect()
    }
}

/// Both deviance variants of one (calibration, scoring) pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviancePair {
    pub expected: DevianceReport,
    pub point: DevianceReport,
}

/// Scores `responses` against `calibration` and computes both deviance
/// variants. Items dropped by the calibration are dropped from the responses.
fn score_and_evaluate(
    calibration: &Calibration,
    responses: &ResponseMatrix,
    scoring: ScoringMethod,
    config: &EvaluationConfig,
    fold: usize,
) -> Result<(FoldResult, FoldResult)> {
    let aligned = responses.align_to(&calibration.items)?;
    let scores = score_batch(&aligned, &calibration.items, scoring, Some(&config.prior))?;
    let keep: Vec<usize> = (0..aligned.persons())
        .filter(|&p| scores.scores[p].flag != ScoreFlag::Failed)
        .collect();
    let unscored = aligned.persons() - keep.len();
    let (aligned, abilities) = if unscored == 0 {
        (aligned, scores.estimates())
    } else {
        let kept = aligned.subset_persons(&keep);
        (kept, keep.iter().map(|&p| scores.scores[p].estimate).collect())
    };
    let expected: f64 = person_deviances(&abilities, &aligned, &calibration.items, config.integral)?.iter().sum();
    let points: Vec<AbilityEstimate> = abilities.iter().map(|a| a.point()).collect();
    let point: f64 = person_deviances(&points, &aligned, &calibration.items, config.integral)?.iter().sum();
    let base = FoldResult {
        fold,
        deviance: expected,
        persons: aligned.persons(),
        responses: aligned.observed(),
        converged: calibration.converged,
        unscored,
    };
    Ok((base.clone(), FoldResult { deviance: point, ..base }))
}

/// Cross-validation of every calibration/scoring pairing in the grid.
///
/// Each fold is calibrated once per calibration method on its complement and
/// the left-out persons are scored with every scoring method. Reports come
/// back in `calibrations × scorings` order.
pub fn cross_validate_grid(
    responses: &ResponseMatrix,
    partition: &FoldPartition,
    calibrations: &[CalibrationMethod],
    scorings: &[ScoringMethod],
    config: &EvaluationConfig,
) -> Result<Vec<DeviancePair>> {
    if partition.assignments.len() != responses.persons() {
        return Err(GrmError::InvalidConfig(format!(
            "partition covers {} persons, responses have {}",
            partition.assignments.len(),
            responses.persons()
        )));
    }
    let jobs: Vec<(CalibrationMethod, usize)> = calibrations
        .iter()
        .flat_map(|&c| (0..partition.k).map(move |f| (c, f)))
        .collect();
    let results: Vec<Result<Vec<(FoldResult, FoldResult)>>> = jobs
        .par_iter()
        .map(|&(method, fold)| {
            let train = responses.subset_persons(&partition.complement(fold));
            let test = responses.subset_persons(&partition.members(fold));
            let calibration = calibrate(&train, method, config)?;
            if !calibration.converged {
                log::warn!("{method} calibration of fold {fold} did not converge");
            }
            scorings
                .iter()
                .map(|&s| score_and_evaluate(&calibration, &test, s, config, fold))
                .collect()
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(calibrations.len() * scorings.len());
    for (c_idx, &calibration) in calibrations.iter().enumerate() {
        for (s_idx, &scoring) in scorings.iter().enumerate() {
            let folds = &results[c_idx * partition.k..(c_idx + 1) * partition.k];
            let expected = folds.iter().map(|f| f[s_idx].0.clone()).collect();
            let point = folds.iter().map(|f| f[s_idx].1.clone()).collect();
            out.push(DeviancePair {
                expected: DevianceReport::from_folds(calibration, scoring, DevianceVariant::Expected, expected),
                point: DevianceReport::from_folds(calibration, scoring, DevianceVariant::Point, point),
            });
        }
    }
    Ok(out)
}

/// K-fold cross-validated deviance of one calibration/scoring pairing.
pub fn cross_validate(
    responses: &ResponseMatrix,
    k: usize,
    calibration: CalibrationMethod,
    scoring: ScoringMethod,
    config: &EvaluationConfig,
    seed: u64,
) -> Result<DeviancePair> {
    let partition = partition_folds(responses.persons(), k, seed)?;
    let mut pairs = cross_validate_grid(responses, &partition, &[calibration], &[scoring], config)?;
    Ok(pairs.remove(0))
}

/// Deviance of a control sample scored against items calibrated on the full
/// calibration sample. The report holds a single pseudo-fold `0`.
pub fn transfer_evaluate(
    calibration: &Calibration,
    control: &ResponseMatrix,
    scoring: ScoringMethod,
    config: &EvaluationConfig,
) -> Result<DeviancePair> {
    let (expected, point) = score_and_evaluate(calibration, control, scoring, config, 0)?;
    Ok(DeviancePair {
        expected: DevianceReport::from_folds(calibration.method, scoring, DevianceVariant::Expected, vec![expected]),
        point: DevianceReport::from_folds(calibration.method, scoring, DevianceVariant::Point, vec![point]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub correlation: f64,
    /// `(a, b)` means per person, for scatter plots.
    pub pairs: Vec<(f64, f64)>,
}

/// Pearson correlation of two sets of ability means over the same persons.
pub fn score_agreement(a: &[AbilityEstimate], b: &[AbilityEstimate]) -> Result<Agreement> {
    if a.len() != b.len() {
        return Err(GrmError::InvalidConfig(format!(
            "score lists differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let xa: Vec<f64> = a.iter().map(|e| e.mean).collect();
    let xb: Vec<f64> = b.iter().map(|e| e.mean).collect();
    if xa.iter().chain(&xb).any(|v| !v.is_finite()) {
        return Err(GrmError::UndefinedCorrelation("non-finite score"));
    }
    let correlation = pearson(&xa, &xb).ok_or(GrmError::UndefinedCorrelation("zero variance or fewer than two scores"))?;
    Ok(Agreement {
        correlation,
        pairs: xa.into_iter().zip(xb).collect(),
    })
}
