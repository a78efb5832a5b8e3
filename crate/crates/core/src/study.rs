//! Run configuration, synthetic studies and run manifests.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GrmError, Result};
use crate::evaluation::{
    calibrate, cross_validate_grid, partition_folds, score_agreement, transfer_evaluate, Calibration,
    CalibrationMethod, DeviancePair, EvaluationConfig, FoldPartition,
};
use crate::io::{self, Artifact};
use crate::model::{simulate_responses, AbilityEstimate, Item, ItemParameters, ResponseMatrix};
use crate::scoring::{score_batch, BatchScores, ScoringMethod};

/// Per-domain settings for `calibrate`, `score` and `evaluate` runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainConfig {
    /// Overrides the label taken from the response file name.
    pub domain: Option<String>,
    /// Items to keep, in order; empty keeps every column.
    pub items: Vec<String>,
    pub folds: usize,
    /// Drives fold assignment and the sampler streams.
    pub seed: u64,
    pub evaluation: EvaluationConfig,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            domain: None,
            items: Vec::new(),
            folds: 4,
            seed: 0,
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl DomainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        if let Some(dup) = self.items.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(GrmError::InvalidConfig(format!("item `{dup}` listed twice")));
        }
        if self.folds < 2 {
            return Err(GrmError::InvalidConfig(format!("folds must be >= 2, got {}", self.folds)));
        }
        self.evaluation.mml.validate()?;
        self.evaluation.bayes.validate()?;
        self.evaluation.prior.validate()
    }

    /// Evaluation settings with every seed taken from `self.seed`.
    pub fn seeded_evaluation(&self) -> EvaluationConfig {
        let mut e = self.evaluation.clone();
        e.mml.seed = self.seed;
        e.bayes.seed = self.seed;
        e
    }

    /// Selects the configured items and applies the domain label.
    pub fn apply(&self, responses: ResponseMatrix) -> Result<ResponseMatrix> {
        self.validate()?;
        let mut out = if self.items.is_empty() {
            responses
        } else {
            let cols = self
                .items
                .iter()
                .map(|id| {
                    responses.item_ids().iter().position(|x| x == id).ok_or_else(|| {
                        GrmError::InvalidConfig(format!("configured item `{id}` is not in the response file"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            responses.subset_items(&cols)
        };
        if let Some(d) = &self.domain {
            out = out.with_domain(d.clone());
        }
        if let Some(&p) = out.empty_persons().first() {
            return Err(GrmError::InvalidResponses(format!(
                "person `{}` has no responses on the selected items",
                out.person_ids()[p]
            )));
        }
        Ok(out)
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, config: &C, started_unix: u64) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(config)?,
            config_sha256: io::value_digest(config)?,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix,
            finished_unix: started_unix,
        })
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) -> Result<()> {
        self.inputs.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) -> Result<()> {
        self.outputs.push(Artifact::of(path)?);
        Ok(())
    }

    /// Stamps the finish time and writes the manifest as JSON.
    pub fn write(mut self, path: impl AsRef<Path>) -> Result<()> {
        self.finished_unix = unix_now();
        io::save_json(&self, path)
    }
}

/// A synthetic study: generated truth, simulated responses and the full
/// calibration × scoring comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub domain: String,
    pub persons: usize,
    /// Size of an independent control sample for transfer evaluation; 0 skips it.
    pub control_persons: usize,
    pub items: usize,
    pub categories: usize,
    pub folds: usize,
    /// `λ ~ uniform[lo, hi]`.
    pub discrimination_range: [f64; 2],
    /// Thresholds are sorted draws from `uniform[lo, hi]`.
    pub threshold_range: [f64; 2],
    /// Abilities are drawn from `N(0, ability_sd²)`.
    pub ability_sd: f64,
    pub calibrations: Vec<CalibrationMethod>,
    pub scorings: Vec<ScoringMethod>,
    pub seed: u64,
    pub evaluation: EvaluationConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            domain: "synthetic".into(),
            persons: 1000,
            control_persons: 0,
            items: 20,
            categories: 5,
            folds: 4,
            discrimination_range: [0.8, 2.5],
            threshold_range: [0.2, 3.0],
            ability_sd: 1.0,
            calibrations: CalibrationMethod::ALL.to_vec(),
            scorings: ScoringMethod::ALL.to_vec(),
            seed: 0,
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GrmError::InvalidConfig(m));
        if self.items == 0 {
            return bad("a study needs at least one item".into());
        }
        if !(2..=256).contains(&self.categories) {
            return bad(format!("categories must lie in 2..=256, got {}", self.categories));
        }
        let [a, b] = self.discrimination_range;
        if !(a > 0.0 && a <= b && b.is_finite()) {
            return bad(format!("bad discrimination_range [{a}, {b}]"));
        }
        let [a, b] = self.threshold_range;
        if !(a < b && a.is_finite() && b.is_finite()) {
            return bad(format!("bad threshold_range [{a}, {b}]"));
        }
        if !(self.ability_sd > 0.0 && self.ability_sd.is_finite()) {
            return bad("ability_sd must be positive".into());
        }
        if self.calibrations.is_empty() || self.scorings.is_empty() {
            return bad("the method grid is empty".into());
        }
        if self.persons < self.folds {
            return bad(format!("{} persons cannot fill {} folds", self.persons, self.folds));
        }
        self.evaluation.mml.validate()?;
        self.evaluation.bayes.validate()?;
        self.evaluation.prior.validate()
    }

    /// Evaluation settings with every seed derived from `self.seed`.
    pub fn seeded_evaluation(&self) -> EvaluationConfig {
        let mut e = self.evaluation.clone();
        e.mml.seed = self.seed;
        e.bayes.seed = self.seed.wrapping_add(4);
        e
    }
}

/// Known item parameters and abilities behind a simulated data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub items: ItemParameters,
    pub thetas: Vec<f64>,
    pub control_thetas: Vec<f64>,
}

/// Draws item parameters and abilities. Stream 0 of the seed's generator feeds
/// the items, stream 1 the calibration abilities, stream 2 the control abilities.
pub fn generate_truth(config: &StudyConfig) -> Result<Truth> {
    let stream = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(s);
        rng
    };
    let mut rng = stream(0);
    let [dl, dh] = config.discrimination_range;
    let [tl, th] = config.threshold_range;
    let items = (0..config.items)
        .map(|i| {
            let lambda = if dl < dh { rng.random_range(dl..dh) } else { dl };
            let mut t: Vec<f64> = (0..config.categories - 1).map(|_| rng.random_range(tl..th)).collect();
            t.sort_by(f64::total_cmp);
            Item::new(format!("item_{}", i + 1), lambda, t)
        })
        .collect::<Result<Vec<_>>>()?;
    let normal = Normal::new(0.0, config.ability_sd).map_err(|e| GrmError::InvalidConfig(e.to_string()))?;
    let draw = |s: u64, n: usize| {
        let mut rng = stream(s);
        (0..n).map(|_| normal.sample(&mut rng)).collect::<Vec<f64>>()
    };
    Ok(Truth {
        items: ItemParameters::new(items)?,
        thetas: draw(1, config.persons),
        control_thetas: draw(2, config.control_persons),
    })
}

/// One correlation between two sets of ability means for the same persons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRecord {
    pub calibration: CalibrationMethod,
    /// `calibration` for the abilities inferred while calibrating, else a scorer.
    pub reference: String,
    pub compared: ScoringMethod,
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub domain: String,
    pub partition: FoldPartition,
    pub deviance: Vec<DeviancePair>,
    pub calibrations: Vec<Calibration>,
    pub agreement: Vec<AgreementRecord>,
    pub transfer: Vec<DeviancePair>,
    /// Non-fatal problems: non-converged calibrations and unscorable rows.
    pub warnings: Vec<String>,
}

impl StudyReport {
    pub fn deviance_pair(&self, calibration: CalibrationMethod, scoring: ScoringMethod) -> Option<&DeviancePair> {
        self.deviance
            .iter()
            .find(|p| p.expected.calibration == calibration && p.expected.scoring == scoring)
    }

    pub fn agreement_with_calibration(&self, calibration: CalibrationMethod, scoring: ScoringMethod) -> Option<f64> {
        self.agreement
            .iter()
            .find(|a| a.calibration == calibration && a.reference == "calibration" && a.compared == scoring)
            .map(|a| a.correlation)
    }
}

fn save_fold_table(pairs: &[DeviancePair], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(GrmError::from)?;
    w.write_record(["calibration", "scoring", "variant", "fold", "deviance", "persons", "responses", "converged"])?;
    for pair in pairs {
        for report in [&pair.expected, &pair.point] {
            let variant = serde_json::to_value(report.variant)?;
            for f in &report.per_fold {
                w.write_record([
                    report.calibration.to_string(),
                    report.scoring.to_string(),
                    variant.as_str().unwrap_or_default().to_string(),
                    (f.fold + 1).to_string(),
                    f.deviance.to_string(),
                    f.persons.to_string(),
                    f.responses.to_string(),
                    f.converged.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| GrmError::io(path, e))
}

fn save_agreement_table(
    person_ids: &[String],
    calibration: &Calibration,
    scores: &[(ScoringMethod, BatchScores)],
    path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(GrmError::from)?;
    let mut header = vec!["person_id".to_string(), "calibration".to_string()];
    header.extend(scores.iter().map(|(s, _)| s.to_string()));
    w.write_record(&header)?;
    for (p, id) in person_ids.iter().enumerate() {
        let mut rec = vec![id.clone(), calibration.abilities[p].mean.to_string()];
        rec.extend(scores.iter().map(|(_, b)| b.scores[p].estimate.mean.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| GrmError::io(path, e))
}

/// Generates truth, simulates responses, cross-validates the method grid,
/// calibrates on the full sample, scores it with every scorer, and writes all
/// artifacts plus `manifest.json` into `out_dir`.
pub fn run_synthetic_study(config: &StudyConfig, out_dir: impl AsRef<Path>) -> Result<StudyReport> {
    run_study_with_inputs(config, out_dir, &[])
}

/// [`run_synthetic_study`] with extra input files (such as the config file)
/// recorded in the manifest.
pub fn run_study_with_inputs(config: &StudyConfig, out_dir: impl AsRef<Path>, inputs: &[PathBuf]) -> Result<StudyReport> {
    let started = unix_now();
    config.validate()?;
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out).map_err(|e| GrmError::io(out, e))?;
    let mut manifest = RunManifest::new("study", config, started)?;
    for p in inputs {
        manifest.input(p)?;
    }
    manifest.seeds.insert("truth".into(), config.seed);
    manifest.seeds.insert("responses".into(), config.seed.wrapping_add(1));
    manifest.seeds.insert("control".into(), config.seed.wrapping_add(2));
    manifest.seeds.insert("folds".into(), config.seed.wrapping_add(3));
    let evaluation = config.seeded_evaluation();
    manifest.seeds.insert("sampler".into(), evaluation.bayes.seed);
    let mut outputs: Vec<PathBuf> = Vec::new();
    let mut emit = |name: &str| {
        let p = out.join(name);
        outputs.push(p.clone());
        p
    };

    let truth = generate_truth(config)?;
    let responses = simulate_responses(&truth.items, &truth.thetas, config.seed.wrapping_add(1))
        .with_domain(config.domain.clone());
    io::save_items(&truth.items, emit("truth_items.json"))?;
    let truth_abilities: Vec<AbilityEstimate> = truth.thetas.iter().map(|&t| AbilityEstimate::new(t, 0.0)).collect();
    io::save_abilities(responses.person_ids(), &truth_abilities, emit("truth_abilities.csv"))?;
    io::save_responses(&responses, emit("responses.csv"))?;

    let partition = partition_folds(responses.persons(), config.folds, config.seed.wrapping_add(3))?;
    {
        let path = emit("folds.csv");
        let mut w = csv::Writer::from_path(&path).map_err(GrmError::from)?;
        w.write_record(["person_id", "fold"])?;
        for (id, f) in responses.person_ids().iter().zip(&partition.assignments) {
            w.write_record([id.clone(), (f + 1).to_string()])?;
        }
        w.flush().map_err(|e| GrmError::io(&path, e))?;
    }

    let deviance = cross_validate_grid(&responses, &partition, &config.calibrations, &config.scorings, &evaluation)?;
    io::save_json(&deviance, emit("deviance.json"))?;
    save_fold_table(&deviance, &emit("deviance_folds.csv"))?;

    let mut warnings = Vec::new();
    for pair in &deviance {
        for f in &pair.expected.excluded_folds {
            warnings.push(format!(
                "{} calibration of fold {} did not converge; excluded from totals",
                pair.expected.calibration,
                f + 1
            ));
        }
    }
    warnings.dedup();

    let control = (config.control_persons > 0).then(|| {
        simulate_responses(&truth.items, &truth.control_thetas, config.seed.wrapping_add(2))
            .with_domain(format!("{}-control", config.domain))
    });
    if let Some(c) = &control {
        io::save_responses(c, emit("control.csv"))?;
    }

    let mut calibrations = Vec::new();
    let mut agreement = Vec::new();
    let mut transfer = Vec::new();
    for &method in &config.calibrations {
        let cal = calibrate(&responses, method, &evaluation)?;
        if !cal.converged {
            warnings.push(format!("full-sample {method} calibration did not converge"));
        }
        io::save_items(&cal.items, emit(&format!("items_{method}.json")))?;
        io::save_abilities(&cal.person_ids, &cal.abilities, emit(&format!("abilities_{method}.csv")))?;
        let aligned = responses.align_to(&cal.items)?;
        let mut scored = Vec::new();
        for &s in &config.scorings {
            let batch = score_batch(&aligned, &cal.items, s, Some(&evaluation.prior))?;
            if !batch.errors.is_empty() {
                warnings.push(format!("{method}/{s}: {} rows could not be scored", batch.errors.len()));
            }
            io::save_scores(aligned.person_ids(), &batch.scores, emit(&format!("scores_{method}_{s}.csv")))?;
            scored.push((s, batch));
        }
        for (k, (s, batch)) in scored.iter().enumerate() {
            agreement.push(AgreementRecord {
                calibration: method,
                reference: "calibration".into(),
                compared: *s,
                correlation: score_agreement(&cal.abilities, &batch.estimates())?.correlation,
            });
            for (r, other) in &scored[..k] {
                agreement.push(AgreementRecord {
                    calibration: method,
                    reference: r.to_string(),
                    compared: *s,
                    correlation: score_agreement(&other.estimates(), &batch.estimates())?.correlation,
                });
            }
        }
        save_agreement_table(aligned.person_ids(), &cal, &scored, &emit(&format!("agreement_{method}.csv")))?;
        if let Some(c) = &control {
            for &s in &config.scorings {
                transfer.push(transfer_evaluate(&cal, c, s, &evaluation)?);
            }
        }
        calibrations.push(cal);
    }
    io::save_json(&agreement, emit("agreement.json"))?;
    if control.is_some() {
        io::save_json(&transfer, emit("transfer.json"))?;
    }

    let report = StudyReport {
        domain: config.domain.clone(),
        partition,
        deviance,
        calibrations,
        agreement,
        transfer,
        warnings,
    };
    io::save_json(&report.warnings, emit("warnings.json"))?;
    for p in outputs {
        manifest.output(p)?;
    }
    manifest.write(out.join("manifest.json"))?;
    Ok(report)
}
