//! `grm`: simulate, calibrate, score and evaluate graded response models.
//!
//! Exit codes: 0 on success, 2 for invalid input or configuration, 3 when a
//! calibration did not converge (all artifacts are still written), 1 for
//! other I/O failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use grm_core::bayes::{ChainStats, ParamDiagnostics};
use grm_core::evaluation::{
    calibrate_bayes, cross_validate_grid, partition_folds, transfer_evaluate, Calibration, CalibrationMethod,
};
use grm_core::io;
use grm_core::mml::calibrate_mml;
use grm_core::scoring::{score_batch, ScoringMethod};
use grm_core::study::{generate_truth, run_study_with_inputs, unix_now, DomainConfig, RunManifest, StudyConfig};
use grm_core::{simulate_responses, AbilityEstimate, ItemParameters, ResponseMatrix, Result};

#[derive(Parser)]
#[command(name = "grm", version, about = "Graded response model calibration, scoring and evaluation")]
struct Cli {
    /// Seed for every random stream; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML or JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw item parameters and abilities, then simulate responses.
    Simulate(SimulateArgs),
    /// Estimate item parameters from a response file.
    Calibrate(CalibrateArgs),
    /// Score response rows against fixed item parameters.
    Score(ScoreArgs),
    /// Cross-validated deviance, or deviance on a control sample with `--items`.
    Evaluate(EvaluateArgs),
    /// Full synthetic study: simulation, cross-validation and score agreement.
    Study(StudyArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    persons: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    categories: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DrawsFormat {
    Binary,
    Csv,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    method: CalibrationMethod,
    #[arg(long)]
    responses: PathBuf,
    /// Item parameters (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Calibration-sample abilities (CSV); defaults next to `--out`.
    #[arg(long)]
    abilities: Option<PathBuf>,
    /// Posterior draws (Bayes only).
    #[arg(long)]
    draws: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "binary")]
    draws_format: DrawsFormat,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    method: ScoringMethod,
    #[arg(long)]
    items: PathBuf,
    #[arg(long)]
    responses: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    responses: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Calibration methods to compare (repeatable; default all).
    #[arg(long = "calibration")]
    calibrations: Vec<CalibrationMethod>,
    /// Scoring methods to compare (repeatable; default all).
    #[arg(long = "scoring")]
    scorings: Vec<ScoringMethod>,
    #[arg(long)]
    folds: Option<usize>,
    /// Fixed item parameters: score `--responses` as a control sample instead
    /// of cross-validating.
    #[arg(long, requires = "calibrated_by")]
    items: Option<PathBuf>,
    /// Method that produced `--items`.
    #[arg(long)]
    calibrated_by: Option<CalibrationMethod>,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    persons: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
}

enum Outcome {
    Done,
    NotConverged,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}

fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::Calibrate(a) => calibrate(cli, a),
        Command::Score(a) => score(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Study(a) => study(cli, a),
    }
}

fn study_config(cli: &Cli) -> Result<StudyConfig> {
    let mut c: StudyConfig = match &cli.config {
        Some(p) => io::load_config(p)?,
        None => StudyConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    Ok(c)
}

fn domain_config(cli: &Cli) -> Result<DomainConfig> {
    let mut c: DomainConfig = match &cli.config {
        Some(p) => io::load_config(p)?,
        None => DomainConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

/// Responses aligned to a calibrated bank, re-indexed with the bank's
/// `categories.json` when calibration wrote one.
fn load_for_bank(responses: &Path, items_path: &Path, items: &ItemParameters, m: &mut RunManifest) -> Result<ResponseMatrix> {
    let map_path = sibling(items_path, "categories.json");
    if !map_path.exists() {
        return Ok(io::load_responses_for(responses, items)?);
    }
    m.input(&map_path)?;
    let mappings: Vec<io::CategoryMapping> = io::load_json(&map_path)?;
    Ok(io::load_responses_mapped(responses, items, &mappings)?)
}

/// `dir/stem.suffix` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn manifest(cli: &Cli, command: &str, config: &impl Serialize, seed: u64) -> Result<RunManifest> {
    let mut m = RunManifest::new(command, config, unix_now())?;
    m.seeds.insert("seed".into(), seed);
    if let Some(p) = &cli.config {
        m.input(p)?;
    }
    Ok(m)
}

fn load_domain_responses(path: &Path, config: &DomainConfig, out: &Path, outputs: &mut Vec<PathBuf>) -> Result<ResponseMatrix> {
    let loaded = io::load_responses(path)?;
    if !loaded.mappings.is_empty() {
        let p = sibling(out, "categories.json");
        io::save_json(&loaded.mappings, &p)?;
        log::warn!("category codes re-indexed for {} items; mapping in {}", loaded.mappings.len(), p.display());
        outputs.push(p);
    }
    config.apply(loaded.matrix)
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<Outcome> {
    let mut config = study_config(cli)?;
    config.persons = a.persons.unwrap_or(config.persons);
    config.items = a.items.unwrap_or(config.items);
    config.categories = a.categories.unwrap_or(config.categories);
    config.validate()?;
    let mut m = manifest(cli, "simulate", &config, config.seed)?;
    let truth = generate_truth(&config)?;
    let responses = simulate_responses(&truth.items, &truth.thetas, config.seed.wrapping_add(1))
        .with_domain(config.domain.clone());
    let d = &a.out_dir;
    io::save_responses(&responses, d.join("responses.csv"))?;
    io::save_items(&truth.items, d.join("truth_items.json"))?;
    let abilities: Vec<AbilityEstimate> = truth.thetas.iter().map(|&t| AbilityEstimate::new(t, 0.0)).collect();
    io::save_abilities(responses.person_ids(), &abilities, d.join("truth_abilities.csv"))?;
    for f in ["responses.csv", "truth_items.json", "truth_abilities.csv"] {
        m.output(d.join(f))?;
    }
    m.write(d.join("manifest.json"))?;
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct BayesDiagnostics<'a> {
    converged: bool,
    items_converged: bool,
    max_rhat: f64,
    sampler: &'a [ChainStats],
    parameters: &'a [ParamDiagnostics],
}

#[derive(Serialize)]
struct MmlDiagnostics<'a> {
    converged: bool,
    iterations: usize,
    final_marginal_log_likelihood: f64,
    trace: &'a [f64],
    excluded_items: &'a [String],
}

fn calibrate(cli: &Cli, a: &CalibrateArgs) -> Result<Outcome> {
    let config = domain_config(cli)?;
    let evaluation = config.seeded_evaluation();
    let mut m = manifest(cli, "calibrate", &config, config.seed)?;
    m.input(&a.responses)?;
    let mut outputs = Vec::new();
    let responses = load_domain_responses(&a.responses, &config, &a.out, &mut outputs)?;
    let diagnostics = sibling(&a.out, "diagnostics.json");
    let calibration = match a.method {
        CalibrationMethod::Mml => {
            let fit = calibrate_mml(&responses, &evaluation.mml)?;
            io::save_json(
                &MmlDiagnostics {
                    converged: fit.converged,
                    iterations: fit.iterations,
                    final_marginal_log_likelihood: fit.final_marginal_log_likelihood,
                    trace: &fit.trace,
                    excluded_items: &fit.excluded_items,
                },
                &diagnostics,
            )?;
            Calibration {
                method: a.method,
                items: fit.items,
                person_ids: responses.person_ids().to_vec(),
                abilities: fit.abilities,
                converged: fit.converged,
                excluded_items: fit.excluded_items,
            }
        }
        CalibrationMethod::Bayes => {
            let (calibration, draws) = calibrate_bayes(&responses, &evaluation.bayes)?;
            io::save_json(
                &BayesDiagnostics {
                    converged: draws.converged,
                    items_converged: draws.items_converged,
                    max_rhat: draws.max_rhat,
                    sampler: &draws.sampler,
                    parameters: &draws.diagnostics,
                },
                &diagnostics,
            )?;
            if let Some(p) = &a.draws {
                match a.draws_format {
                    DrawsFormat::Binary => io::save_draws_binary(&draws, p)?,
                    DrawsFormat::Csv => io::save_draws_csv(&draws, p)?,
                }
                outputs.push(p.clone());
            }
            calibration
        }
    };
    outputs.push(diagnostics);
    io::save_items(&calibration.items, &a.out)?;
    outputs.push(a.out.clone());
    let abilities = a.abilities.clone().unwrap_or_else(|| sibling(&a.out, "abilities.csv"));
    io::save_abilities(&calibration.person_ids, &calibration.abilities, &abilities)?;
    outputs.push(abilities);
    for p in outputs {
        m.output(p)?;
    }
    m.write(sibling(&a.out, "manifest.json"))?;
    if calibration.converged {
        Ok(Outcome::Done)
    } else {
        log::warn!("{} calibration did not converge", a.method);
        Ok(Outcome::NotConverged)
    }
}

fn score(cli: &Cli, a: &ScoreArgs) -> Result<Outcome> {
    let config = domain_config(cli)?;
    let mut m = manifest(cli, "score", &config, config.seed)?;
    m.input(&a.items)?;
    m.input(&a.responses)?;
    let items = io::load_items(&a.items)?;
    let responses = load_for_bank(&a.responses, &a.items, &items, &mut m)?;
    let batch = score_batch(&responses, &items, a.method, Some(&config.evaluation.prior))?;
    io::save_scores(responses.person_ids(), &batch.scores, &a.out)?;
    m.output(&a.out)?;
    if !batch.errors.is_empty() {
        log::warn!("{} rows could not be scored", batch.errors.len());
        let p = sibling(&a.out, "errors.json");
        io::save_json(&batch.errors, &p)?;
        m.output(p)?;
    }
    m.write(sibling(&a.out, "manifest.json"))?;
    Ok(Outcome::Done)
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<Outcome> {
    let mut config = domain_config(cli)?;
    config.folds = a.folds.unwrap_or(config.folds);
    config.validate()?;
    let evaluation = config.seeded_evaluation();
    let scorings = if a.scorings.is_empty() { ScoringMethod::ALL.to_vec() } else { a.scorings.clone() };
    let mut m = manifest(cli, "evaluate", &config, config.seed)?;
    m.input(&a.responses)?;
    let d = &a.out_dir;

    if let (Some(items_path), Some(method)) = (&a.items, a.calibrated_by) {
        m.input(items_path)?;
        let items = io::load_items(items_path)?;
        let control = load_for_bank(&a.responses, items_path, &items, &mut m)?;
        let calibration = Calibration {
            method,
            items,
            person_ids: Vec::new(),
            abilities: Vec::new(),
            converged: true,
            excluded_items: Vec::new(),
        };
        let reports = scorings
            .iter()
            .map(|&s| transfer_evaluate(&calibration, &control, s, &evaluation))
            .collect::<Result<Vec<_>>>()?;
        io::save_json(&reports, d.join("transfer.json"))?;
        m.output(d.join("transfer.json"))?;
        m.write(d.join("manifest.json"))?;
        return Ok(Outcome::Done);
    }

    let calibrations = if a.calibrations.is_empty() { CalibrationMethod::ALL.to_vec() } else { a.calibrations.clone() };
    let mut outputs = Vec::new();
    let responses = load_domain_responses(&a.responses, &config, &d.join("deviance.json"), &mut outputs)?;
    let partition = partition_folds(responses.persons(), config.folds, config.seed)?;
    let pairs = cross_validate_grid(&responses, &partition, &calibrations, &scorings, &evaluation)?;
    io::save_json(&partition, d.join("folds.json"))?;
    io::save_json(&pairs, d.join("deviance.json"))?;
    outputs.push(d.join("folds.json"));
    outputs.push(d.join("deviance.json"));
    for p in outputs {
        m.output(p)?;
    }
    m.write(d.join("manifest.json"))?;
    let excluded = pairs.iter().any(|p| !p.expected.excluded_folds.is_empty());
    Ok(if excluded { Outcome::NotConverged } else { Outcome::Done })
}

fn study(cli: &Cli, a: &StudyArgs) -> Result<Outcome> {
    let mut config = study_config(cli)?;
    config.persons = a.persons.unwrap_or(config.persons);
    config.items = a.items.unwrap_or(config.items);
    config.folds = a.folds.unwrap_or(config.folds);
    let inputs: Vec<PathBuf> = cli.config.iter().cloned().collect();
    let report = run_study_with_inputs(&config, &a.out_dir, &inputs)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let converged = report.calibrations.iter().all(|c| c.converged)
        && report.deviance.iter().all(|p| p.expected.excluded_folds.is_empty());
    Ok(if converged { Outcome::Done } else { Outcome::NotConverged })
}
