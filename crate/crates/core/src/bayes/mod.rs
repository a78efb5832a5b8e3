//! Full Bayesian calibration of the hierarchical GRM by Hamiltonian Monte Carlo.

mod density;
pub mod diagnostics;
pub mod hmc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GrmError, Result};
use crate::model::{AbilityEstimate, Item, ItemParameters, ResponseMatrix};
pub use density::{BayesModel, Constrained, LogDensity, ParamLayout};
pub use diagnostics::{diagnose, effective_sample_size, split_rhat, ParamDiagnostics};
pub use hmc::{ChainStats, HmcSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BayesConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples_per_chain: usize,
    pub target_acceptance: f64,
    pub seed: u64,
    pub max_rhat: f64,
    /// Keep the positivity truncation of the threshold prior.
    pub positive_thresholds: bool,
    /// Upper end of the jittered trajectory length, in integration time units.
    pub integration_time: f64,
}

impl Default for BayesConfig {
    fn default() -> Self {
        BayesConfig {
            chains: 4,
            warmup: 1000,
            samples_per_chain: 1000,
            target_acceptance: 0.8,
            seed: 0,
            max_rhat: 1.01,
            positive_thresholds: true,
            integration_time: 4.0,
        }
    }
}

impl BayesConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GrmError::InvalidConfig(m));
        if self.chains < 2 {
            return bad(format!("chains must be >= 2, got {}", self.chains));
        }
        if self.warmup < 100 || self.samples_per_chain < 100 {
            return bad("warmup and samples_per_chain must be >= 100".into());
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return bad(format!("target_acceptance must lie in (0, 1), got {}", self.target_acceptance));
        }
        if !(self.max_rhat >= 1.0) {
            return bad(format!("max_rhat must be >= 1, got {}", self.max_rhat));
        }
        if !(self.integration_time > 0.0 && self.integration_time.is_finite()) {
            return bad("integration_time must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParameters {
    pub mu_tau: f64,
    pub sigma_tau: f64,
    pub sigma_theta: f64,
}

/// Retained draws in constrained space, stored chain-major as
/// `values[(chain * samples + iteration) * n_params + param]`.
///
/// Parameter order: `λ` per item, thresholds per item, `μ_τ`, `σ_τ`, `σ`,
/// then `θ` per person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub item_ids: Vec<String>,
    pub person_ids: Vec<String>,
    pub categories: Vec<usize>,
    pub chains: usize,
    pub samples_per_chain: usize,
    pub values: Vec<f64>,
    pub diagnostics: Vec<ParamDiagnostics>,
    pub sampler: Vec<ChainStats>,
    pub max_rhat: f64,
    /// Every parameter within `max_rhat`.
    pub converged: bool,
    /// Every item parameter (`λ`, `τ`) within `max_rhat`.
    pub items_converged: bool,
}

impl PosteriorDraws {
    /// Assembles draws for the parameters of `layout_source` and computes
    /// diagnostics.
    pub fn new(
        layout_source: &ResponseMatrix,
        chains: usize,
        samples_per_chain: usize,
        values: Vec<f64>,
        sampler: Vec<ChainStats>,
        max_rhat: f64,
    ) -> Result<Self> {
        let skeleton = PosteriorDraws {
            names: parameter_names(layout_source),
            item_ids: layout_source.item_ids().to_vec(),
            person_ids: layout_source.person_ids().to_vec(),
            categories: layout_source.categories().to_vec(),
            chains,
            samples_per_chain,
            values: Vec::new(),
            diagnostics: Vec::new(),
            sampler,
            max_rhat,
            converged: false,
            items_converged: false,
        };
        skeleton.with_values(values)
    }

    /// Replaces the draw buffer and recomputes diagnostics.
    fn with_values(mut self, values: Vec<f64>) -> Result<Self> {
        let expected = self.chains * self.samples_per_chain * self.names.len();
        if values.len() != expected {
            return Err(GrmError::InvalidResponses(format!(
                "draw buffer has {} values, expected {expected}",
                values.len()
            )));
        }
        self.values = values;
        self.diagnostics = (0..self.n_params())
            .into_par_iter()
            .map(|k| {
                let cols: Vec<Vec<f64>> = (0..self.chains).map(|c| self.chain_column(k, c)).collect();
                let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
                diagnose(&self.names[k], &refs)
            })
            .collect();
        let max_rhat = self.max_rhat;
        let ok = |d: &ParamDiagnostics| d.rhat <= max_rhat;
        self.items_converged = self.diagnostics[..self.n_item_params()].iter().all(ok);
        self.converged = self.diagnostics.iter().all(ok);
        Ok(self)
    }

    /// The same draws expressed on the unit ability scale: each draw is
    /// mapped by `λ → λσ`, `τ → τ/σ`, `μ_τ → μ_τ/σ`, `σ_τ → σ_τ/σ`,
    /// `θ → θ/σ`, `σ → 1`. The likelihood is invariant under this map, so it
    /// removes the scale that only the priors pin down.
    pub fn standardized(&self) -> PosteriorDraws {
        let n_items = self.n_items();
        let o = self.n_item_params();
        let mut values = self.values.clone();
        for d in values.chunks_exact_mut(self.n_params().max(1)) {
            let sigma = d[o + 2];
            d[..n_items].iter_mut().for_each(|v| *v *= sigma);
            d[n_items..o + 2].iter_mut().for_each(|v| *v /= sigma);
            d[o + 2] = 1.0;
            d[o + 3..].iter_mut().for_each(|v| *v /= sigma);
        }
        self.clone()
            .with_values(values)
            .expect("standardizing keeps the buffer shape")
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    /// Number of `λ` and `τ` entries at the front of each draw.
    pub fn n_item_params(&self) -> usize {
        self.n_items() + self.categories.iter().map(|j| j - 1).sum::<usize>()
    }

    pub fn n_draws(&self) -> usize {
        self.chains * self.samples_per_chain
    }

    /// Index of the first `θ` entry.
    pub fn theta_offset(&self) -> usize {
        self.n_item_params() + 3
    }

    /// The draw at `(chain, iteration)`.
    pub fn draw(&self, chain: usize, iteration: usize) -> &[f64] {
        let n = self.n_params();
        let start = (chain * self.samples_per_chain + iteration) * n;
        &self.values[start..start + n]
    }

    pub fn draws(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_params().max(1))
    }

    pub fn chain_column(&self, param: usize, chain: usize) -> Vec<f64> {
        (0..self.samples_per_chain).map(|s| self.draw(chain, s)[param]).collect()
    }

    /// All retained values of one parameter, chains concatenated.
    pub fn column(&self, param: usize) -> Vec<f64> {
        self.draws().map(|d| d[param]).collect()
    }

    /// Equal-tailed central interval with coverage `level`.
    pub fn interval(&self, param: usize, level: f64) -> (f64, f64) {
        let mut col = self.column(param);
        col.sort_by(f64::total_cmp);
        let a = (1.0 - level) / 2.0;
        (quantile_sorted(&col, a), quantile_sorted(&col, 1.0 - a))
    }

    pub fn hyper(&self, draw: &[f64]) -> HyperParameters {
        let o = self.n_item_params();
        HyperParameters {
            mu_tau: draw[o],
            sigma_tau: draw[o + 1],
            sigma_theta: draw[o + 2],
        }
    }
}

/// Linear interpolation between order statistics (type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn parameter_names(responses: &ResponseMatrix) -> Vec<String> {
    let mut names: Vec<String> = responses.item_ids().iter().map(|id| format!("lambda[{id}]")).collect();
    for (id, &j) in responses.item_ids().iter().zip(responses.categories()) {
        names.extend((1..j).map(|k| format!("tau[{id},{k}]")));
    }
    names.extend(["mu_tau", "sigma_tau", "sigma_theta"].map(String::from));
    names.extend(responses.person_ids().iter().map(|p| format!("theta[{p}]")));
    names
}

fn flatten(c: &Constrained) -> impl Iterator<Item = f64> + '_ {
    c.lambda
        .iter()
        .chain(&c.tau)
        .copied()
        .chain([c.mu_tau, c.sigma_tau, c.sigma_theta])
        .chain(c.theta.iter().copied())
}

/// Joint log posterior and its gradient at an unconstrained point.
pub fn log_posterior_density(
    unconstrained: &[f64],
    responses: &ResponseMatrix,
    positive_thresholds: bool,
) -> Result<(f64, Vec<f64>)> {
    let model = BayesModel::new(responses, positive_thresholds);
    if unconstrained.len() != model.dim() {
        return Err(GrmError::InvalidConfig(format!(
            "parameter vector has length {}, model needs {}",
            unconstrained.len(),
            model.dim()
        )));
    }
    let mut grad = vec![0.0; model.dim()];
    let lp = model.log_density_and_gradient(unconstrained, &mut grad);
    Ok((lp, grad))
}

/// Draws from the posterior with `config.chains` independent chains.
///
/// Chain `c` uses stream `c` of a ChaCha8 generator seeded with `config.seed`,
/// so output does not depend on thread scheduling.
pub fn sample_posterior(responses: &ResponseMatrix, config: &BayesConfig) -> Result<PosteriorDraws> {
    config.validate()?;
    let model = BayesModel::new(responses, config.positive_thresholds);
    let settings = HmcSettings {
        warmup: config.warmup,
        samples: config.samples_per_chain,
        target_acceptance: config.target_acceptance,
        integration_time: config.integration_time,
    };
    let outputs: Vec<Result<(Vec<f64>, ChainStats)>> = (0..config.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(c as u64);
            let init = hmc::random_initialization(&model, &mut rng).ok_or(GrmError::NonFinite {
                what: "log posterior at every initialization attempt",
                value: f64::NEG_INFINITY,
            })?;
            let out = hmc::run_chain(&model, init, &settings, &mut rng);
            let dim = model.dim().max(1);
            let mut values = Vec::with_capacity(out.draws.len());
            for x in out.draws.chunks_exact(dim) {
                values.extend(flatten(&model.constrain(x)));
            }
            Ok((values, out.stats))
        })
        .collect();
    let mut values = Vec::new();
    let mut stats = Vec::new();
    for o in outputs {
        let (v, s) = o?;
        values.extend(v);
        stats.push(s);
    }
    let draws = PosteriorDraws::new(
        responses,
        config.chains,
        config.samples_per_chain,
        values,
        stats,
        config.max_rhat,
    )?;
    if !draws.converged {
        let worst = draws
            .diagnostics
            .iter()
            .filter(|d| !(d.rhat <= draws.max_rhat))
            .max_by(|a, b| a.rhat.total_cmp(&b.rhat));
        if let Some(w) = worst {
            log::warn!("posterior not converged: {} has R-hat {:.4}", w.name, w.rhat);
        }
    }
    Ok(draws)
}

/// Posterior point summaries used downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    /// Posterior means of `λ` and `τ`.
    pub items: ItemParameters,
    /// Posterior mean and sd of each `θ_p`.
    pub abilities: Vec<AbilityEstimate>,
    pub hyper: HyperParameters,
}

/// Streaming means and sample standard deviations of every parameter.
pub fn posterior_moments(draws: &PosteriorDraws) -> (Vec<f64>, Vec<f64>) {
    let k = draws.n_params();
    let mut mean = vec![0.0; k];
    let mut m2 = vec![0.0; k];
    let mut n = 0.0;
    for d in draws.draws() {
        n += 1.0;
        for j in 0..k {
            let delta = d[j] - mean[j];
            mean[j] += delta / n;
            m2[j] += delta * (d[j] - mean[j]);
        }
    }
    let sd = m2.iter().map(|m| if n > 1.0 { (m / (n - 1.0)).sqrt() } else { 0.0 }).collect();
    (mean, sd)
}

/// Reduces draws to posterior means for items and `(mean, sd)` per person.
pub fn summarize_posterior(draws: &PosteriorDraws) -> Result<PosteriorSummary> {
    let (mean, sd) = posterior_moments(draws);
    let n_items = draws.n_items();
    let mut items = Vec::with_capacity(n_items);
    let mut k = n_items;
    for i in 0..n_items {
        let mut t = mean[k..k + draws.categories[i] - 1].to_vec();
        k += t.len();
        t.sort_by(f64::total_cmp);
        for j in 1..t.len() {
            if t[j] <= t[j - 1] {
                t[j] = t[j - 1].next_up();
            }
        }
        items.push(Item::new(draws.item_ids[i].clone(), mean[i], t)?);
    }
    let o = draws.theta_offset();
    let abilities = (0..draws.person_ids.len())
        .map(|p| AbilityEstimate::new(mean[o + p], sd[o + p]))
        .collect();
    Ok(PosteriorSummary {
        items: ItemParameters::new(items)?,
        abilities,
        hyper: HyperParameters {
            mu_tau: mean[o - 3],
            sigma_tau: mean[o - 2],
            sigma_theta: mean[o - 1],
        },
    })
}
