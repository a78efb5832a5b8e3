//! Marginal maximum likelihood calibration by EM over a fixed quadrature grid.
//!
//! The ability distribution of the calibration sample is fixed at `N(0, 1)`,
//! which pins location and scale. Each M-step maximizes the expected
//! complete-data log-likelihood item by item with a damped Newton method in
//! an unconstrained parameterization `(ln λ, τ_1, ln(τ_2 − τ_1), …)`; a step is
//! only accepted if it increases the item's objective, so the marginal
//! likelihood is non-decreasing across iterations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GrmError, Result};
use crate::math::{normal_pdf, normal_quantile};
use crate::model::{cell_terms, AbilityEstimate, Item, ItemParameters, ResponseMatrix};
use crate::quadrature::trapezoid_grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MmlConfig {
    pub quadrature_nodes: usize,
    pub node_range: [f64; 2],
    pub max_em_iterations: usize,
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for MmlConfig {
    fn default() -> Self {
        MmlConfig {
            quadrature_nodes: 61,
            node_range: [-6.0, 6.0],
            max_em_iterations: 500,
            rel_tol: 1e-6,
            seed: 0,
        }
    }
}

impl MmlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.quadrature_nodes < 11 || self.quadrature_nodes % 2 == 0 {
            return Err(GrmError::InvalidConfig(format!(
                "quadrature_nodes must be odd and >= 11, got {}",
                self.quadrature_nodes
            )));
        }
        let [lo, hi] = self.node_range;
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return Err(GrmError::InvalidConfig(format!("bad node_range [{lo}, {hi}]")));
        }
        if !(self.rel_tol > 0.0) {
            return Err(GrmError::InvalidConfig("rel_tol must be positive".into()));
        }
        if self.max_em_iterations == 0 {
            return Err(GrmError::InvalidConfig("max_em_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Population quadrature: equally spaced nodes with normalized `N(0,1)` weights.
#[derive(Debug, Clone)]
pub struct PopulationGrid {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PopulationGrid {
    pub fn new(config: &MmlConfig) -> Self {
        let [lo, hi] = config.node_range;
        let (nodes, trap) = trapezoid_grid(lo, hi, config.quadrature_nodes);
        let mut weights: Vec<f64> = nodes.iter().zip(&trap).map(|(&x, &w)| w * normal_pdf(x)).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        PopulationGrid { nodes, weights }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MmlCalibration {
    pub items: ItemParameters,
    pub abilities: Vec<AbilityEstimate>,
    pub final_marginal_log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Marginal log-likelihood after each E-step.
    pub trace: Vec<f64>,
    /// Ids of items dropped because they were observed in fewer than two categories.
    pub excluded_items: Vec<String>,
}

/// `ln P(x | θ_q)` for every item, node and category.
struct LogProbTable {
    // [item][node * categories + j]
    table: Vec<Vec<f64>>,
    categories: Vec<usize>,
}

impl LogProbTable {
    fn new(items: &ItemParameters, nodes: &[f64]) -> Self {
        let table = items
            .iter()
            .map(|it| {
                let j = it.categories();
                let mut row = Vec::with_capacity(nodes.len() * j);
                for &t in nodes {
                    for c in 0..j {
                        row.push(crate::model::item_cell_terms(it, t, c).log_p);
                    }
                }
                row
            })
            .collect();
        LogProbTable {
            table,
            categories: items.categories(),
        }
    }

    fn person_log_likelihood(&self, row: &[Option<u8>], nodes: usize) -> Vec<f64> {
        let mut out = vec![0.0; nodes];
        for (i, x) in row.iter().enumerate() {
            if let Some(x) = x {
                let j = self.categories[i];
                let t = &self.table[i];
                for (q, o) in out.iter_mut().enumerate() {
                    *o += t[q * j + *x as usize];
                }
            }
        }
        out
    }
}

/// Per-person normalized posterior weights over the nodes plus the person's
/// marginal log-likelihood.
fn e_step(responses: &ResponseMatrix, items: &ItemParameters, grid: &PopulationGrid) -> (Vec<Vec<f64>>, Vec<f64>) {
    let table = LogProbTable::new(items, &grid.nodes);
    let q = grid.nodes.len();
    let log_w: Vec<f64> = grid.weights.iter().map(|w| w.ln()).collect();
    let per_person: Vec<(Vec<f64>, f64)> = (0..responses.persons())
        .into_par_iter()
        .map(|p| {
            let mut lp = table.person_log_likelihood(responses.row(p), q);
            lp.iter_mut().zip(&log_w).for_each(|(a, b)| *a += b);
            let m = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in lp.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            lp.iter_mut().for_each(|v| *v /= total);
            (lp, m + total.ln())
        })
        .collect();
    per_person.into_iter().unzip()
}

/// `Σ_p ln ∫ Π_i P(x_pi | θ) dN(θ; 0, 1)` on the configured grid.
pub fn marginal_log_likelihood(responses: &ResponseMatrix, items: &ItemParameters, config: &MmlConfig) -> f64 {
    assert_eq!(responses.items(), items.len(), "responses must be aligned to the items");
    let grid = PopulationGrid::new(config);
    e_step(responses, items, &grid).1.iter().sum()
}

/// Quadrature posterior mean and sd of each person's ability under `N(0, 1)`.
/// Rows without observations get the prior `(0, 1)`.
pub fn mml_ability_posteriors(
    responses: &ResponseMatrix,
    items: &ItemParameters,
    config: &MmlConfig,
) -> Vec<AbilityEstimate> {
    assert_eq!(responses.items(), items.len(), "responses must be aligned to the items");
    let grid = PopulationGrid::new(config);
    let (post, _) = e_step(responses, items, &grid);
    summarize_posteriors(responses, &post, &grid)
}

fn summarize_posteriors(responses: &ResponseMatrix, post: &[Vec<f64>], grid: &PopulationGrid) -> Vec<AbilityEstimate> {
    post.iter()
        .enumerate()
        .map(|(p, w)| {
            if responses.row(p).iter().all(Option::is_none) {
                return AbilityEstimate::new(0.0, 1.0);
            }
            let mean: f64 = w.iter().zip(&grid.nodes).map(|(w, t)| w * t).sum();
            let var: f64 = w.iter().zip(&grid.nodes).map(|(w, t)| w * (t - mean).powi(2)).sum();
            AbilityEstimate::new(mean, var.max(0.0).sqrt())
        })
        .collect()
}

/// Bounds on the unconstrained item parameters; they keep the Newton iterates
/// finite when a category is unobserved and its threshold runs off.
const LOG_LAMBDA_BOUNDS: (f64, f64) = (-4.0, 4.0);
const FIRST_THRESHOLD_BOUNDS: (f64, f64) = (-20.0, 20.0);
const LOG_GAP_BOUNDS: (f64, f64) = (-12.0, 3.5);

/// Item parameters in the unconstrained coordinates used by the M-step.
#[derive(Debug, Clone)]
struct ItemCoords(Vec<f64>);

impl ItemCoords {
    fn from_item(item: &Item) -> Self {
        let mut v = Vec::with_capacity(item.categories());
        v.push(item.discrimination.ln());
        v.push(item.thresholds[0]);
        for w in item.thresholds.windows(2) {
            v.push((w[1] - w[0]).ln());
        }
        ItemCoords(v)
    }

    fn lambda(&self) -> f64 {
        self.0[0].exp()
    }

    fn thresholds(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.0.len() - 1);
        let mut acc = self.0[1];
        t.push(acc);
        for g in &self.0[2..] {
            acc += g.exp();
            t.push(acc);
        }
        t
    }

    fn clamp(&mut self) {
        let b = |k: usize| match k {
            0 => LOG_LAMBDA_BOUNDS,
            1 => FIRST_THRESHOLD_BOUNDS,
            _ => LOG_GAP_BOUNDS,
        };
        for (k, v) in self.0.iter_mut().enumerate() {
            let (lo, hi) = b(k);
            *v = v.clamp(lo, hi);
        }
    }
}

/// Expected complete-data log-likelihood of one item and its gradient in
/// [`ItemCoords`]. `counts[q * J + j]` is the expected number of responses in
/// category `j` at node `q`.
fn item_objective(coords: &ItemCoords, counts: &[f64], nodes: &[f64]) -> (f64, Vec<f64>) {
    let lam = coords.lambda();
    let tau = coords.thresholds();
    let ncat = tau.len() + 1;
    let gaps: Vec<f64> = (0..ncat)
        .map(|j| {
            if j > 0 && j + 1 < ncat {
                -(-lam * (tau[j] - tau[j - 1])).exp_m1()
            } else {
                1.0
            }
        })
        .collect();
    let mut value = 0.0;
    let mut d_lam = 0.0;
    let mut d_tau = vec![0.0; tau.len()];
    for (q, &theta) in nodes.iter().enumerate() {
        for j in 0..ncat {
            let r = counts[q * ncat + j];
            if r == 0.0 {
                continue;
            }
            let u = (j > 0).then(|| lam * (theta - tau[j - 1]));
            let v = (j + 1 < ncat).then(|| lam * (theta - tau[j]));
            let c = cell_terms(u, v, gaps[j]);
            value += r * c.log_p;
            if j > 0 {
                d_lam += r * (theta - tau[j - 1]) * c.d_u;
                d_tau[j - 1] -= r * lam * c.d_u;
            }
            if j + 1 < ncat {
                d_lam += r * (theta - tau[j]) * c.d_v;
                d_tau[j] -= r * lam * c.d_v;
            }
        }
    }
    let mut grad = vec![0.0; coords.0.len()];
    grad[0] = lam * d_lam;
    // τ_k = η_1 + Σ_{m=2..k} exp(η_m): suffix sums of the threshold gradient
    let mut suffix = 0.0;
    for k in (0..tau.len()).rev() {
        suffix += d_tau[k];
        if k == 0 {
            grad[1] = suffix;
        } else {
            grad[k + 1] = suffix * coords.0[k + 1].exp();
        }
    }
    (value, grad)
}

/// Solves `A x = b` for symmetric positive-definite `A` (row-major, n×n).
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    Some(x)
}

const NEWTON_MAX_STEPS: usize = 25;
const NEWTON_GRAD_TOL: f64 = 1e-8;

/// Damped Newton ascent on one item's expected complete-data log-likelihood.
fn maximize_item(start: &Item, counts: &[f64], nodes: &[f64]) -> Item {
    let mut x = ItemCoords::from_item(start);
    x.clamp();
    let n = x.0.len();
    let (mut fx, mut g) = item_objective(&x, counts, nodes);
    for _ in 0..NEWTON_MAX_STEPS {
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < NEWTON_GRAD_TOL {
            break;
        }
        // Hessian by central differences of the analytic gradient.
        let mut h = vec![0.0; n * n];
        for k in 0..n {
            let step = 1e-5 * x.0[k].abs().max(1.0);
            let mut xp = x.clone();
            xp.0[k] += step;
            let mut xm = x.clone();
            xm.0[k] -= step;
            let gp = item_objective(&xp, counts, nodes).1;
            let gm = item_objective(&xm, counts, nodes).1;
            for r in 0..n {
                h[r * n + k] = (gp[r] - gm[r]) / (2.0 * step);
            }
        }
        let mut neg_h = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                neg_h[r * n + c] = -0.5 * (h[r * n + c] + h[c * n + r]);
            }
        }
        // Levenberg damping until the system is positive definite.
        let scale = (0..n).map(|k| neg_h[k * n + k].abs()).fold(1e-8, f64::max);
        let mut mu = 0.0;
        let direction = loop {
            let mut m = neg_h.clone();
            for k in 0..n {
                m[k * n + k] += mu;
            }
            if let Some(d) = cholesky_solve(&m, &g, n) {
                break d;
            }
            mu = if mu == 0.0 { 1e-6 * scale } else { mu * 10.0 };
            if mu > 1e12 * scale {
                break g.iter().map(|v| v / scale).collect();
            }
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut xn = x.clone();
            xn.0.iter_mut().zip(&direction).for_each(|(a, d)| *a += t * d);
            xn.clamp();
            let (fn_, gn) = item_objective(&xn, counts, nodes);
            if fn_.is_finite() && fn_ > fx {
                x = xn;
                fx = fn_;
                g = gn;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Item::new(start.id.clone(), x.lambda(), x.thresholds()).expect("coordinates map to a valid item")
}

/// Starting values: unit discrimination and thresholds at normal quantiles of
/// the observed cumulative category proportions.
fn initial_item(id: &str, counts: &[usize]) -> Item {
    let total: usize = counts.iter().sum();
    // P(X ≥ j) ≈ Φ(−τ_j κ / sqrt(1 + κ²)) for λ = 1 under N(0, 1), κ = 1/1.702
    let kappa = crate::model::PROBIT_SCALE;
    let scale = (1.0 + kappa * kappa).sqrt() / kappa;
    let mut below = 0usize;
    let mut thresholds = Vec::with_capacity(counts.len() - 1);
    for c in &counts[..counts.len() - 1] {
        below += c;
        let f = (below as f64 / total as f64).clamp(0.01, 0.99);
        let mut t = scale * normal_quantile(f);
        if let Some(&prev) = thresholds.last() {
            t = f64::max(t, prev + 0.1);
        }
        thresholds.push(t);
    }
    Item::new(id, 1.0, thresholds).expect("initial thresholds are ordered")
}

fn expected_counts(responses: &ResponseMatrix, post: &[Vec<f64>], item: usize, nodes: usize) -> Vec<f64> {
    let ncat = responses.categories()[item];
    let mut counts = vec![0.0; nodes * ncat];
    for (p, w) in post.iter().enumerate() {
        if let Some(x) = responses.get(p, item) {
            let x = x as usize;
            for (q, wq) in w.iter().enumerate() {
                counts[q * ncat + x] += wq;
            }
        }
    }
    counts
}

/// Calibrates every item that was observed in at least two categories.
pub fn calibrate_mml(responses: &ResponseMatrix, config: &MmlConfig) -> Result<MmlCalibration> {
    config.validate()?;
    let mut keep = Vec::new();
    let mut excluded_items = Vec::new();
    for i in 0..responses.items() {
        let counts = responses.category_counts(i);
        if counts.iter().filter(|&&c| c > 0).count() >= 2 {
            keep.push(i);
        } else {
            log::warn!("excluding item `{}`: observed in fewer than two categories", responses.item_ids()[i]);
            excluded_items.push(responses.item_ids()[i].clone());
        }
    }
    if keep.is_empty() {
        return Err(GrmError::NoCalibratableItems);
    }
    let data = responses.subset_items(&keep);
    let grid = PopulationGrid::new(config);
    let q = grid.nodes.len();

    let mut items = ItemParameters::new(
        (0..data.items())
            .map(|i| initial_item(&data.item_ids()[i], &data.category_counts(i)))
            .collect(),
    )?;

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let (mut post, mut person_ll) = e_step(&data, &items, &grid);
    trace.push(person_ll.iter().sum::<f64>());
    while iterations < config.max_em_iterations {
        iterations += 1;
        let updated: Vec<Item> = (0..data.items())
            .into_par_iter()
            .map(|i| {
                let counts = expected_counts(&data, &post, i, q);
                maximize_item(&items[i], &counts, &grid.nodes)
            })
            .collect();
        items = ItemParameters::new(updated)?;
        (post, person_ll) = e_step(&data, &items, &grid);
        let ll: f64 = person_ll.iter().sum();
        let prev = *trace.last().unwrap();
        trace.push(ll);
        log::debug!("em iteration {iterations}: marginal log-likelihood {ll}");
        if (ll - prev).abs() <= config.rel_tol * ll.abs() {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("EM stopped after {iterations} iterations without reaching rel_tol");
    }
    let abilities = summarize_posteriors(&data, &post, &grid);
    Ok(MmlCalibration {
        items,
        abilities,
        final_marginal_log_likelihood: *trace.last().unwrap(),
        iterations,
        converged,
        trace,
        excluded_items,
    })
}
