//! Joint log density of the hierarchical GRM in unconstrained coordinates.
//!
//! ```text
//! λ_i  ~ half-Cauchy(0, 5)
//! τ_ij ~ normal⁺(μ_τ, σ_τ), ordered within each item
//! μ_τ  ~ normal(0, 5)
//! σ_τ  ~ half-Cauchy(0, 1)
//! θ_p  = σ z_p,  z_p ~ normal(0, 1)
//! σ    ~ half-Cauchy(0, 1)
//! ```
//!
//! Unconstrained layout: `ln(λ_i σ)` for every item, then per item the first
//! scaled threshold (`ln(τ_i1/σ)` when thresholds are truncated to be
//! positive, `τ_i1/σ` otherwise) followed by `ln((τ_ij − τ_i,j−1)/σ)`, then
//! `μ_τ/σ`, `ln(σ_τ/σ)`, `ln σ` and finally `z_p` for every person.
//!
//! The likelihood only sees `λσ` and `τ/σ`, so expressing the item block
//! relative to `σ` leaves `ln σ` as the single coordinate moved by the priors
//! alone. Log-Jacobians of all transforms are included.

use crate::math::{inverse_mills, log_normal_cdf};
use crate::model::{cell_terms, ResponseMatrix};

/// A differentiable unnormalized log density.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Writes `∇ log p(x)` into `grad` and returns `log p(x)`.
    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

const LAMBDA_SCALE: f64 = 5.0;
const MU_TAU_SD: f64 = 5.0;
const SIGMA_TAU_SCALE: f64 = 1.0;
const SIGMA_THETA_SCALE: f64 = 1.0;

/// Index bookkeeping for the unconstrained parameter vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub categories: Vec<usize>,
    /// Offset of each item's threshold block.
    pub threshold_offsets: Vec<usize>,
    pub n_items: usize,
    pub n_thresholds: usize,
    pub n_persons: usize,
}

impl ParamLayout {
    pub fn new(categories: &[usize], n_persons: usize) -> Self {
        let n_items = categories.len();
        let mut threshold_offsets = Vec::with_capacity(n_items);
        let mut off = n_items;
        for &j in categories {
            threshold_offsets.push(off);
            off += j - 1;
        }
        ParamLayout {
            categories: categories.to_vec(),
            threshold_offsets,
            n_items,
            n_thresholds: off - n_items,
            n_persons,
        }
    }

    pub fn mu_tau(&self) -> usize {
        self.n_items + self.n_thresholds
    }

    pub fn log_sigma_tau(&self) -> usize {
        self.mu_tau() + 1
    }

    pub fn log_sigma_theta(&self) -> usize {
        self.mu_tau() + 2
    }

    pub fn z(&self, p: usize) -> usize {
        self.mu_tau() + 3 + p
    }

    pub fn dim(&self) -> usize {
        self.mu_tau() + 3 + self.n_persons
    }

    pub fn thresholds<'a>(&self, x: &'a [f64], i: usize) -> &'a [f64] {
        let o = self.threshold_offsets[i];
        &x[o..o + self.categories[i] - 1]
    }
}

/// Observed cells grouped by person.
#[derive(Debug, Clone)]
struct Cells {
    offsets: Vec<usize>,
    item: Vec<u32>,
    category: Vec<u8>,
}

impl Cells {
    fn new(responses: &ResponseMatrix) -> Self {
        let mut offsets = Vec::with_capacity(responses.persons() + 1);
        let mut item = Vec::with_capacity(responses.observed());
        let mut category = Vec::with_capacity(responses.observed());
        offsets.push(0);
        for row in responses.rows() {
            for (i, x) in row.iter().enumerate() {
                if let Some(x) = x {
                    item.push(i as u32);
                    category.push(*x);
                }
            }
            offsets.push(item.len());
        }
        Cells {
            offsets,
            item,
            category,
        }
    }
}

/// The hierarchical GRM posterior for one response matrix.
#[derive(Debug, Clone)]
pub struct BayesModel {
    pub layout: ParamLayout,
    /// Whether thresholds carry the half-normal positivity truncation.
    pub positive_thresholds: bool,
    cells: Cells,
}

/// Constrained values of one draw.
#[derive(Debug, Clone)]
pub struct Constrained {
    pub lambda: Vec<f64>,
    /// Thresholds of all items, concatenated.
    pub tau: Vec<f64>,
    pub mu_tau: f64,
    pub sigma_tau: f64,
    pub sigma_theta: f64,
    pub theta: Vec<f64>,
}

impl BayesModel {
    pub fn new(responses: &ResponseMatrix, positive_thresholds: bool) -> Self {
        BayesModel {
            layout: ParamLayout::new(responses.categories(), responses.persons()),
            positive_thresholds,
            cells: Cells::new(responses),
        }
    }

    /// Maps an unconstrained vector to model parameters.
    pub fn constrain(&self, y: &[f64]) -> Constrained {
        self.constrain_raw(&self.to_raw(y))
    }

    /// Inverse of [`BayesModel::constrain`]; `z` is taken as `θ / σ`.
    pub fn unconstrain(&self, c: &Constrained) -> Vec<f64> {
        self.from_raw(&self.unconstrain_raw(c))
    }

    /// Indices of the coordinates that are logarithms of scaled item
    /// quantities (`ln τ_i1` when positive, and every log-gap).
    fn log_threshold_coords(&self) -> impl Iterator<Item = usize> + '_ {
        let l = &self.layout;
        (0..l.n_items).flat_map(move |i| {
            let o = l.threshold_offsets[i];
            let first = if self.positive_thresholds { o } else { o + 1 };
            first..o + l.categories[i] - 1
        })
    }

    fn linear_threshold_coords(&self) -> impl Iterator<Item = usize> + '_ {
        let l = &self.layout;
        (0..l.n_items).filter(|_| !self.positive_thresholds).map(|i| l.threshold_offsets[i])
    }

    /// Scaled coordinates to the plain log/increment coordinates.
    fn to_raw(&self, y: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        let s = y[l.log_sigma_theta()];
        let scale = s.exp();
        let mut x = y.to_vec();
        x[..l.n_items].iter_mut().for_each(|v| *v -= s);
        self.log_threshold_coords().for_each(|k| x[k] += s);
        self.linear_threshold_coords().for_each(|k| x[k] *= scale);
        x[l.mu_tau()] *= scale;
        x[l.log_sigma_tau()] += s;
        x
    }

    fn from_raw(&self, x: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        let s = x[l.log_sigma_theta()];
        let scale = s.exp();
        let mut y = x.to_vec();
        y[..l.n_items].iter_mut().for_each(|v| *v += s);
        self.log_threshold_coords().for_each(|k| y[k] -= s);
        self.linear_threshold_coords().for_each(|k| y[k] /= scale);
        y[l.mu_tau()] /= scale;
        y[l.log_sigma_tau()] -= s;
        y
    }

    fn constrain_raw(&self, x: &[f64]) -> Constrained {
        let l = &self.layout;
        let lambda = x[..l.n_items].iter().map(|v| v.exp()).collect();
        let mut tau = Vec::with_capacity(l.n_thresholds);
        for i in 0..l.n_items {
            let raw = l.thresholds(x, i);
            let mut acc = if self.positive_thresholds { raw[0].exp() } else { raw[0] };
            tau.push(acc);
            for g in &raw[1..] {
                acc += g.exp();
                tau.push(acc);
            }
        }
        let sigma_theta = x[l.log_sigma_theta()].exp();
        Constrained {
            lambda,
            tau,
            mu_tau: x[l.mu_tau()],
            sigma_tau: x[l.log_sigma_tau()].exp(),
            sigma_theta,
            theta: (0..l.n_persons).map(|p| sigma_theta * x[l.z(p)]).collect(),
        }
    }

    fn unconstrain_raw(&self, c: &Constrained) -> Vec<f64> {
        let l = &self.layout;
        let mut x = vec![0.0; l.dim()];
        let mut k = 0;
        for i in 0..l.n_items {
            x[i] = c.lambda[i].ln();
            let o = l.threshold_offsets[i];
            let t = &c.tau[k..k + l.categories[i] - 1];
            x[o] = if self.positive_thresholds { t[0].ln() } else { t[0] };
            for j in 1..t.len() {
                x[o + j] = (t[j] - t[j - 1]).ln();
            }
            k += t.len();
        }
        x[l.mu_tau()] = c.mu_tau;
        x[l.log_sigma_tau()] = c.sigma_tau.ln();
        x[l.log_sigma_theta()] = c.sigma_theta.ln();
        for p in 0..l.n_persons {
            x[l.z(p)] = c.theta[p] / c.sigma_theta;
        }
        x
    }
}

/// `ln(1 + (v/s)²)` and its derivative with respect to `ln v`.
#[inline]
fn half_cauchy_log_terms(v: f64, scale: f64) -> (f64, f64) {
    let r = (v / scale).powi(2);
    (-(r.ln_1p()), -2.0 * r / (1.0 + r))
}

impl LogDensity for BayesModel {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn log_density_and_gradient(&self, y: &[f64], grad: &mut [f64]) -> f64 {
        let l = &self.layout;
        let x = self.to_raw(y);
        let lp = self.raw_log_density(&x, grad);
        // chain rule through the scaling by σ = exp(s)
        let si = l.log_sigma_theta();
        let scale = y[si].exp();
        let mut ds = 0.0;
        for k in 0..l.n_items {
            ds -= grad[k];
        }
        for k in self.log_threshold_coords() {
            ds += grad[k];
        }
        // linear coordinates are multiplied by σ, each adding s to the log-Jacobian
        let mut log_jacobian = 0.0;
        let linear = self.linear_threshold_coords().chain([l.mu_tau()]);
        for k in linear {
            ds += grad[k] * x[k] + 1.0;
            grad[k] *= scale;
            log_jacobian += y[si];
        }
        ds += grad[l.log_sigma_tau()];
        grad[si] += ds;
        lp + log_jacobian
    }
}

impl BayesModel {
    fn raw_log_density(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let l = &self.layout;
        debug_assert_eq!(x.len(), l.dim());
        grad.iter_mut().for_each(|g| *g = 0.0);
        let c = self.constrain_raw(x);

        // Per-item caches: threshold slices into `c.tau`, and the gap factor
        // 1 − exp(−λ(τ_{j+1} − τ_j)) for each middle category.
        let mut tau_start = Vec::with_capacity(l.n_items);
        let mut gaps: Vec<Vec<f64>> = Vec::with_capacity(l.n_items);
        let mut k = 0;
        for i in 0..l.n_items {
            tau_start.push(k);
            let t = &c.tau[k..k + l.categories[i] - 1];
            let lam = c.lambda[i];
            let mut g = vec![1.0; l.categories[i]];
            for j in 1..t.len() {
                g[j] = -(-lam * (t[j] - t[j - 1])).exp_m1();
            }
            gaps.push(g);
            k += t.len();
        }

        let mut lp = 0.0;
        let mut d_lambda = vec![0.0; l.n_items];
        let mut d_tau = vec![0.0; l.n_thresholds];
        let mut d_log_sigma = 0.0;

        // likelihood
        for p in 0..l.n_persons {
            let theta = c.theta[p];
            let mut d_theta = 0.0;
            for cell in self.cells.offsets[p]..self.cells.offsets[p + 1] {
                let i = self.cells.item[cell] as usize;
                let x_pi = self.cells.category[cell] as usize;
                let lam = c.lambda[i];
                let ncat = l.categories[i];
                let t0 = tau_start[i];
                let lo = (x_pi > 0).then(|| c.tau[t0 + x_pi - 1]);
                let hi = (x_pi + 1 < ncat).then(|| c.tau[t0 + x_pi]);
                let terms = cell_terms(
                    lo.map(|t| lam * (theta - t)),
                    hi.map(|t| lam * (theta - t)),
                    gaps[i][x_pi],
                );
                lp += terms.log_p;
                d_theta += lam * (terms.d_u + terms.d_v);
                if let Some(t) = lo {
                    d_lambda[i] += (theta - t) * terms.d_u;
                    d_tau[t0 + x_pi - 1] -= lam * terms.d_u;
                }
                if let Some(t) = hi {
                    d_lambda[i] += (theta - t) * terms.d_v;
                    d_tau[t0 + x_pi] -= lam * terms.d_v;
                }
            }
            grad[l.z(p)] = d_theta * c.sigma_theta;
            d_log_sigma += d_theta * theta;
        }

        // θ_p = σ z_p with z_p ~ N(0, 1)
        for p in 0..l.n_persons {
            let z = x[l.z(p)];
            lp -= 0.5 * z * z;
            grad[l.z(p)] -= z;
        }

        // λ ~ half-Cauchy(0, 5) on ln λ, with Jacobian
        for i in 0..l.n_items {
            let (v, dv) = half_cauchy_log_terms(c.lambda[i], LAMBDA_SCALE);
            lp += v + x[i];
            grad[i] = d_lambda[i] * c.lambda[i] + dv + 1.0;
        }

        // τ ~ normal(μ_τ, σ_τ), optionally truncated at zero
        let (mu, s_tau) = (c.mu_tau, c.sigma_tau);
        let mut d_mu = 0.0;
        let mut d_s_tau = 0.0;
        for (t, dt) in c.tau.iter().zip(d_tau.iter_mut()) {
            let r = (t - mu) / s_tau;
            lp += -0.5 * r * r - s_tau.ln();
            *dt -= r / s_tau;
            d_mu += r / s_tau;
            d_s_tau += (r * r - 1.0) / s_tau;
        }
        if self.positive_thresholds {
            let n = l.n_thresholds as f64;
            let ratio = mu / s_tau;
            lp -= n * log_normal_cdf(ratio);
            let m = inverse_mills(ratio);
            d_mu -= n * m / s_tau;
            d_s_tau += n * m * mu / (s_tau * s_tau);
        }

        // threshold transforms: τ_k = base(η_1) + Σ_{m=2..k} exp(η_m)
        let mut k = 0;
        for i in 0..l.n_items {
            let o = l.threshold_offsets[i];
            let n = l.categories[i] - 1;
            let mut suffix = 0.0;
            for j in (0..n).rev() {
                suffix += d_tau[k + j];
                if j == 0 {
                    if self.positive_thresholds {
                        grad[o] = suffix * c.tau[k] + 1.0;
                        lp += x[o];
                    } else {
                        grad[o] = suffix;
                    }
                } else {
                    grad[o + j] = suffix * x[o + j].exp() + 1.0;
                    lp += x[o + j];
                }
            }
            k += n;
        }

        // μ_τ ~ normal(0, 5)
        lp -= 0.5 * (mu / MU_TAU_SD).powi(2);
        grad[l.mu_tau()] = d_mu - mu / (MU_TAU_SD * MU_TAU_SD);

        // σ_τ ~ half-Cauchy(0, 1)
        let (v, dv) = half_cauchy_log_terms(s_tau, SIGMA_TAU_SCALE);
        lp += v + x[l.log_sigma_tau()];
        grad[l.log_sigma_tau()] = d_s_tau * s_tau + dv + 1.0;

        // σ ~ half-Cauchy(0, 1)
        let (v, dv) = half_cauchy_log_terms(c.sigma_theta, SIGMA_THETA_SCALE);
        lp += v + x[l.log_sigma_theta()];
        grad[l.log_sigma_theta()] = d_log_sigma + dv + 1.0;

        lp
    }
}
