//! Split-chain R-hat and effective sample size.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDiagnostics {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub rhat: f64,
    pub ess: f64,
}

impl ParamDiagnostics {
    /// Monte Carlo standard error of the posterior mean.
    pub fn mcse(&self) -> f64 {
        self.sd / self.ess.max(1.0).sqrt()
    }
}

fn split(chains: &[&[f64]]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn variance(x: &[f64], m: f64) -> f64 {
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn constant(parts: &[Vec<f64>]) -> bool {
    let first = parts[0][0];
    parts.iter().flatten().all(|&v| v == first)
}

/// Between/within variance pieces of split chains: `(W, var⁺)`.
fn variance_components(parts: &[Vec<f64>]) -> (f64, f64) {
    let m = parts.len() as f64;
    let n = parts[0].len() as f64;
    let means: Vec<f64> = parts.iter().map(|c| mean(c)).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = parts.iter().zip(&means).map(|(c, &mu)| variance(c, mu)).sum::<f64>() / m;
    (w, (n - 1.0) / n * w + b / n)
}

/// Potential scale reduction factor on split chains.
pub fn split_rhat(chains: &[&[f64]]) -> f64 {
    let parts = split(chains);
    if parts.len() < 2 || parts[0].len() < 2 {
        return f64::NAN;
    }
    if constant(&parts) {
        return 1.0;
    }
    let (w, var_plus) = variance_components(&parts);
    if w <= 0.0 {
        return if var_plus <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    (var_plus / w).sqrt()
}

/// Multi-chain effective sample size with Geyer's initial monotone sequence.
pub fn effective_sample_size(chains: &[&[f64]]) -> f64 {
    let parts = split(chains);
    if parts.len() < 2 || parts[0].len() < 4 {
        return f64::NAN;
    }
    let m = parts.len();
    let n = parts[0].len();
    let total = (m * n) as f64;
    if constant(&parts) {
        return total;
    }
    let (w, var_plus) = variance_components(&parts);
    if w <= 0.0 {
        return total;
    }
    let means: Vec<f64> = parts.iter().map(|c| mean(c)).collect();
    let rho = |t: usize| -> f64 {
        let acov: f64 = parts
            .iter()
            .zip(&means)
            .map(|(c, &mu)| {
                (0..n - t).map(|s| (c[s] - mu) * (c[s + t] - mu)).sum::<f64>() / n as f64
            })
            .sum::<f64>()
            / m as f64;
        // chain variances use n - 1, the autocovariances n
        let w_biased = w * (n as f64 - 1.0) / n as f64;
        1.0 - (w_biased - acov) / var_plus
    };
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let pair = if t == 0 { 1.0 + rho(1) } else { rho(t) + rho(t + 1) };
        if pair < 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        t += 2;
    }
    let ess = total / tau.max(1.0 / total.log10());
    ess.min(total * total.log10())
}

/// Diagnostics for one scalar parameter observed in several chains.
pub fn diagnose(name: &str, chains: &[&[f64]]) -> ParamDiagnostics {
    let all: Vec<f64> = chains.iter().flat_map(|c| c.iter().copied()).collect();
    let mu = mean(&all);
    ParamDiagnostics {
        name: name.to_string(),
        mean: mu,
        sd: variance(&all, mu).max(0.0).sqrt(),
        rhat: split_rhat(chains),
        ess: effective_sample_size(chains),
    }
}
