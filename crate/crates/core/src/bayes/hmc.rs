//! Static-trajectory Hamiltonian Monte Carlo with jittered path lengths,
//! dual-averaging step size adaptation and a windowed diagonal metric.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::density::LogDensity;

/// Energy error beyond which a trajectory counts as divergent.
const MAX_ENERGY_ERROR: f64 = 1000.0;
const MAX_LEAPFROG: usize = 1024;
const INIT_RADIUS: f64 = 2.0;
const INIT_ATTEMPTS: usize = 100;
const ASCENT_ITERATIONS: usize = 500;

#[derive(Debug, Clone, Copy)]
pub struct HmcSettings {
    pub warmup: usize,
    pub samples: usize,
    pub target_acceptance: f64,
    /// Upper end of the jittered integration time `ε · steps`.
    pub integration_time: f64,
}

/// Per-chain sampler statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub step_size: f64,
    pub mean_acceptance: f64,
    pub divergences: usize,
    pub gradient_evaluations: u64,
}

pub struct ChainOutput {
    /// Retained unconstrained draws, row-major `samples × dim`.
    pub draws: Vec<f64>,
    pub stats: ChainStats,
}

struct State {
    x: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

struct Sampler<'a, D: LogDensity> {
    density: &'a D,
    inv_metric: Vec<f64>,
    step_size: f64,
    integration_time: f64,
    gradient_evaluations: u64,
    // scratch
    p: Vec<f64>,
}

impl<D: LogDensity> Sampler<'_, D> {
    fn evaluate(&mut self, x: Vec<f64>) -> State {
        let mut grad = vec![0.0; x.len()];
        let logp = self.density.log_density_and_gradient(&x, &mut grad);
        self.gradient_evaluations += 1;
        State { x, grad, logp }
    }

    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_metric).map(|(p, m)| p * p * m).sum::<f64>()
    }

    fn draw_momentum(&mut self, rng: &mut ChaCha8Rng) {
        for (p, m) in self.p.iter_mut().zip(&self.inv_metric) {
            let z: f64 = StandardNormal.sample(rng);
            *p = z / m.sqrt();
        }
    }

    /// Runs `steps` leapfrog steps from `state` with momentum `self.p`.
    /// Returns the end state (or `None` on a non-finite density) and the
    /// Metropolis acceptance probability.
    fn trajectory(&mut self, state: &State, steps: usize) -> (Option<State>, f64) {
        let eps = self.step_size;
        let h0 = -state.logp + self.kinetic(&self.p);
        let mut x = state.x.clone();
        let mut grad = state.grad.clone();
        let mut p = std::mem::take(&mut self.p);
        let mut logp = state.logp;
        for _ in 0..steps {
            for k in 0..x.len() {
                p[k] += 0.5 * eps * grad[k];
                x[k] += eps * self.inv_metric[k] * p[k];
            }
            logp = self.density.log_density_and_gradient(&x, &mut grad);
            self.gradient_evaluations += 1;
            if !logp.is_finite() {
                break;
            }
            for k in 0..x.len() {
                p[k] += 0.5 * eps * grad[k];
            }
        }
        let h1 = if logp.is_finite() {
            -logp + self.kinetic(&p)
        } else {
            f64::INFINITY
        };
        self.p = p;
        let delta = h0 - h1;
        if !delta.is_finite() || -delta > MAX_ENERGY_ERROR {
            return (None, 0.0);
        }
        (Some(State { x, grad, logp }), delta.exp().min(1.0))
    }

    fn max_steps(&self) -> usize {
        ((self.integration_time / self.step_size).ceil() as usize).clamp(1, MAX_LEAPFROG)
    }

    /// One HMC transition; returns the acceptance probability and a divergence flag.
    fn transition(&mut self, state: &mut State, rng: &mut ChaCha8Rng) -> (f64, bool) {
        self.draw_momentum(rng);
        let steps = rng.random_range(1..=self.max_steps());
        let (proposal, accept) = self.trajectory(state, steps);
        let u: f64 = rng.random();
        match proposal {
            Some(next) => {
                if u < accept {
                    *state = next;
                }
                (accept, false)
            }
            None => (0.0, true),
        }
    }

    /// Doubles or halves the step size until a single leapfrog step crosses
    /// acceptance 0.8.
    fn find_reasonable_step_size(&mut self, state: &State, rng: &mut ChaCha8Rng) {
        self.draw_momentum(rng);
        let p0 = self.p.clone();
        let (_, a) = self.trajectory(state, 1);
        let direction = if a > 0.8 { 1.0 } else { -1.0 };
        for _ in 0..100 {
            self.p.copy_from_slice(&p0);
            let (_, a) = self.trajectory(state, 1);
            let crossed = if direction > 0.0 { a <= 0.8 } else { a > 0.8 };
            if crossed {
                break;
            }
            self.step_size *= 2f64.powf(direction);
            if !(1e-10..=1e5).contains(&self.step_size) {
                self.step_size = self.step_size.clamp(1e-10, 1e5);
                break;
            }
        }
    }
}

struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_eps_bar: f64,
    m: f64,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(step_size: f64, target: f64) -> Self {
        DualAveraging {
            mu: (10.0 * step_size).ln(),
            h_bar: 0.0,
            log_eps_bar: 0.0,
            m: 0.0,
            target,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.m += 1.0;
        let w = 1.0 / (self.m + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept);
        let log_eps = self.mu - self.m.sqrt() / Self::GAMMA * self.h_bar;
        let eta = self.m.powf(-Self::KAPPA);
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar;
        log_eps.exp()
    }

    fn final_step_size(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Warmup schedule: an initial fast phase, doubling slow windows where the
/// metric is estimated, and a terminal fast phase.
fn metric_windows(warmup: usize) -> Vec<(usize, usize)> {
    let (mut init, mut term, mut base) = (75, 50, 25);
    if warmup < 20 {
        return Vec::new();
    }
    if init + term + base > warmup {
        init = warmup * 15 / 100;
        term = warmup / 10;
        base = warmup - init - term;
    }
    let end = warmup - term;
    let mut windows = Vec::new();
    let mut start = init;
    let mut size = base;
    while start < end {
        let mut stop = start + size;
        // absorb a last window that would be shorter than twice the next one
        if stop + 2 * size > end {
            stop = end;
        }
        windows.push((start, stop));
        start = stop;
        size *= 2;
    }
    windows
}

struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for k in 0..x.len() {
            let d = x[k] - self.mean[k];
            self.mean[k] += d / self.n;
            self.m2[k] += d * (x[k] - self.mean[k]);
        }
    }

    /// Sample variances shrunk toward `1e-3` as in Stan's diagonal adaptation.
    fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|m2| {
                let var = m2 / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// Draws a finite starting point uniformly from `[-2, 2]^dim`.
pub fn random_initialization<D: LogDensity>(density: &D, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    let dim = density.dim();
    let mut grad = vec![0.0; dim];
    for _ in 0..INIT_ATTEMPTS {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-INIT_RADIUS..INIT_RADIUS)).collect();
        let lp = density.log_density_and_gradient(&x, &mut grad);
        if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            return Some(x);
        }
    }
    None
}

/// Monotone gradient ascent with an adaptive step, used to move a random
/// starting point toward the bulk before adaptation begins. Returns the end
/// point and the number of density evaluations.
pub fn ascend<D: LogDensity>(density: &D, mut x: Vec<f64>, iterations: usize) -> (Vec<f64>, u64) {
    let dim = x.len();
    let mut grad = vec![0.0; dim];
    let mut logp = density.log_density_and_gradient(&x, &mut grad);
    let mut next_grad = vec![0.0; dim];
    let mut alpha = 0.1;
    let mut stalled = 0;
    let mut evaluations = 1;
    for _ in 0..iterations {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            break;
        }
        let step = alpha / norm.max(1.0);
        let y: Vec<f64> = x.iter().zip(&grad).map(|(x, g)| x + step * g).collect();
        let lp = density.log_density_and_gradient(&y, &mut next_grad);
        evaluations += 1;
        if lp.is_finite() && lp > logp && next_grad.iter().all(|g| g.is_finite()) {
            stalled = if lp - logp < 1e-6 * logp.abs().max(1.0) { stalled + 1 } else { 0 };
            x = y;
            logp = lp;
            std::mem::swap(&mut grad, &mut next_grad);
            alpha *= 1.2;
            if stalled >= 10 {
                break;
            }
        } else {
            alpha *= 0.5;
            if alpha < 1e-12 {
                break;
            }
        }
    }
    (x, evaluations)
}

/// Runs one chain: adaptation over `settings.warmup` iterations, then
/// `settings.samples` retained transitions at fixed step size and metric.
pub fn run_chain<D: LogDensity>(
    density: &D,
    init: Vec<f64>,
    settings: &HmcSettings,
    rng: &mut ChaCha8Rng,
) -> ChainOutput {
    let dim = density.dim();
    let mut sampler = Sampler {
        density,
        inv_metric: vec![1.0; dim],
        step_size: 1.0,
        integration_time: settings.integration_time,
        gradient_evaluations: 0,
        p: vec![0.0; dim],
    };
    if dim == 0 {
        return ChainOutput {
            draws: Vec::new(),
            stats: ChainStats {
                step_size: 0.0,
                mean_acceptance: 1.0,
                divergences: 0,
                gradient_evaluations: sampler.gradient_evaluations,
            },
        };
    }

    let (start, evaluations) = ascend(density, init, ASCENT_ITERATIONS);
    sampler.gradient_evaluations += evaluations;
    let mut state = sampler.evaluate(start);
    sampler.find_reasonable_step_size(&state, rng);
    let mut da = DualAveraging::new(sampler.step_size, settings.target_acceptance);
    let windows = metric_windows(settings.warmup);
    let mut window = 0;
    let mut estimator = Welford::new(dim);
    for it in 0..settings.warmup {
        let (accept, _) = sampler.transition(&mut state, rng);
        sampler.step_size = da.update(accept);
        if let Some(&(start, stop)) = windows.get(window) {
            if it >= start && it < stop {
                estimator.push(&state.x);
            }
            if it + 1 == stop {
                log::debug!(
                    "warmup window ending at {stop}: step size {:.4}, {} gradient evaluations",
                    sampler.step_size,
                    sampler.gradient_evaluations
                );
                sampler.inv_metric = estimator.regularized_variance();
                estimator = Welford::new(dim);
                window += 1;
                sampler.find_reasonable_step_size(&state, rng);
                da = DualAveraging::new(sampler.step_size, settings.target_acceptance);
            }
        }
    }
    if settings.warmup > 0 {
        sampler.step_size = da.final_step_size();
        log::debug!(
            "warmup done: step size {:.4}, {} gradient evaluations",
            sampler.step_size,
            sampler.gradient_evaluations
        );
    }

    let mut draws = Vec::with_capacity(settings.samples * dim);
    let mut accept_sum = 0.0;
    let mut divergences = 0;
    for _ in 0..settings.samples {
        let (accept, divergent) = sampler.transition(&mut state, rng);
        accept_sum += accept;
        divergences += divergent as usize;
        draws.extend_from_slice(&state.x);
    }
    ChainOutput {
        draws,
        stats: ChainStats {
            step_size: sampler.step_size,
            mean_acceptance: accept_sum / settings.samples.max(1) as f64,
            divergences,
            gradient_evaluations: sampler.gradient_evaluations,
        },
    }
}
