//! Monte Carlo simulation of the killed diffusion, under the prior or the
//! posterior law.
//!
//! Each particle takes Euler-Maruyama steps `x += drift h + sigma sqrt(h) xi`
//! with fold-back reflection at the ends of the box. Before each step it is
//! killed with probability `1 - exp(-rate h)`, the rate evaluated at the step
//! midpoint in time. A killed particle keeps its position; its kill time is
//! drawn from the exponential law conditioned on the step.
//!
//! Particle `i` draws from its own ChaCha stream `(seed, i)`, so results do not
//! depend on the execution mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{ScalarField, SpaceTimeField, SpaceTimeGrid};
use crate::posterior::PosteriorSolution;
use crate::prior::PriorSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dynamics {
    Prior,
    /// Drift `b + sigma u`, killing rate `alpha V`.
    Posterior,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_particles: usize,
    pub seed: u64,
    pub dynamics: Dynamics,
    /// Euler-Maruyama steps per grid interval.
    pub substeps: usize,
    pub execution: Execution,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_particles: 100_000,
            seed: 0,
            dynamics: Dynamics::Posterior,
            substeps: 1,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    /// `None` if the particle survived to `t = 1`.
    pub t_kill: Option<f64>,
    /// Kill position, or terminal position of a survivor.
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KillEventLog {
    pub outcomes: Vec<Outcome>,
}

impl KillEventLog {
    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn killed(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.outcomes.iter().filter_map(|o| o.t_kill.map(|t| (t, o.x)))
    }

    pub fn survivors(&self) -> impl Iterator<Item = f64> + '_ {
        self.outcomes.iter().filter(|o| o.t_kill.is_none()).map(|o| o.x)
    }

    pub fn killed_count(&self) -> usize {
        self.killed().count()
    }

    pub fn survived_count(&self) -> usize {
        self.len() - self.killed_count()
    }

    pub fn killed_fraction(&self) -> f64 {
        self.killed_count() as f64 / self.len() as f64
    }

    pub fn first_kill_time(&self) -> Option<f64> {
        self.killed().map(|(t, _)| t).reduce(f64::min)
    }
}

/// Inverse-CDF sampler for a piecewise-linear density on the grid nodes.
#[derive(Debug, Clone)]
struct LinearSampler {
    nodes: Vec<f64>,
    values: Vec<f64>,
    cdf: Vec<f64>,
}

impl LinearSampler {
    fn new(g: &SpaceTimeGrid, density: &[f64]) -> Result<Self> {
        if density.len() != g.nx() {
            return Err(Error::shape(g.nx(), density.len()));
        }
        if density.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Input("initial density must be finite and nonnegative".into()));
        }
        let mut cdf = Vec::with_capacity(g.nx());
        let mut acc = 0.0;
        cdf.push(0.0);
        for i in 0..g.nx() - 1 {
            acc += 0.5 * (density[i] + density[i + 1]);
            cdf.push(acc);
        }
        if !(acc > 0.0) {
            return Err(Error::Input("initial density has zero mass".into()));
        }
        cdf.iter_mut().for_each(|c| *c /= acc);
        Ok(Self {
            nodes: g.xs(),
            values: density.to_vec(),
            cdf,
        })
    }

    fn sample(&self, u: f64) -> f64 {
        let cell = (self.cdf.partition_point(|&c| c <= u) - 1).min(self.nodes.len() - 2);
        let span = self.cdf[cell + 1] - self.cdf[cell];
        let v = if span > 0.0 { ((u - self.cdf[cell]) / span).clamp(0.0, 1.0) } else { 0.5 };
        let (f0, f1) = (self.values[cell], self.values[cell + 1]);
        let denom = f0 + (f0 * f0 + (f1 * f1 - f0 * f0) * v).max(0.0).sqrt();
        let s = if denom > 0.0 { v * (f0 + f1) / denom } else { v };
        let (a, b) = (self.nodes[cell], self.nodes[cell + 1]);
        a + s.clamp(0.0, 1.0) * (b - a)
    }
}

fn reflect(mut x: f64, lo: f64, hi: f64) -> f64 {
    while x < lo || x > hi {
        x = if x < lo { 2.0 * lo - x } else { 2.0 * hi - x };
    }
    x
}

/// The two posterior fields the simulation reads.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorFields<'a> {
    pub drift_correction: &'a SpaceTimeField,
    pub alpha: &'a SpaceTimeField,
}

impl<'a> From<&'a PosteriorSolution> for PosteriorFields<'a> {
    fn from(s: &'a PosteriorSolution) -> Self {
        Self {
            drift_correction: &s.drift_correction,
            alpha: &s.alpha,
        }
    }
}

/// Simulate `cfg.n_particles` paths started from the density `init`.
pub fn simulate(
    prior: &PriorSpec,
    sol: Option<&PosteriorSolution>,
    g: &SpaceTimeGrid,
    init: &ScalarField,
    cfg: &SimConfig,
) -> Result<KillEventLog> {
    simulate_fields(prior, sol.map(PosteriorFields::from), g, init, cfg)
}

/// [`simulate`] with the posterior given by its fields alone.
pub fn simulate_fields(
    prior: &PriorSpec,
    fields: Option<PosteriorFields<'_>>,
    g: &SpaceTimeGrid,
    init: &ScalarField,
    cfg: &SimConfig,
) -> Result<KillEventLog> {
    if cfg.n_particles == 0 || cfg.substeps == 0 {
        return Err(Error::Input("n_particles and substeps must be >= 1".into()));
    }
    let post = match (cfg.dynamics, fields) {
        (Dynamics::Prior, _) => None,
        (Dynamics::Posterior, Some(s)) => {
            s.drift_correction.check(g)?;
            s.alpha.check(g)?;
            Some(s)
        }
        (Dynamics::Posterior, None) => {
            return Err(Error::Input("posterior dynamics need a posterior solution".into()));
        }
    };
    let sampler = LinearSampler::new(g, init)?;
    let h = g.dt() / cfg.substeps as f64;
    let sqrt_h = h.sqrt();
    let (lo, hi) = (g.x_min(), g.x_max());
    let zero = SpaceTimeField::zeros(0, 0);
    let (dc, alpha) = match post {
        Some(s) => (s.drift_correction, s.alpha),
        None => (&zero, &zero),
    };
    let one = |i: usize| -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let mut x = sampler.sample(rng.gen::<f64>());
        for k in 0..g.nt() - 1 {
            for j in 0..cfg.substeps {
                let t = g.t(k) + j as f64 * h;
                let tm = t + 0.5 * h;
                let mut rate = prior.killing(tm, x);
                if post.is_some() {
                    rate *= alpha.interpolate(g, tm, x);
                }
                let u: f64 = rng.gen();
                if rate > 0.0 {
                    let p_kill = -(-rate * h).exp_m1();
                    if u < p_kill {
                        // offset within the step, exponential law conditioned on [0, h)
                        let v: f64 = rng.gen();
                        let s = (-(-(v * p_kill)).ln_1p() / rate).min(h);
                        return Outcome { t_kill: Some(t + s), x };
                    }
                }
                let mut drift = prior.drift(t, x);
                if post.is_some() {
                    drift += dc.interpolate(g, t, x);
                }
                let xi: f64 = rng.sample(StandardNormal);
                x = reflect(x + drift * h + prior.sigma(t, x) * sqrt_h * xi, lo, hi);
            }
        }
        Outcome { t_kill: None, x }
    };
    Ok(KillEventLog {
        outcomes: cfg.execution.map_range(cfg.n_particles, one),
    })
}

/// Nearest-node histograms scaled by the trapezoid weights, so that the killed
/// histogram integrates to the killed fraction and the survivor histogram to
/// the surviving fraction.
pub fn empirical_profiles(log: &KillEventLog, g: &SpaceTimeGrid) -> Result<(SpaceTimeField, ScalarField)> {
    if log.is_empty() {
        return Err(Error::Input("empty kill log".into()));
    }
    let n = log.len() as f64;
    let ws = g.space_weights();
    let wt = g.time_weights();
    let nearest = |(cell, frac): (usize, f64), len: usize| if frac >= 0.5 { (cell + 1).min(len - 1) } else { cell };
    let mut killed = g.zeros();
    let mut survivors = g.zeros_scalar();
    for o in &log.outcomes {
        let i = nearest(g.locate_x(o.x), g.nx());
        match o.t_kill {
            Some(t) => {
                let k = nearest(g.locate_t(t), g.nt());
                killed.set(k, i, killed.get(k, i) + 1.0 / (n * wt[k] * ws[i]));
            }
            None => survivors[i] += 1.0 / (n * ws[i]),
        }
    }
    Ok((killed, survivors))
}
