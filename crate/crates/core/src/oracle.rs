//! Brute-force verification on finite-state, finite-time chains.
//!
//! A [`DiscreteChain`] moves a particle through `m` states in `K` steps. In
//! step `k` (1-based) a particle sitting at `z` is killed with probability
//! `d_k(z)`, otherwise it moves with the normalized transition row, so
//! `S_k(z, .)` sums to `1 - d_k(z)`. The prior couplings are
//!
//! ```text
//! rho_xy(x, y)     = r0(x) [S_1 ... S_K](x, y)
//! rho_xzt(k, x, z) = r0(x) [S_1 ... S_{k-1}](x, z) d_k(z)
//! ```
//!
//! Couplings are stored flat: `pi_xy[x * m + y]` and
//! `pi_xzt[(k * m + x) * m + z]` with a 0-based step index `k`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Locus, Result};
use crate::grid::SpaceTimeGrid;
use crate::posterior::Couplings;
use crate::prior::{assemble, PriorSpec};
use crate::sinkhorn::{hilbert_metric, scale_drift, ConvergenceTrace, ProblemSpec, Termination, TraceRecord};

const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteChain {
    m: usize,
    /// `steps[k][x * m + y]`.
    steps: Vec<Vec<f64>>,
    kill: Vec<Vec<f64>>,
    r0: Vec<f64>,
}

impl DiscreteChain {
    pub fn new(steps: Vec<Vec<f64>>, kill: Vec<Vec<f64>>, r0: Vec<f64>) -> Result<Self> {
        let m = r0.len();
        if m == 0 || steps.is_empty() {
            return Err(Error::Model("a chain needs at least one state and one step".into()));
        }
        if kill.len() != steps.len() {
            return Err(Error::shape(format!("{} killing vectors", steps.len()), kill.len()));
        }
        for (k, (s, d)) in steps.iter().zip(&kill).enumerate() {
            if s.len() != m * m {
                return Err(Error::shape(m * m, s.len()));
            }
            if d.len() != m {
                return Err(Error::shape(m, d.len()));
            }
            for x in 0..m {
                if !(0.0..=1.0).contains(&d[x]) {
                    return Err(Error::Model(format!("killing probability {} at step {}, state {x}", d[x], k + 1)));
                }
                let row = &s[x * m..(x + 1) * m];
                if row.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::Model(format!("negative transition at step {}, state {x}", k + 1)));
                }
                let total: f64 = row.iter().sum::<f64>() + d[x];
                if (total - 1.0).abs() > ROW_TOL {
                    return Err(Error::Model(format!(
                        "step {}, state {x}: transitions plus killing sum to {total}",
                        k + 1
                    )));
                }
            }
        }
        if r0.iter().any(|v| !(*v >= 0.0)) || (r0.iter().sum::<f64>() - 1.0).abs() > ROW_TOL {
            return Err(Error::Model("r0 must be a probability vector".into()));
        }
        Ok(Self { m, steps, kill, r0 })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.steps.len()
    }

    pub fn r0(&self) -> &[f64] {
        &self.r0
    }

    pub fn step(&self, k: usize) -> &[f64] {
        &self.steps[k]
    }

    pub fn kill(&self, k: usize) -> &[f64] {
        &self.kill[k]
    }

    /// `v S_k` for a row vector `v`.
    fn push(&self, k: usize, v: &[f64]) -> Vec<f64> {
        let m = self.m;
        let s = &self.steps[k];
        let mut out = vec![0.0; m];
        for x in 0..m {
            if v[x] != 0.0 {
                for y in 0..m {
                    out[y] += v[x] * s[x * m + y];
                }
            }
        }
        out
    }

    /// `S_k f` for a column vector `f`.
    fn pull(&self, k: usize, f: &[f64]) -> Vec<f64> {
        let m = self.m;
        let s = &self.steps[k];
        (0..m).map(|x| (0..m).map(|y| s[x * m + y] * f[y]).sum()).collect()
    }

    /// Random instance: transition rows and `r0` uniform on `[0.1, 1)` before
    /// normalization, killing probabilities uniform on `[0.05, 0.35)`.
    pub fn random(m: usize, k: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut steps = Vec::with_capacity(k);
        let mut kill = Vec::with_capacity(k);
        for _ in 0..k {
            let d: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..0.35)).collect();
            let mut s = vec![0.0; m * m];
            for x in 0..m {
                let row: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..1.0)).collect();
                let total: f64 = row.iter().sum();
                for y in 0..m {
                    s[x * m + y] = (1.0 - d[x]) * row[y] / total;
                }
            }
            steps.push(s);
            kill.push(d);
        }
        let r0: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = r0.iter().sum();
        Self::new(steps, kill, r0.iter().map(|v| v / total).collect())
    }
}

/// `(rho_xy, rho_xzt)` of a chain.
pub fn prior_couplings(chain: &DiscreteChain) -> (Vec<f64>, Vec<f64>) {
    let (m, kk) = (chain.m(), chain.k());
    let mut rho_xy = vec![0.0; m * m];
    let mut rho_xzt = vec![0.0; kk * m * m];
    for x in 0..m {
        let mut v = vec![0.0; m];
        v[x] = chain.r0[x];
        for k in 0..kk {
            let d = chain.kill(k);
            for z in 0..m {
                rho_xzt[(k * m + x) * m + z] = v[z] * d[z];
            }
            v = chain.push(k, &v);
        }
        rho_xy[x * m..(x + 1) * m].copy_from_slice(&v);
    }
    (rho_xy, rho_xzt)
}

/// Targets of the discrete problem: initial law and killed mass per `(step, state)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub rho0: Vec<f64>,
    /// `q[k * m + z]`.
    pub q: Vec<f64>,
}

impl Targets {
    /// Marginals of an arbitrary coupling pair.
    pub fn of(pi_xy: &[f64], pi_xzt: &[f64], m: usize) -> Self {
        let kk = pi_xzt.len() / (m * m);
        let mut rho0 = vec![0.0; m];
        let mut q = vec![0.0; kk * m];
        for x in 0..m {
            rho0[x] = pi_xy[x * m..(x + 1) * m].iter().sum();
        }
        for k in 0..kk {
            for x in 0..m {
                for z in 0..m {
                    let v = pi_xzt[(k * m + x) * m + z];
                    rho0[x] += v;
                    q[k * m + z] += v;
                }
            }
        }
        Self { rho0, q }
    }

    /// Feasible targets: marginals of the prior couplings reweighted by
    /// independent random factors in `[0.2, 5)`.
    pub fn random_feasible(chain: &DiscreteChain, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut a, mut b) = prior_couplings(chain);
        for v in a.iter_mut().chain(b.iter_mut()) {
            *v *= rng.gen_range(0.2f64..5.0);
        }
        let total: f64 = a.iter().chain(&b).sum();
        a.iter_mut().chain(b.iter_mut()).for_each(|v| *v /= total);
        Self::of(&a, &b, chain.m())
    }
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub pi_xy: Vec<f64>,
    pub pi_xzt: Vec<f64>,
    /// `D(pi || rho)` summed over both blocks.
    pub objective: f64,
    pub iterations: usize,
    pub residual_rho0: f64,
    pub residual_q: f64,
}

impl OracleResult {
    /// `max |self - other|` over both coupling blocks.
    pub fn gap(&self, other: &OracleResult) -> f64 {
        linf(&self.pi_xy, &other.pi_xy).max(linf(&self.pi_xzt, &other.pi_xzt))
    }
}

pub fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative entropy `sum p log(p / q) - p + q` of nonnegative measures.
/// Equals the usual divergence when both have the same mass.
pub fn relative_entropy(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            if a == 0.0 {
                b
            } else if b == 0.0 {
                f64::INFINITY
            } else {
                a * (a / b).ln() - a + b
            }
        })
        .sum()
}

fn residuals(pi_xy: &[f64], pi_xzt: &[f64], m: usize, t: &Targets) -> (f64, f64) {
    let got = Targets::of(pi_xy, pi_xzt, m);
    (linf(&got.rho0, &t.rho0), linf(&got.q, &t.q))
}

fn check_targets(rho_xzt: &[f64], m: usize, t: &Targets) -> Result<()> {
    let kk = rho_xzt.len() / (m * m);
    if t.rho0.len() != m || t.q.len() != kk * m {
        return Err(Error::shape(format!("rho0 of {m} and q of {}", kk * m), format!("{} and {}", t.rho0.len(), t.q.len())));
    }
    if t.rho0.iter().chain(&t.q).any(|v| !(*v >= 0.0)) {
        return Err(Error::Input("targets must be nonnegative".into()));
    }
    for k in 0..kk {
        for z in 0..m {
            if t.q[k * m + z] > 0.0 && (0..m).all(|x| rho_xzt[(k * m + x) * m + z] == 0.0) {
                return Err(Error::Infeasible {
                    locus: Locus {
                        k: k + 1,
                        i: z,
                        t: (k + 1) as f64,
                        x: z as f64,
                    },
                    reason: format!("target killed mass {} where the prior kills nothing", t.q[k * m + z]),
                });
            }
        }
    }
    Ok(())
}

fn no_convergence(records: Vec<TraceRecord>, r0: f64, rq: f64) -> Error {
    Error::NoConvergence {
        trace: Box::new(ConvergenceTrace {
            records,
            termination: Termination::MaxIterations,
            final_residual_rho0: r0,
            final_residual_q: rq,
        }),
    }
}

/// Iterative proportional fitting on materialized couplings.
#[derive(Debug, Clone)]
pub struct Ipf<'a> {
    m: usize,
    rho_xy: &'a [f64],
    rho_xzt: &'a [f64],
    targets: &'a Targets,
    /// Per-start scaling.
    pub a: Vec<f64>,
    /// Per-(step, kill state) scaling.
    pub b: Vec<f64>,
}

impl<'a> Ipf<'a> {
    pub fn new(rho_xy: &'a [f64], rho_xzt: &'a [f64], targets: &'a Targets) -> Result<Self> {
        let m = targets.rho0.len();
        if rho_xy.len() != m * m || rho_xzt.len() % (m * m) != 0 {
            return Err(Error::shape(format!("{m} x {m} couplings"), rho_xy.len()));
        }
        check_targets(rho_xzt, m, targets)?;
        Ok(Self {
            m,
            rho_xy,
            rho_xzt,
            targets,
            a: vec![1.0; m],
            b: vec![1.0; rho_xzt.len() / m],
        })
    }

    /// Rescale rows to match `rho0`, then kill columns to match `q`.
    pub fn cycle(&mut self) {
        let m = self.m;
        let kk = self.b.len() / m;
        for x in 0..m {
            let mut row: f64 = self.rho_xy[x * m..(x + 1) * m].iter().sum();
            for k in 0..kk {
                for z in 0..m {
                    row += self.rho_xzt[(k * m + x) * m + z] * self.b[k * m + z];
                }
            }
            self.a[x] = if self.targets.rho0[x] > 0.0 { self.targets.rho0[x] / row } else { 0.0 };
        }
        for k in 0..kk {
            for z in 0..m {
                let q = self.targets.q[k * m + z];
                let col: f64 = (0..m).map(|x| self.a[x] * self.rho_xzt[(k * m + x) * m + z]).sum();
                self.b[k * m + z] = if q > 0.0 { q / col } else { 0.0 };
            }
        }
    }

    pub fn couplings(&self) -> (Vec<f64>, Vec<f64>) {
        let m = self.m;
        let pi_xy = self.rho_xy.iter().enumerate().map(|(j, v)| v * self.a[j / m]).collect();
        let pi_xzt = self
            .rho_xzt
            .iter()
            .enumerate()
            .map(|(j, v)| {
                let (k, x, z) = (j / (m * m), (j / m) % m, j % m);
                v * self.a[x] * self.b[k * m + z]
            })
            .collect();
        (pi_xy, pi_xzt)
    }
}

pub fn ipf_solve(
    rho_xy: &[f64],
    rho_xzt: &[f64],
    targets: &Targets,
    tol: f64,
    max_iter: usize,
) -> Result<OracleResult> {
    let mut ipf = Ipf::new(rho_xy, rho_xzt, targets)?;
    let m = targets.rho0.len();
    let mut records = Vec::new();
    for iteration in 1..=max_iter {
        ipf.cycle();
        let (pi_xy, pi_xzt) = ipf.couplings();
        let (r0, rq) = residuals(&pi_xy, &pi_xzt, m, targets);
        records.push(TraceRecord {
            iteration,
            hilbert_distance: r0.max(rq),
            residual_rho0: r0,
            residual_q: rq,
        });
        if r0.max(rq) < tol {
            let objective = relative_entropy(&pi_xy, rho_xy) + relative_entropy(&pi_xzt, rho_xzt);
            return Ok(OracleResult {
                pi_xy,
                pi_xzt,
                objective,
                iterations: iteration,
                residual_rho0: r0,
                residual_q: rq,
            });
        }
    }
    let (pi_xy, pi_xzt) = ipf.couplings();
    let (r0, rq) = residuals(&pi_xy, &pi_xzt, m, targets);
    Err(no_convergence(records, r0, rq))
}

/// Fortet-Sinkhorn on the chain with matrix-vector products, iterated from
/// `phi0 = 1` until the Hilbert distance between successive `phi_0` is below `tol`.
pub fn fs_discrete(chain: &DiscreteChain, targets: &Targets, tol: f64) -> Result<OracleResult> {
    fs_discrete_from(chain, targets, tol, &vec![1.0; chain.m()], 100_000)
}

pub fn fs_discrete_from(
    chain: &DiscreteChain,
    targets: &Targets,
    tol: f64,
    phi0_init: &[f64],
    max_iter: usize,
) -> Result<OracleResult> {
    let (m, kk) = (chain.m(), chain.k());
    if phi0_init.len() != m {
        return Err(Error::shape(m, phi0_init.len()));
    }
    let (rho_xy, rho_xzt) = prior_couplings(chain);
    check_targets(&rho_xzt, m, targets)?;
    let support: Vec<bool> = targets.rho0.iter().map(|v| *v > 0.0).collect();
    let mut phi0 = phi0_init.to_vec();
    let mut records = Vec::new();
    let mut lambda = vec![0.0; kk * m];
    let mut phihat0 = vec![0.0; m];
    let mut converged = false;
    for iteration in 1..=max_iter {
        for x in 0..m {
            phihat0[x] = if support[x] { targets.rho0[x] / phi0[x] } else { 0.0 };
        }
        // forward: killed mass per (step, state) from phihat0
        let mut v = phihat0.clone();
        for k in 0..kk {
            let d = chain.kill(k);
            for z in 0..m {
                let q = targets.q[k * m + z];
                lambda[k * m + z] = if q > 0.0 { q / (v[z] * d[z]) } else { 0.0 };
            }
            v = chain.push(k, &v);
        }
        // backward from phi_K = 1
        let mut phi = vec![1.0; m];
        for k in (0..kk).rev() {
            let d = chain.kill(k);
            let moved = chain.pull(k, &phi);
            phi = (0..m).map(|x| d[x] * lambda[k * m + x] + moved[x]).collect();
        }
        if phi.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Numerical("discrete backward potential left the positive cone".into()));
        }
        let dist = hilbert_metric(&phi, &phi0, Some(&support))?;
        let drift = scale_drift(&phi, &phi0, &support);
        phi0 = phi;
        records.push(TraceRecord {
            iteration,
            hilbert_distance: dist,
            residual_rho0: f64::NAN,
            residual_q: f64::NAN,
        });
        if dist < tol && drift < tol {
            converged = true;
            break;
        }
    }
    for x in 0..m {
        phihat0[x] = if support[x] { targets.rho0[x] / phi0[x] } else { 0.0 };
    }
    let mut pi_xy = vec![0.0; m * m];
    let mut pi_xzt = vec![0.0; kk * m * m];
    for x in 0..m {
        if rho_xy[x * m..(x + 1) * m].iter().all(|&v| v == 0.0) && chain.r0[x] == 0.0 {
            continue;
        }
        // transition probabilities out of x, scaled by phihat0(x)
        let mut v = vec![0.0; m];
        v[x] = phihat0[x];
        for k in 0..kk {
            let d = chain.kill(k);
            for z in 0..m {
                pi_xzt[(k * m + x) * m + z] = v[z] * d[z] * lambda[k * m + z];
            }
            v = chain.push(k, &v);
        }
        pi_xy[x * m..(x + 1) * m].copy_from_slice(&v);
    }
    let (r0, rq) = residuals(&pi_xy, &pi_xzt, m, targets);
    if !converged {
        return Err(no_convergence(records, r0, rq));
    }
    let objective = relative_entropy(&pi_xy, &rho_xy) + relative_entropy(&pi_xzt, &rho_xzt);
    Ok(OracleResult {
        pi_xy,
        pi_xzt,
        objective,
        iterations: records.len(),
        residual_rho0: r0,
        residual_q: rq,
    })
}

/// The chain matched to a grid: one state per node, one step per time
/// interval. The movement is the Crank-Nicolson step of the advection-diffusion
/// part in mass coordinates, `S0(i, j) = w_j M(j, i) / w_i`, and the killing
/// probability is `1 - exp(-V h)` with `V` averaged over the interval ends.
/// `rho0` is a density on the grid.
pub fn chain_from_grid(prior: &PriorSpec, g: &SpaceTimeGrid, rho0: &[f64]) -> Result<DiscreteChain> {
    let n = g.nx();
    if rho0.len() != n {
        return Err(Error::shape(n, rho0.len()));
    }
    let h = g.dt();
    let w = g.space_weights();
    let snaps = (0..g.nt()).map(|k| assemble(prior, g, k)).collect::<Result<Vec<_>>>()?;
    let mut steps = Vec::with_capacity(g.nt() - 1);
    let mut kill = Vec::with_capacity(g.nt() - 1);
    for k in 0..g.nt() - 1 {
        let l = snaps[k].transport().midpoint(&snaps[k + 1].transport());
        let lhs = l.shifted(1.0, -0.5 * h).factor()?;
        let rhs = l.shifted(1.0, 0.5 * h);
        let d: Vec<f64> = (0..n)
            .map(|i| 1.0 - (-0.5 * (snaps[k].killing[i] + snaps[k + 1].killing[i]) * h).exp())
            .collect();
        let mut s = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for i in 0..n {
            e.fill(0.0);
            e[i] = 1.0;
            rhs.apply(&e, &mut col);
            lhs.solve_in_place(&mut col);
            let total: f64 = (0..n).map(|j| w[j] * col[j]).sum::<f64>() / w[i];
            for j in 0..n {
                // renormalize away rounding so rows meet the chain invariant
                s[i * n + j] = (1.0 - d[i]) * w[j] * col[j] / w[i] / total;
            }
        }
        steps.push(s);
        kill.push(d);
    }
    let r0: Vec<f64> = rho0.iter().zip(&w).map(|(r, w)| r * w).collect();
    let total: f64 = r0.iter().sum();
    DiscreteChain::new(steps, kill, r0.iter().map(|v| v / total).collect())
}

/// Targets of the matched chain: `w rho0` and `w_z h/2 (Q_k + Q_{k+1})`.
pub fn grid_targets(problem: &ProblemSpec) -> Targets {
    let g = problem.grid();
    let w = g.space_weights();
    let (m, h) = (g.nx(), g.dt());
    let rho0 = problem.rho0().iter().zip(&w).map(|(r, w)| r * w).collect();
    let mut q = vec![0.0; (g.nt() - 1) * m];
    for k in 0..g.nt() - 1 {
        for z in 0..m {
            q[k * m + z] = w[z] * 0.5 * h * (problem.q().get(k, z) + problem.q().get(k + 1, z));
        }
    }
    Targets { rho0, q }
}

/// Continuous couplings as probabilities of the matched chain, with the
/// same quadrature as [`grid_targets`].
pub fn grid_couplings(c: &Couplings, g: &SpaceTimeGrid) -> (Vec<f64>, Vec<f64>) {
    let w = g.space_weights();
    let (m, h) = (g.nx(), g.dt());
    let mut pi_xy = vec![0.0; m * m];
    let mut pi_xzt = vec![0.0; (g.nt() - 1) * m * m];
    for x in 0..m {
        for y in 0..m {
            pi_xy[x * m + y] = w[x] * w[y] * c.xy(x, y);
        }
        for k in 0..g.nt() - 1 {
            for z in 0..m {
                pi_xzt[(k * m + x) * m + z] = w[x] * w[z] * 0.5 * h * (c.xzt(k, x, z) + c.xzt(k + 1, x, z));
            }
        }
    }
    (pi_xy, pi_xzt)
}

/// Chain and targets matched to a continuous problem.
pub fn matched_instance(problem: &ProblemSpec) -> Result<(DiscreteChain, Targets)> {
    let chain = chain_from_grid(problem.prior(), problem.grid(), problem.rho0())?;
    Ok((chain, grid_targets(problem)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::sinkhorn::{solve, SolverConfig};
    use nalgebra::{DMatrix, DVector};

    fn geometric(delta: f64, kk: usize) -> DiscreteChain {
        DiscreteChain::new(vec![vec![1.0 - delta]; kk], vec![vec![delta]; kk], vec![1.0]).unwrap()
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(DiscreteChain::new(vec![vec![0.5, 0.5]], vec![vec![0.1]], vec![1.0]).is_err());
        assert!(DiscreteChain::new(vec![vec![0.9]], vec![vec![0.2]], vec![1.0]).is_err());
        assert!(DiscreteChain::new(vec![vec![1.1]], vec![vec![-0.1]], vec![1.0]).is_err());
        assert!(DiscreteChain::new(vec![vec![0.9]], vec![vec![0.1]], vec![0.5]).is_err());
    }

    #[test]
    fn geometric_killing() {
        let delta = 0.2;
        let (xy, xzt) = prior_couplings(&geometric(delta, 5));
        assert!((xy[0] - 0.8f64.powi(5)).abs() < 1e-15);
        for k in 0..5 {
            assert!((xzt[k] - 0.8f64.powi(k as i32) * delta).abs() < 1e-15);
        }
    }

    #[test]
    fn prior_mass_is_one() {
        for seed in 0..5 {
            let (xy, xzt) = prior_couplings(&DiscreteChain::random(4, 7, seed).unwrap());
            let total: f64 = xy.iter().chain(&xzt).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn no_killing_means_no_killed_coupling() {
        let s = vec![0.3, 0.7, 0.6, 0.4];
        let chain = DiscreteChain::new(vec![s.clone(), s.clone()], vec![vec![0.0; 2]; 2], vec![0.25, 0.75]).unwrap();
        let (xy, xzt) = prior_couplings(&chain);
        assert!(xzt.iter().all(|&v| v == 0.0));
        let s2 = [0.3 * 0.3 + 0.7 * 0.6, 0.3 * 0.7 + 0.7 * 0.4];
        assert!((xy[0] - 0.25 * s2[0]).abs() < 1e-15);
        assert!((xy[1] - 0.25 * s2[1]).abs() < 1e-15);
    }

    #[test]
    fn geometric_bridge_closed_form() {
        let chain = geometric(0.2, 4);
        let q = vec![0.0, 0.1, 0.3, 0.05];
        let t = Targets { rho0: vec![1.0], q: q.clone() };
        let (xy, xzt) = prior_couplings(&chain);
        let ipf = ipf_solve(&xy, &xzt, &t, 1e-13, 100).unwrap();
        let fs = fs_discrete(&chain, &t, 1e-13).unwrap();
        for r in [&ipf, &fs] {
            assert!((r.pi_xy[0] - 0.55).abs() < 1e-12);
            assert!(linf(&r.pi_xzt, &q) < 1e-12);
        }
    }

    #[test]
    fn prior_marginals_are_a_fixed_point() {
        let chain = DiscreteChain::random(3, 4, 7).unwrap();
        let (xy, xzt) = prior_couplings(&chain);
        let t = Targets::of(&xy, &xzt, 3);
        let r = ipf_solve(&xy, &xzt, &t, 1e-14, 10).unwrap();
        assert!(r.objective.abs() < 1e-14);
        assert!(linf(&r.pi_xy, &xy) < 1e-15);
    }

    #[test]
    fn unconstrained_prior_returned_by_fs() {
        let s = vec![0.3, 0.7, 0.6, 0.4];
        let chain = DiscreteChain::new(vec![s.clone(), s], vec![vec![0.0; 2]; 2], vec![0.25, 0.75]).unwrap();
        let (xy, _) = prior_couplings(&chain);
        let t = Targets { rho0: vec![0.25, 0.75], q: vec![0.0; 4] };
        let r = fs_discrete(&chain, &t, 1e-14).unwrap();
        assert!(linf(&r.pi_xy, &xy) < 1e-15);
        assert!(r.pi_xzt.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mass_where_nothing_dies_is_infeasible() {
        let s = vec![0.5, 0.5, 0.5, 0.5];
        let chain = DiscreteChain::new(vec![s], vec![vec![0.0; 2]], vec![0.5, 0.5]).unwrap();
        let (xy, xzt) = prior_couplings(&chain);
        let t = Targets { rho0: vec![0.5, 0.5], q: vec![0.1, 0.0] };
        assert!(matches!(ipf_solve(&xy, &xzt, &t, 1e-10, 10), Err(Error::Infeasible { .. })));
        assert!(matches!(fs_discrete(&chain, &t, 1e-10), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn ipf_and_fs_agree_on_random_chains() {
        for seed in 0..10 {
            let chain = DiscreteChain::random(5, 6, seed).unwrap();
            let t = Targets::random_feasible(&chain, seed + 100);
            let (xy, xzt) = prior_couplings(&chain);
            let ipf = ipf_solve(&xy, &xzt, &t, 1e-14, 100_000).unwrap();
            let fs = fs_discrete(&chain, &t, 1e-13).unwrap();
            assert!(ipf.gap(&fs) < 1e-10, "seed {seed}: {}", ipf.gap(&fs));
            assert!((ipf.objective - fs.objective).abs() < 1e-10);
        }
    }

    #[test]
    fn fs_start_scale_is_irrelevant() {
        let chain = DiscreteChain::random(4, 5, 3).unwrap();
        let t = Targets::random_feasible(&chain, 4);
        let a = fs_discrete_from(&chain, &t, 1e-13, &[1.0; 4], 10_000).unwrap();
        let b = fs_discrete_from(&chain, &t, 1e-13, &[10.0; 4], 10_000).unwrap();
        assert!(a.gap(&b) < 1e-12);
    }

    #[test]
    fn ipf_approaches_the_optimum_monotonically() {
        let chain = DiscreteChain::random(4, 5, 11).unwrap();
        let t = Targets::random_feasible(&chain, 12);
        let (xy, xzt) = prior_couplings(&chain);
        let star = ipf_solve(&xy, &xzt, &t, 1e-14, 100_000).unwrap();
        let mut ipf = Ipf::new(&xy, &xzt, &t).unwrap();
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            ipf.cycle();
            let (a, b) = ipf.couplings();
            let d = relative_entropy(&star.pi_xy, &a) + relative_entropy(&star.pi_xzt, &b);
            assert!(d <= prev + 1e-14, "{d} > {prev}");
            prev = d;
        }
    }

    #[test]
    fn optimum_beats_other_feasible_couplings() {
        let chain = DiscreteChain::random(4, 4, 21).unwrap();
        let t = Targets::random_feasible(&chain, 22);
        let (xy, xzt) = prior_couplings(&chain);
        let star = ipf_solve(&xy, &xzt, &t, 1e-13, 100_000).unwrap();
        for seed in 0..5 {
            // a different reference projects to a different feasible coupling
            let other = DiscreteChain::random(4, 4, 1000 + seed).unwrap();
            let (oxy, oxzt) = prior_couplings(&other);
            let alt = ipf_solve(&oxy, &oxzt, &t, 1e-13, 100_000).unwrap();
            let d_alt = relative_entropy(&alt.pi_xy, &xy) + relative_entropy(&alt.pi_xzt, &xzt);
            assert!(star.objective <= d_alt + 1e-12);
        }
    }

    /// Minimize the convex dual
    /// `sum rho_xy e^f + sum rho_xzt e^(f+g) - <rho0, f> - <q, g>` by damped Newton.
    fn dual_newton(xy: &[f64], xzt: &[f64], t: &Targets, m: usize) -> (Vec<f64>, Vec<f64>) {
        let active: Vec<usize> = (0..t.q.len()).filter(|&j| t.q[j] > 0.0).collect();
        let n = m + active.len();
        let kk = t.q.len() / m;
        let eval = |u: &DVector<f64>| -> (f64, DVector<f64>, DMatrix<f64>) {
            let mut val = 0.0;
            let mut grad = DVector::zeros(n);
            let mut hess = DMatrix::zeros(n, n);
            for x in 0..m {
                let s: f64 = xy[x * m..(x + 1) * m].iter().sum::<f64>() * u[x].exp();
                val += s - t.rho0[x] * u[x];
                grad[x] += s - t.rho0[x];
                hess[(x, x)] += s;
            }
            for (a, &j) in active.iter().enumerate() {
                let (k, z) = (j / m, j % m);
                val -= t.q[j] * u[m + a];
                grad[m + a] -= t.q[j];
                for x in 0..m {
                    let e = xzt[(k * m + x) * m + z] * (u[x] + u[m + a]).exp();
                    val += e;
                    grad[x] += e;
                    grad[m + a] += e;
                    hess[(x, x)] += e;
                    hess[(m + a, m + a)] += e;
                    hess[(x, m + a)] += e;
                    hess[(m + a, x)] += e;
                }
            }
            (val, grad, hess)
        };
        let mut u = DVector::zeros(n);
        for _ in 0..200 {
            let (val, grad, hess) = eval(&u);
            if grad.amax() < 1e-15 {
                break;
            }
            let step = hess.lu().solve(&grad).unwrap();
            let mut s = 1.0;
            while eval(&(&u - s * &step)).0 > val && s > 1e-12 {
                s *= 0.5;
            }
            u -= s * step;
        }
        let pi_xy = (0..m * m).map(|j| xy[j] * u[j / m].exp()).collect();
        let mut pi_xzt = vec![0.0; kk * m * m];
        for (a, &j) in active.iter().enumerate() {
            let (k, z) = (j / m, j % m);
            for x in 0..m {
                let idx = (k * m + x) * m + z;
                pi_xzt[idx] = xzt[idx] * (u[x] + u[m + a]).exp();
            }
        }
        (pi_xy, pi_xzt)
    }

    #[test]
    fn ipf_matches_dual_newton() {
        let chain = DiscreteChain::new(
            vec![vec![0.6, 0.3, 0.2, 0.6], vec![0.5, 0.4, 0.1, 0.85]],
            vec![vec![0.1, 0.2], vec![0.1, 0.05]],
            vec![0.4, 0.6],
        )
        .unwrap();
        let t = Targets { rho0: vec![0.5, 0.5], q: vec![0.05, 0.2, 0.1, 0.0] };
        let (xy, xzt) = prior_couplings(&chain);
        let ipf = ipf_solve(&xy, &xzt, &t, 1e-14, 100_000).unwrap();
        let (nxy, nxzt) = dual_newton(&xy, &xzt, &t, 2);
        assert!(linf(&ipf.pi_xy, &nxy) < 1e-10);
        assert!(linf(&ipf.pi_xzt, &nxzt) < 1e-10);
        for seed in 0..3 {
            let chain = DiscreteChain::random(5, 6, 50 + seed).unwrap();
            let t = Targets::random_feasible(&chain, 60 + seed);
            let (xy, xzt) = prior_couplings(&chain);
            let fs = fs_discrete(&chain, &t, 1e-13).unwrap();
            let (nxy, nxzt) = dual_newton(&xy, &xzt, &t, 5);
            assert!(linf(&fs.pi_xy, &nxy).max(linf(&fs.pi_xzt, &nxzt)) < 1e-10);
        }
    }

    #[test]
    fn matched_chain_rows() {
        let p = presets::example_problem(7, 9).unwrap();
        let (chain, t) = matched_instance(&p).unwrap();
        assert_eq!((chain.m(), chain.k()), (7, 8));
        let survive = (-0.3 * p.grid().dt()).exp();
        for k in 0..chain.k() {
            for x in 0..7 {
                let row: f64 = chain.step(k)[x * 7..(x + 1) * 7].iter().sum();
                assert!((row - survive).abs() < 1e-13);
            }
        }
        assert!((t.rho0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((t.q.iter().sum::<f64>() - p.killed_mass()).abs() < 1e-12);
    }

    #[test]
    fn continuous_solver_tracks_matched_chain() {
        let p = presets::example_problem(5, 7).unwrap();
        let (chain, t) = matched_instance(&p).unwrap();
        let fs = fs_discrete(&chain, &t, 1e-13).unwrap();
        let (pot, _) = solve(&p, &SolverConfig::default()).unwrap();
        let c = crate::posterior::couplings(&pot, p.prior(), p.grid()).unwrap();
        let (cxy, cxzt) = grid_couplings(&c, p.grid());
        let gap = linf(&cxy, &fs.pi_xy).max(linf(&cxzt, &fs.pi_xzt));
        assert!(gap < 5e-3, "{gap}");
    }
}
