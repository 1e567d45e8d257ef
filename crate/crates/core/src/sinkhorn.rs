//! Fortet-Sinkhorn iteration for the Schrödinger system with killing.
//!
//! One sweep maps `phi(0,.)` to its successor through
//!
//! 1. `phihat(0,.) = rho0 / phi(0,.)`
//! 2. `phihat = forward solve from phihat(0,.)`, `Lambdahat = V phihat`
//! 3. `Lambda = Q / Lambdahat` (and 0 where `Q = 0`)
//! 4. `phi = backward solve with source Lambda`, `phi(0,.)` from its first row.
//!
//! Progress is measured with the Hilbert projective metric between
//! successive `phi(0,.)` on the support of `rho0`.

use std::io::{self, Write};

use log::warn;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{integrate_space, integrate_spacetime, ScalarField, SpaceTimeField, SpaceTimeGrid};
use crate::pde::KolmogorovSolver;
use crate::prior::PriorSpec;

/// Initial density, target killed density, prior and grid.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    rho0: ScalarField,
    q: SpaceTimeField,
    prior: PriorSpec,
    grid: SpaceTimeGrid,
}

impl ProblemSpec {
    /// Validate and normalize `rho0` to unit trapezoid mass.
    pub fn new(rho0: ScalarField, q: SpaceTimeField, prior: PriorSpec, grid: SpaceTimeGrid) -> Result<Self> {
        rho0.check(&grid)?;
        q.check(&grid)?;
        if rho0.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Input("rho0 must be finite and nonnegative".into()));
        }
        let mass = integrate_space(&rho0, &grid)?;
        if !(mass > 0.0) {
            return Err(Error::Input("rho0 has zero mass".into()));
        }
        let rho0 = ScalarField(rho0.iter().map(|v| v / mass).collect());
        if let Some(pos) = q.as_slice().iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Input(format!(
                "Q must be finite and nonnegative (got {} at {})",
                q.as_slice()[pos],
                grid.locus(pos / grid.nx(), pos % grid.nx())
            )));
        }
        if q.row(0).iter().any(|&v| v != 0.0) {
            return Err(Error::Input("Q must vanish at t = 0".into()));
        }
        let killed = integrate_spacetime(&q, &grid)?;
        if killed >= 1.0 {
            return Err(Error::Input(format!("killed mass must be < 1 (got {killed})")));
        }
        for k in 0..grid.nt() {
            for i in 0..grid.nx() {
                if q.get(k, i) > 0.0 {
                    let v = prior.killing(grid.t(k), grid.x(i));
                    if !(v > 0.0) {
                        return Err(Error::Infeasible {
                            locus: grid.locus(k, i),
                            reason: format!("Q = {} > 0 where the prior killing rate is {v}", q.get(k, i)),
                        });
                    }
                }
            }
        }
        Ok(Self { rho0, q, prior, grid })
    }

    pub fn rho0(&self) -> &ScalarField {
        &self.rho0
    }

    pub fn q(&self) -> &SpaceTimeField {
        &self.q
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    /// Nodes where `rho0 > 0`.
    pub fn support(&self) -> Vec<bool> {
        self.rho0.iter().map(|&v| v > 0.0).collect()
    }

    pub fn killed_mass(&self) -> f64 {
        integrate_spacetime(&self.q, &self.grid).unwrap_or(f64::NAN)
    }
}

/// Unknowns of the Schrödinger system on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Potentials {
    pub phi0: ScalarField,
    pub phihat0: ScalarField,
    pub lambda: SpaceTimeField,
    pub lambdahat: SpaceTimeField,
    pub phi: SpaceTimeField,
    pub phihat: SpaceTimeField,
}

impl Potentials {
    /// Apply the gauge `(k phi, phihat / k, k Lambda, Lambdahat / k)`.
    pub fn rescaled(&self, kappa: f64) -> Self {
        let up = |f: &SpaceTimeField| f.map(|v| v * kappa);
        let down = |f: &SpaceTimeField| f.map(|v| v / kappa);
        Self {
            phi0: ScalarField(self.phi0.iter().map(|v| v * kappa).collect()),
            phihat0: ScalarField(self.phihat0.iter().map(|v| v / kappa).collect()),
            lambda: up(&self.lambda),
            lambdahat: down(&self.lambdahat),
            phi: up(&self.phi),
            phihat: down(&self.phihat),
        }
    }

    /// `|| phi0 phihat0 - rho0 ||_1` (trapezoid).
    pub fn residual_rho0(&self, p: &ProblemSpec) -> f64 {
        let diff: Vec<f64> = self
            .phi0
            .iter()
            .zip(self.phihat0.iter())
            .zip(p.rho0().iter())
            .map(|((a, b), r)| (a * b - r).abs())
            .collect();
        integrate_space(&diff, p.grid()).unwrap_or(f64::NAN)
    }

    /// `|| Lambda Lambdahat - Q ||_1` over space-time (trapezoid).
    pub fn residual_q(&self, p: &ProblemSpec) -> f64 {
        let prod = self.lambda.zip_map(&self.lambdahat, |a, b| a * b);
        prod.and_then(|f| f.zip_map(p.q(), |a, b| (a - b).abs()))
            .and_then(|f| integrate_spacetime(&f, p.grid()))
            .unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gauge {
    /// Rescale so that `max phi(0,.) = 1` on the support of `rho0`.
    MaxPhi0OnSupport,
    /// Keep the terminal normalization `phi(1,.) = 1`.
    Terminal,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub tol_hilbert: f64,
    pub max_iter: usize,
    pub eps_div: f64,
    pub gauge: Gauge,
    pub execution: Execution,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol_hilbert: 1e-10,
            max_iter: 10_000,
            eps_div: 1e-300,
            gauge: Gauge::MaxPhi0OnSupport,
            execution: Execution::default(),
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tol_hilbert > 0.0) {
            return Err(Error::Input("tol_hilbert must be > 0".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Input("max_iter must be >= 1".into()));
        }
        if !(self.eps_div >= 0.0) {
            return Err(Error::Input("eps_div must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub hilbert_distance: f64,
    pub residual_rho0: f64,
    pub residual_q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct ConvergenceTrace {
    pub records: Vec<TraceRecord>,
    pub termination: Termination,
    /// Residuals of the gauge-fixed output.
    pub final_residual_rho0: f64,
    pub final_residual_q: f64,
}

impl ConvergenceTrace {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.hilbert_distance).collect()
    }

    pub const CSV_HEADER: &'static str = "iteration,hilbert_distance,residual_rho0,residual_Q";

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            writeln!(
                w,
                "{},{:.16e},{:.16e},{:.16e}",
                r.iteration, r.hilbert_distance, r.residual_rho0, r.residual_q
            )?;
        }
        Ok(())
    }
}

/// Hilbert projective metric `log max(u/v) - log min(u/v)` over `mask`
/// (all nodes when `mask` is `None`).
pub fn hilbert_metric(u: &[f64], v: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    if u.len() != v.len() || mask.is_some_and(|m| m.len() != u.len()) {
        return Err(Error::shape(u.len(), v.len()));
    }
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for i in 0..u.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        if !(u[i] > 0.0 && v[i] > 0.0) || !u[i].is_finite() || !v[i].is_finite() {
            return Err(Error::Domain(format!(
                "Hilbert metric needs positive entries (got {} and {} at {i})",
                u[i], v[i]
            )));
        }
        let r = (u[i] / v[i]).ln();
        hi = hi.max(r);
        lo = lo.min(r);
    }
    if hi < lo {
        return Err(Error::Domain("empty support for the Hilbert metric".into()));
    }
    Ok(hi - lo)
}

/// A problem bound to its pre-factorized PDE solver.
/// `|log(max u / max v)|` over the mask. The Hilbert metric ignores scale, and
/// the iteration also has to settle the scale of `phi(0,.)`.
pub fn scale_drift(u: &[f64], v: &[f64], mask: &[bool]) -> f64 {
    let top = |w: &[f64]| {
        w.iter()
            .zip(mask)
            .filter(|(_, &s)| s)
            .map(|(x, _)| *x)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    (top(u) / top(v)).ln().abs()
}

#[derive(Debug, Clone)]
pub struct FortetSinkhorn<'a> {
    problem: &'a ProblemSpec,
    solver: KolmogorovSolver,
    support: Vec<bool>,
    eps_div: f64,
}

impl<'a> FortetSinkhorn<'a> {
    pub fn new(problem: &'a ProblemSpec, exec: Execution) -> Result<Self> {
        let solver = KolmogorovSolver::with_execution(problem.prior(), problem.grid(), exec)?;
        if !solver.is_positivity_preserving() {
            log::debug!("time step is outside the positivity-preserving range of Crank-Nicolson");
        }
        Ok(Self {
            problem,
            support: problem.support(),
            solver,
            eps_div: SolverConfig::default().eps_div,
        })
    }

    pub fn with_eps_div(mut self, eps_div: f64) -> Self {
        self.eps_div = eps_div;
        self
    }

    pub fn solver(&self) -> &KolmogorovSolver {
        &self.solver
    }

    pub fn support(&self) -> &[bool] {
        &self.support
    }

    /// One pass `phi(0,.) -> phihat(0,.) -> Lambdahat -> Lambda -> phi(0,.)`.
    pub fn sweep(&self, phi0: &[f64]) -> Result<Potentials> {
        let p = self.problem;
        let g = p.grid();
        if phi0.len() != g.nx() {
            return Err(Error::shape(g.nx(), phi0.len()));
        }
        let mut phihat0 = vec![0.0; g.nx()];
        for i in 0..g.nx() {
            let r = p.rho0()[i];
            if r > 0.0 {
                if !(phi0[i] > self.eps_div) || !phi0[i].is_finite() {
                    return Err(Error::Numerical(format!(
                        "phi(0, x={}) = {} on the support of rho0",
                        g.x(i),
                        phi0[i]
                    )));
                }
                phihat0[i] = r / phi0[i];
            }
        }
        let phihat = self.solver.solve_forward(&phihat0)?.phihat;
        let lambdahat = phihat.zip_map(self.solver.killing(), |ph, v| v * ph)?;
        let mut lambda = g.zeros();
        for k in 0..g.nt() {
            for i in 0..g.nx() {
                let q = p.q().get(k, i);
                if q > 0.0 {
                    let lh = lambdahat.get(k, i);
                    if !(lh > self.eps_div) {
                        return Err(Error::Infeasible {
                            locus: g.locus(k, i),
                            reason: format!("Q = {q} but the forward killed density is {lh}"),
                        });
                    }
                    let l = q / lh;
                    if !l.is_finite() {
                        return Err(Error::Numerical(format!("Lambda overflow at {}", g.locus(k, i))));
                    }
                    lambda.set(k, i, l);
                }
            }
        }
        let phi = self.solver.solve_backward(&lambda)?.phi;
        Ok(Potentials {
            phi0: phi.scalar(0),
            phihat0: ScalarField(phihat0),
            lambda,
            lambdahat,
            phi,
            phihat,
        })
    }

    pub fn run(&self, cfg: &SolverConfig, phi0_init: &[f64]) -> Result<(Potentials, ConvergenceTrace)> {
        cfg.validate()?;
        let p = self.problem;
        let mut phi0 = phi0_init.to_vec();
        let mut records = Vec::new();
        let mut state = None;
        let mut termination = Termination::MaxIterations;
        for iteration in 1..=cfg.max_iter {
            let next = self.sweep(&phi0)?;
            let d = hilbert_metric(&next.phi0, &phi0, Some(&self.support))?;
            records.push(TraceRecord {
                iteration,
                hilbert_distance: d,
                residual_rho0: next.residual_rho0(p),
                residual_q: next.residual_q(p),
            });
            let drift = scale_drift(&next.phi0, &phi0, &self.support);
            phi0.copy_from_slice(&next.phi0);
            state = Some(next);
            if d < cfg.tol_hilbert && drift < cfg.tol_hilbert {
                termination = Termination::Converged;
                break;
            }
        }
        let mut pot = state.expect("max_iter >= 1");
        if cfg.gauge == Gauge::MaxPhi0OnSupport {
            let top = pot
                .phi0
                .iter()
                .zip(&self.support)
                .filter(|(_, &s)| s)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            pot = pot.rescaled(1.0 / top);
        }
        let trace = ConvergenceTrace {
            final_residual_rho0: pot.residual_rho0(p),
            final_residual_q: pot.residual_q(p),
            records,
            termination,
        };
        if termination == Termination::MaxIterations {
            return Err(Error::NoConvergence { trace: Box::new(trace) });
        }
        let mass_scale = 1e-6;
        if trace.final_residual_rho0 > mass_scale || trace.final_residual_q > mass_scale * p.killed_mass().max(1.0) {
            warn!(
                "converged in the Hilbert metric but coupling residuals are {:.3e} (rho0) and {:.3e} (Q)",
                trace.final_residual_rho0, trace.final_residual_q
            );
        }
        Ok((pot, trace))
    }
}

/// One sweep from `state.phi0` (builds the PDE solver on each call).
pub fn fs_sweep(state: &Potentials, p: &ProblemSpec) -> Result<Potentials> {
    FortetSinkhorn::new(p, Execution::default())?.sweep(&state.phi0)
}

/// Iterate from `phi0 = 1` until the Hilbert distance between successive
/// `phi(0,.)` drops below `cfg.tol_hilbert`.
pub fn solve(p: &ProblemSpec, cfg: &SolverConfig) -> Result<(Potentials, ConvergenceTrace)> {
    solve_from(p, cfg, &vec![1.0; p.grid().nx()])
}

pub fn solve_from(p: &ProblemSpec, cfg: &SolverConfig, phi0_init: &[f64]) -> Result<(Potentials, ConvergenceTrace)> {
    FortetSinkhorn::new(p, cfg.execution)?
        .with_eps_div(cfg.eps_div)
        .run(cfg, phi0_init)
}
