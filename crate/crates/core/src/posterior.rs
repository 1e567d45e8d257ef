//! Posterior objects built from converged potentials: one-time marginals
//! `P = phi phihat`, the feedback control `u = sigma d/dx log phi`, the
//! killing rescale `alpha = Lambda / phi`, the achieved killed density and
//! the optimal couplings.

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{cumulative_spacetime, integrate_space, ScalarField, SpaceTimeField, SpaceTimeGrid};
use crate::pde::KolmogorovSolver;
use crate::prior::{PriorSpec, PriorTables};
use crate::sinkhorn::{Potentials, ProblemSpec};

/// Relative floor below which `u` and `alpha` are masked.
pub const P_FLOOR: f64 = 1e-12;

/// Default cap on `nx * nx * nt` for materialized couplings.
pub const COUPLING_BUDGET: usize = 20_000_000;

#[derive(Debug, Clone)]
pub struct PosteriorSolution {
    pub grid: SpaceTimeGrid,
    /// Backward potential in the gauge of the input potentials.
    pub phi: SpaceTimeField,
    /// One-time marginals restricted to the primary space.
    pub p: SpaceTimeField,
    /// `u = sigma d/dx log phi`.
    pub u: SpaceTimeField,
    /// The added drift `sigma u = a d/dx log phi`.
    pub drift_correction: SpaceTimeField,
    /// Killing rescale `alpha = Lambda / phi`.
    pub alpha: SpaceTimeField,
    /// Achieved killed density `alpha V P = Lambda V phihat`.
    pub qhat: SpaceTimeField,
    /// `true` where `P` is above the floor and `u`, `alpha` are meaningful.
    pub mask: Vec<bool>,
    /// `integral P_t dx` per time node.
    pub survivor_mass: Vec<f64>,
    /// Killed mass accumulated over `[0, t_k]`.
    pub killed_mass: Vec<f64>,
}

impl PosteriorSolution {
    /// `max_k |survivor_mass + killed_mass - 1|`.
    pub fn bookkeeping_defect(&self) -> f64 {
        self.survivor_mass
            .iter()
            .zip(&self.killed_mass)
            .map(|(s, k)| (s + k - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_masked(&self, k: usize, i: usize) -> bool {
        !self.mask[k * self.grid.nx() + i]
    }
}

/// `P_t = phi(t,.) phihat(t,.)`.
pub fn marginals(pot: &Potentials, g: &SpaceTimeGrid) -> Result<SpaceTimeField> {
    pot.phi.check(g)?;
    pot.phi.zip_map(&pot.phihat, |a, b| a * b)
}

fn positivity_mask(p: &SpaceTimeField) -> Vec<bool> {
    let floor = P_FLOOR * p.max().max(0.0);
    p.as_slice().iter().map(|&v| v > floor).collect()
}

/// Central-difference `d/dx log f` on one row, one-sided second order at the ends.
fn log_gradient(row: &[f64], dx: f64, out: &mut [f64]) {
    let n = row.len();
    let l: Vec<f64> = row.iter().map(|v| v.ln()).collect();
    out[0] = (-3.0 * l[0] + 4.0 * l[1] - l[2]) / (2.0 * dx);
    out[n - 1] = (3.0 * l[n - 1] - 4.0 * l[n - 2] + l[n - 3]) / (2.0 * dx);
    for i in 1..n - 1 {
        out[i] = (l[i + 1] - l[i - 1]) / (2.0 * dx);
    }
}

#[derive(Debug, Clone)]
pub struct ControlField {
    pub u: SpaceTimeField,
    pub drift_correction: SpaceTimeField,
    pub mask: Vec<bool>,
}

pub fn control(pot: &Potentials, prior: &PriorSpec, g: &SpaceTimeGrid) -> Result<ControlField> {
    let tables = prior.tabulate(g)?;
    let p = marginals(pot, g)?;
    Ok(control_from_tables(pot, &p, &tables, g))
}

fn control_from_tables(pot: &Potentials, p: &SpaceTimeField, tables: &PriorTables, g: &SpaceTimeGrid) -> ControlField {
    let mask = positivity_mask(p);
    let mut u = g.zeros();
    let mut dc = g.zeros();
    let mut grad = vec![0.0; g.nx()];
    for k in 0..g.nt() {
        log_gradient(pot.phi.row(k), g.dx(), &mut grad);
        for i in 0..g.nx() {
            if mask[k * g.nx() + i] {
                let s = tables.sigma.get(k, i);
                u.set(k, i, s * grad[i]);
                dc.set(k, i, s * s * grad[i]);
            }
        }
    }
    ControlField {
        u,
        drift_correction: dc,
        mask,
    }
}

/// `(alpha, Qhat)` with `alpha = Lambda / phi` and `Qhat = Lambda V phihat`.
pub fn killing(pot: &Potentials, prior: &PriorSpec, g: &SpaceTimeGrid) -> Result<(SpaceTimeField, SpaceTimeField)> {
    let tables = prior.tabulate(g)?;
    let p = marginals(pot, g)?;
    killing_from_tables(pot, &p, &tables)
}

fn killing_from_tables(
    pot: &Potentials,
    p: &SpaceTimeField,
    tables: &PriorTables,
) -> Result<(SpaceTimeField, SpaceTimeField)> {
    let mask = positivity_mask(p);
    let mut alpha = pot.lambda.zip_map(&pot.phi, |l, f| if l > 0.0 { l / f } else { 0.0 })?;
    for (a, &keep) in alpha.as_mut_slice().iter_mut().zip(&mask) {
        if !keep {
            *a = 0.0;
        }
    }
    let qhat = pot
        .lambda
        .zip_map(&tables.killing, |l, v| l * v)?
        .zip_map(&pot.phihat, |a, b| a * b)?;
    Ok((alpha, qhat))
}

/// Assemble every posterior field from converged potentials.
pub fn assemble(pot: &Potentials, problem: &ProblemSpec) -> Result<PosteriorSolution> {
    let g = problem.grid();
    let tables = problem.prior().tabulate(g)?;
    let p = marginals(pot, g)?;
    let ctl = control_from_tables(pot, &p, &tables, g);
    let (alpha, qhat) = killing_from_tables(pot, &p, &tables)?;
    let survivor_mass = p
        .rows()
        .map(|row| integrate_space(row, g))
        .collect::<Result<Vec<_>>>()?;
    let killed_mass = cumulative_spacetime(&qhat, g)?;
    Ok(PosteriorSolution {
        grid: *g,
        phi: pot.phi.clone(),
        p,
        u: ctl.u,
        drift_correction: ctl.drift_correction,
        alpha,
        qhat,
        mask: ctl.mask,
        survivor_mass,
        killed_mass,
    })
}

/// Max-norm residual of the posterior Fokker-Planck equation
/// `dP/dt = -d/dx((b + sigma u) P) + 1/2 d2/dx2(a P) - alpha V P`,
/// time-centred between nodes and evaluated with the flux stencils of the
/// prior generator at interior nodes, divided by `max P`. The added drift on
/// each face is `a (log phi_{i+1} - log phi_i) / dx`.
pub fn fp_residual(sol: &PosteriorSolution, prior: &PriorSpec, g: &SpaceTimeGrid) -> Result<f64> {
    sol.p.check(g)?;
    sol.phi.check(g)?;
    let tables = prior.tabulate(g)?;
    let n = g.nx();
    let dx = g.dx();
    let h = g.dt();
    let rhs_row = |k: usize| -> Vec<f64> {
        let p = sol.p.row(k);
        let phi = sol.phi.row(k);
        let flux: Vec<f64> = (0..n - 1)
            .map(|i| {
                let a_face = 0.5 * (tables.a.get(k, i) + tables.a.get(k, i + 1));
                let c = 0.5 * (tables.drift.get(k, i) + tables.drift.get(k, i + 1))
                    + a_face * (phi[i + 1].ln() - phi[i].ln()) / dx;
                let d_l = 0.5 * tables.a.get(k, i);
                let d_r = 0.5 * tables.a.get(k, i + 1);
                c * 0.5 * (p[i] + p[i + 1]) - (d_r * p[i + 1] - d_l * p[i]) / dx
            })
            .collect();
        let mut out = vec![0.0; n];
        for i in 1..n - 1 {
            out[i] = -(flux[i] - flux[i - 1]) / dx - sol.alpha.get(k, i) * tables.killing.get(k, i) * p[i];
        }
        out
    };
    let mut worst = 0.0f64;
    let mut prev = rhs_row(0);
    for k in 0..g.nt() - 1 {
        let next = rhs_row(k + 1);
        for i in 1..n - 1 {
            let r = (sol.p.get(k + 1, i) - sol.p.get(k, i)) / h - 0.5 * (prev[i] + next[i]);
            worst = worst.max(r.abs());
        }
        prev = next;
    }
    Ok(worst / sol.p.max())
}

/// Optimal couplings on the grid, as densities.
#[derive(Debug, Clone)]
pub struct Couplings {
    pub nx: usize,
    pub nt: usize,
    /// `pi_xy[x * nx + y] = r(0,x,1,y) phihat(0,x) phi(1,y)`.
    pub pi_xy: Vec<f64>,
    /// `pi_xzt[(k * nx + x) * nx + z] = V(t_k,z) r(0,x,t_k,z) phihat(0,x) Lambda(t_k,z)`.
    pub pi_xzt: Vec<f64>,
    /// `f = phihat(0,.) / R0` with the prior started from `rho0`, i.e. `1 / phi(0,.)`
    /// on the support of `rho0` and 0 elsewhere.
    pub f: ScalarField,
}

impl Couplings {
    pub fn xy(&self, x: usize, y: usize) -> f64 {
        self.pi_xy[x * self.nx + y]
    }

    pub fn xzt(&self, k: usize, x: usize, z: usize) -> f64 {
        self.pi_xzt[(k * self.nx + x) * self.nx + z]
    }

    /// `integral pi_xy dy + integral integral pi_xzt dz dt` per start node.
    pub fn row_marginal(&self, g: &SpaceTimeGrid) -> Vec<f64> {
        let ws = g.space_weights();
        let wt = g.time_weights();
        (0..self.nx)
            .map(|x| {
                let surv: f64 = (0..self.nx).map(|y| ws[y] * self.xy(x, y)).sum();
                let killed: f64 = (0..self.nt)
                    .map(|k| wt[k] * (0..self.nx).map(|z| ws[z] * self.xzt(k, x, z)).sum::<f64>())
                    .sum();
                surv + killed
            })
            .collect()
    }

    /// `integral pi_xzt dx` per `(t, z)`.
    pub fn killed_marginal(&self, g: &SpaceTimeGrid) -> SpaceTimeField {
        let ws = g.space_weights();
        let mut out = SpaceTimeField::zeros(self.nt, self.nx);
        for k in 0..self.nt {
            for z in 0..self.nx {
                let s: f64 = (0..self.nx).map(|x| ws[x] * self.xzt(k, x, z)).sum();
                out.set(k, z, s);
            }
        }
        out
    }
}

/// Materialize the optimal couplings from prior kernel rows.
pub fn couplings(pot: &Potentials, prior: &PriorSpec, g: &SpaceTimeGrid) -> Result<Couplings> {
    couplings_with(pot, prior, g, COUPLING_BUDGET, Execution::default())
}

pub fn couplings_with(
    pot: &Potentials,
    prior: &PriorSpec,
    g: &SpaceTimeGrid,
    budget: usize,
    exec: Execution,
) -> Result<Couplings> {
    let (nx, nt) = (g.nx(), g.nt());
    let required = nx * nx * nt;
    if required > budget {
        return Err(Error::Budget { required, budget });
    }
    pot.phi.check(g)?;
    let solver = KolmogorovSolver::with_execution(prior, g, exec)?;
    let phi1 = pot.phi.row(nt - 1);
    let rows = exec.map_range(nx, |x| -> Result<(Vec<f64>, Vec<f64>)> {
        let scale = pot.phihat0[x];
        if scale == 0.0 {
            return Ok((vec![0.0; nx], vec![0.0; nt * nx]));
        }
        let kr = solver.kernel_row(x)?;
        let xy = (0..nx).map(|y| kr.survivor[y] * scale * phi1[y]).collect();
        let mut xzt = vec![0.0; nt * nx];
        for k in 0..nt {
            for z in 0..nx {
                xzt[k * nx + z] = kr.killed.get(k, z) * scale * pot.lambda.get(k, z);
            }
        }
        Ok((xy, xzt))
    });
    let mut pi_xy = vec![0.0; nx * nx];
    let mut pi_xzt = vec![0.0; nt * nx * nx];
    for (x, row) in rows.into_iter().enumerate() {
        let (xy, xzt) = row?;
        pi_xy[x * nx..(x + 1) * nx].copy_from_slice(&xy);
        for k in 0..nt {
            let dst = (k * nx + x) * nx;
            pi_xzt[dst..dst + nx].copy_from_slice(&xzt[k * nx..(k + 1) * nx]);
        }
    }
    let f = ScalarField(
        pot.phi0
            .iter()
            .zip(pot.phihat0.iter())
            .map(|(p, h)| if *h > 0.0 { 1.0 / p } else { 0.0 })
            .collect(),
    );
    Ok(Couplings {
        nx,
        nt,
        pi_xy,
        pi_xzt,
        f,
    })
}
