//! Crank-Nicolson solvers for the two Kolmogorov equations of the
//! Schrödinger system.
//!
//! Forward: `dp/dt = L p` with `L = W^-1 A - V`, from `p(0) = init`.
//!
//! Backward: `-dphi/dt = L* phi + V Lambda`, from `phi(1) = 1`. The source is
//! integrated with the trapezoid rule on the Duhamel form of each step,
//!
//! ```text
//! phi_k = M_k* (phi_{k+1} + h/2 V_{k+1} Lambda_{k+1}) + h/2 V_k Lambda_k,
//! ```
//!
//! where `M_k` is the forward Crank-Nicolson step. Together with
//! `L* = adjoint of L` this gives an exact discrete duality
//!
//! ```text
//! <phi_k, p_k> = <phi_{k+1}, p_{k+1}> + h/2 (<V Lambda_k, p_k> + <V Lambda_{k+1}, p_{k+1}>)
//! ```
//!
//! in the trapezoid inner product, so killed mass measured by trapezoid
//! quadrature of `V Lambda p` balances the pairing `<phi, p>` to rounding.

use log::warn;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{ScalarField, SpaceTimeField, SpaceTimeGrid};
use crate::prior::{assemble_tables, KernelRow, PriorSpec, PriorTables};
use crate::tridiag::{Factored, Tridiag};

/// Undershoots below this are reported.
pub const UNDERSHOOT_WARN: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct BackwardSolveResult {
    pub phi: SpaceTimeField,
}

impl BackwardSolveResult {
    pub fn phi0(&self) -> ScalarField {
        self.phi.scalar(0)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardSolveResult {
    pub phihat: SpaceTimeField,
    /// Most negative value produced by the scheme (0 if none).
    pub undershoot: f64,
}

#[derive(Debug, Clone)]
struct Step {
    fwd_lhs: Factored,
    fwd_rhs: Tridiag,
    bwd_lhs: Factored,
    bwd_rhs: Tridiag,
}

/// Pre-factorized time stepper for one prior on one grid. The factorizations
/// are immutable and shared by every forward and backward solve.
#[derive(Debug, Clone)]
pub struct KolmogorovSolver {
    grid: SpaceTimeGrid,
    tables: PriorTables,
    steps: Vec<Step>,
    monotone: bool,
}

impl KolmogorovSolver {
    pub fn new(prior: &PriorSpec, g: &SpaceTimeGrid) -> Result<Self> {
        Self::with_execution(prior, g, Execution::default())
    }

    pub fn with_execution(prior: &PriorSpec, g: &SpaceTimeGrid, exec: Execution) -> Result<Self> {
        let tables = prior.tabulate_with(g, exec)?;
        Self::from_tables(tables, g, exec)
    }

    pub fn from_tables(tables: PriorTables, g: &SpaceTimeGrid, exec: Execution) -> Result<Self> {
        let h = g.dt();
        let snaps = exec.map_range(g.nt(), |k| assemble_tables(&tables, g, k));
        let steps = exec
            .map_range(g.nt() - 1, |k| {
                let fwd = snaps[k].forward.midpoint(&snaps[k + 1].forward);
                let bwd = snaps[k].backward.midpoint(&snaps[k + 1].backward);
                Ok(Step {
                    fwd_lhs: fwd.shifted(1.0, -0.5 * h).factor()?,
                    fwd_rhs: fwd.shifted(1.0, 0.5 * h),
                    bwd_lhs: bwd.shifted(1.0, -0.5 * h).factor()?,
                    bwd_rhs: bwd.shifted(1.0, 0.5 * h),
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let monotone = steps.iter().all(|s| s.fwd_rhs.diag.iter().all(|&d| d >= 0.0));
        Ok(Self {
            grid: *g,
            tables,
            steps,
            monotone,
        })
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    pub fn tables(&self) -> &PriorTables {
        &self.tables
    }

    pub fn killing(&self) -> &SpaceTimeField {
        &self.tables.killing
    }

    /// Whether every step maps nonnegative data to nonnegative data
    /// (Crank-Nicolson with explicit-half diagonal `1 + h/2 L_ii >= 0`).
    pub fn is_positivity_preserving(&self) -> bool {
        self.monotone
    }

    pub fn solve_forward(&self, init: &[f64]) -> Result<ForwardSolveResult> {
        let g = &self.grid;
        if init.len() != g.nx() {
            return Err(Error::shape(format!("{} spatial nodes", g.nx()), init.len()));
        }
        if let Some(i) = init.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Input(format!(
                "initial condition must be finite and nonnegative (got {} at x={})",
                init[i],
                g.x(i)
            )));
        }
        let mut phihat = g.zeros();
        phihat.row_mut(0).copy_from_slice(init);
        let mut buf = vec![0.0; g.nx()];
        for (k, step) in self.steps.iter().enumerate() {
            step.fwd_rhs.apply(phihat.row(k), &mut buf);
            step.fwd_lhs.solve_in_place(&mut buf);
            phihat.row_mut(k + 1).copy_from_slice(&buf);
        }
        let undershoot = phihat.min().min(0.0);
        if undershoot < -UNDERSHOOT_WARN {
            warn!(
                "forward solve undershoot {undershoot:.3e}; consider a larger nt (h*D/dx^2 too large for smooth decay)"
            );
        }
        Ok(ForwardSolveResult { phihat, undershoot })
    }

    pub fn solve_backward(&self, lambda: &SpaceTimeField) -> Result<BackwardSolveResult> {
        self.solve_backward_scaled(lambda, 1.0)
    }

    /// Backward solve from the terminal value `phi(1, .) = terminal`.
    pub fn solve_backward_scaled(&self, lambda: &SpaceTimeField, terminal: f64) -> Result<BackwardSolveResult> {
        let g = &self.grid;
        lambda.check(g)?;
        if let Some(pos) = lambda.as_slice().iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Input(format!(
                "Lambda must be finite and nonnegative (got {} at {})",
                lambda.as_slice()[pos],
                g.locus(pos / g.nx(), pos % g.nx())
            )));
        }
        let half = 0.5 * g.dt();
        let v = &self.tables.killing;
        let mut phi = g.zeros();
        phi.row_mut(g.nt() - 1).fill(terminal);
        let mut tmp = vec![0.0; g.nx()];
        let mut buf = vec![0.0; g.nx()];
        for k in (0..g.nt() - 1).rev() {
            let step = &self.steps[k];
            for i in 0..g.nx() {
                tmp[i] = phi.get(k + 1, i) + half * v.get(k + 1, i) * lambda.get(k + 1, i);
            }
            step.bwd_rhs.apply(&tmp, &mut buf);
            step.bwd_lhs.solve_in_place(&mut buf);
            let row = phi.row_mut(k);
            for i in 0..g.nx() {
                row[i] = buf[i] + half * v.get(k, i) * lambda.get(k, i);
            }
        }
        if let Some(pos) = phi.as_slice().iter().position(|&p| !(p > 0.0)) {
            let locus = g.locus(pos / g.nx(), pos % g.nx());
            return Err(Error::Infeasible {
                locus,
                reason: format!("backward potential is {} (must stay positive)", phi.as_slice()[pos]),
            });
        }
        Ok(BackwardSolveResult { phi })
    }

    /// `r(0, x_i, 1, .)` and `V r(0, x_i, ., .)` from a unit-mass delta at node `i`.
    pub fn kernel_row(&self, i: usize) -> Result<KernelRow> {
        let g = &self.grid;
        if i >= g.nx() {
            return Err(Error::Input(format!("node index {i} outside 0..{}", g.nx())));
        }
        let mut init = vec![0.0; g.nx()];
        init[i] = 1.0 / g.space_weights()[i];
        let fwd = self.solve_forward(&init)?;
        let survivor = fwd.phihat.scalar(g.nt() - 1);
        let killed = fwd.phihat.zip_map(&self.tables.killing, |p, v| p * v)?;
        Ok(KernelRow { survivor, killed })
    }

    /// `max_x |phi(0, x) - 1|` for the backward solve with `Lambda = 1`,
    /// i.e. the defect in survival-plus-killed probability per start point.
    pub fn conservation_defect(&self) -> Result<f64> {
        let ones = self.grid.filled(1.0);
        let phi = self.solve_backward(&ones)?.phi;
        Ok(phi.row(0).iter().map(|p| (p - 1.0).abs()).fold(0.0, f64::max))
    }
}

pub fn solve_backward(prior: &PriorSpec, g: &SpaceTimeGrid, lambda: &SpaceTimeField) -> Result<BackwardSolveResult> {
    KolmogorovSolver::new(prior, g)?.solve_backward(lambda)
}

pub fn solve_forward(prior: &PriorSpec, g: &SpaceTimeGrid, init: &[f64]) -> Result<ForwardSolveResult> {
    KolmogorovSolver::new(prior, g)?.solve_forward(init)
}

pub fn conservation_defect(prior: &PriorSpec, g: &SpaceTimeGrid) -> Result<f64> {
    KolmogorovSolver::new(prior, g)?.conservation_defect()
}
