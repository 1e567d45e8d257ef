//! The prior killed diffusion `dX = b dt + sigma dW` with killing rate `V`,
//! and its finite-volume generator on a truncated box.
//!
//! The spatial operator is built in flux form on the trapezoid control
//! volumes of the grid (half cells at the two ends) with zero flux through
//! the box boundary. Writing `W` for the diagonal of trapezoid weights and
//! `A` for the flux matrix (zero column sums), the forward operator is
//! `W^-1 A - V` and the backward operator is its exact adjoint in the
//! trapezoid inner product, `W^-1 A^T - V`. Diffusion uses the conservative
//! form `d/dx (d/dx (a p / 2))`; advection is central on faces where that
//! keeps both off-diagonals nonnegative (cell Peclet number `|b| dx / D <= 2`
//! for `D = a/2`) and first-order upwind elsewhere.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{sample_with, ScalarField, SpaceTimeField, SpaceTimeGrid};
use crate::tridiag::Tridiag;

pub type Coefficient = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Smallest diffusion coefficient accepted on the grid.
pub const SIGMA_MIN: f64 = 1e-8;

/// Drift `b(t,x)`, diffusion `sigma(t,x)` and killing rate `V(t,x)`.
#[derive(Clone)]
pub struct PriorSpec {
    drift: Coefficient,
    diffusion: Coefficient,
    killing: Coefficient,
}

impl fmt::Debug for PriorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PriorSpec").finish_non_exhaustive()
    }
}

impl PriorSpec {
    pub fn new<B, S, V>(drift: B, diffusion: S, killing: V) -> Self
    where
        B: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        S: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        V: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            killing: Arc::new(killing),
        }
    }

    pub fn from_coefficients(drift: Coefficient, diffusion: Coefficient, killing: Coefficient) -> Self {
        Self {
            drift,
            diffusion,
            killing,
        }
    }

    pub fn constant(drift: f64, sigma: f64, killing: f64) -> Self {
        Self::new(move |_, _| drift, move |_, _| sigma, move |_, _| killing)
    }

    /// Same drift and diffusion, different killing rate.
    pub fn with_killing<V>(&self, killing: V) -> Self
    where
        V: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            drift: self.drift.clone(),
            diffusion: self.diffusion.clone(),
            killing: Arc::new(killing),
        }
    }

    pub fn drift(&self, t: f64, x: f64) -> f64 {
        (self.drift)(t, x)
    }

    pub fn sigma(&self, t: f64, x: f64) -> f64 {
        (self.diffusion)(t, x)
    }

    pub fn killing(&self, t: f64, x: f64) -> f64 {
        (self.killing)(t, x)
    }

    /// Sample all coefficients on the grid and check ellipticity and `V >= 0`.
    pub fn tabulate(&self, g: &SpaceTimeGrid) -> Result<PriorTables> {
        self.tabulate_with(g, Execution::default())
    }

    pub fn tabulate_with(&self, g: &SpaceTimeGrid, exec: Execution) -> Result<PriorTables> {
        let drift = sample_with(|t, x| self.drift(t, x), g, exec).map_err(model_err)?;
        let sigma = sample_with(|t, x| self.sigma(t, x), g, exec).map_err(model_err)?;
        let killing = sample_with(|t, x| self.killing(t, x), g, exec).map_err(model_err)?;
        for k in 0..g.nt() {
            for i in 0..g.nx() {
                if sigma.get(k, i).abs() < SIGMA_MIN {
                    return Err(Error::Model(format!(
                        "ellipticity violated: sigma = {} at {}",
                        sigma.get(k, i),
                        g.locus(k, i)
                    )));
                }
                if killing.get(k, i) < 0.0 {
                    return Err(Error::Model(format!(
                        "negative killing rate {} at {}",
                        killing.get(k, i),
                        g.locus(k, i)
                    )));
                }
            }
        }
        let a = sigma.map(|s| s * s);
        Ok(PriorTables {
            drift,
            sigma,
            a,
            killing,
        })
    }
}

fn model_err(e: Error) -> Error {
    match e {
        Error::Input(msg) => Error::Model(msg),
        other => other,
    }
}

/// Prior coefficients tabulated on the grid.
#[derive(Debug, Clone)]
pub struct PriorTables {
    pub drift: SpaceTimeField,
    pub sigma: SpaceTimeField,
    pub a: SpaceTimeField,
    pub killing: SpaceTimeField,
}

/// Discrete generator at one time node.
#[derive(Debug, Clone)]
pub struct GeneratorSnapshot {
    /// `W^-1 A - V`: right-hand side of the forward (Fokker-Planck) equation.
    pub forward: Tridiag,
    /// `W^-1 A^T - V`: the trapezoid-adjoint, acting on test functions.
    pub backward: Tridiag,
    /// The killing rate on this row.
    pub killing: Vec<f64>,
    /// Faces where central advection would break monotonicity.
    pub upwind_faces: usize,
}

impl GeneratorSnapshot {
    /// The advection-diffusion part of the forward operator (no killing).
    pub fn transport(&self) -> Tridiag {
        let mut t = self.forward.clone();
        for (d, v) in t.diag.iter_mut().zip(&self.killing) {
            *d += v;
        }
        t
    }
}

/// Assemble the generator at time node `k`.
pub fn assemble(prior: &PriorSpec, g: &SpaceTimeGrid, k: usize) -> Result<GeneratorSnapshot> {
    if k >= g.nt() {
        return Err(Error::Input(format!("time index {k} outside 0..{}", g.nt())));
    }
    let t = g.t(k);
    let mut b = Vec::with_capacity(g.nx());
    let mut a = Vec::with_capacity(g.nx());
    let mut v = Vec::with_capacity(g.nx());
    for i in 0..g.nx() {
        let x = g.x(i);
        let s = prior.sigma(t, x);
        let kill = prior.killing(t, x);
        let drift = prior.drift(t, x);
        if !(s.is_finite() && kill.is_finite() && drift.is_finite()) {
            return Err(Error::Model(format!("non-finite coefficient at {}", g.locus(k, i))));
        }
        if s.abs() < SIGMA_MIN {
            return Err(Error::Model(format!("ellipticity violated at {}", g.locus(k, i))));
        }
        if kill < 0.0 {
            return Err(Error::Model(format!("negative killing rate at {}", g.locus(k, i))));
        }
        b.push(drift);
        a.push(s * s);
        v.push(kill);
    }
    Ok(assemble_row(&b, &a, &v, g))
}

pub(crate) fn assemble_tables(tables: &PriorTables, g: &SpaceTimeGrid, k: usize) -> GeneratorSnapshot {
    assemble_row(tables.drift.row(k), tables.a.row(k), tables.killing.row(k), g)
}

fn assemble_row(b: &[f64], a: &[f64], v: &[f64], g: &SpaceTimeGrid) -> GeneratorSnapshot {
    let n = g.nx();
    let dx = g.dx();
    let w = g.space_weights();
    let mut flux = Tridiag::zeros(n);
    let mut upwind_faces = 0;
    for i in 0..n - 1 {
        // Flux from node i to node i+1: F = cl * p_i + cr * p_{i+1}.
        let d_left = 0.5 * a[i];
        let d_right = 0.5 * a[i + 1];
        let bf = 0.5 * (b[i] + b[i + 1]);
        let (mut cl, mut cr) = (0.5 * bf + d_left / dx, 0.5 * bf - d_right / dx);
        if cl < 0.0 || cr > 0.0 {
            upwind_faces += 1;
            cl = bf.max(0.0) + d_left / dx;
            cr = bf.min(0.0) - d_right / dx;
        }
        // d(w_i p_i)/dt gains -F, d(w_{i+1} p_{i+1})/dt gains +F.
        flux.diag[i] -= cl;
        flux.upper[i] -= cr;
        flux.lower[i + 1] += cl;
        flux.diag[i + 1] += cr;
    }
    let transposed = flux.transpose();
    let scale = |m: &Tridiag| {
        let mut out = m.clone();
        for i in 0..n {
            out.lower[i] /= w[i];
            out.diag[i] = out.diag[i] / w[i] - v[i];
            out.upper[i] /= w[i];
        }
        out
    };
    GeneratorSnapshot {
        forward: scale(&flux),
        backward: scale(&transposed),
        killing: v.to_vec(),
        upwind_faces,
    }
}

/// The prior transition kernel out of one start node.
#[derive(Debug, Clone)]
pub struct KernelRow {
    /// `r(0, x_i, 1, .)`.
    pub survivor: ScalarField,
    /// `V(t, z) r(0, x_i, t, z)`.
    pub killed: SpaceTimeField,
}

/// Propagate a unit-mass discrete delta at node `i` through the prior.
pub fn kernel_row(prior: &PriorSpec, g: &SpaceTimeGrid, i: usize) -> Result<KernelRow> {
    crate::pde::KolmogorovSolver::new(prior, g)?.kernel_row(i)
}
