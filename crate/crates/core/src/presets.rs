//! Built-in problem instances.
//!
//! `paper-example`: prior `dX = dW/4` with constant killing rate 0.3 on
//! `[0, 1]`, initial density `1 - cos(2 pi x)`, and a killed-mass density
//! `sin(pi z) (1 - cos(3 pi t - pi))` that is switched on only for
//! `t >= 1/3`. Its total killed mass is `4 / (3 pi)`.

use std::f64::consts::PI;

use crate::error::Result;
use crate::grid::{sample, ScalarField, SpaceTimeField, SpaceTimeGrid};
use crate::prior::PriorSpec;
use crate::sinkhorn::ProblemSpec;

pub const EXAMPLE_SIGMA: f64 = 0.25;
pub const EXAMPLE_KILLING: f64 = 0.3;
/// `integral of Q` for the example problem.
pub const EXAMPLE_KILLED_MASS: f64 = 4.0 / (3.0 * PI);

pub fn example_rho0(x: f64) -> f64 {
    if (0.0..=1.0).contains(&x) {
        1.0 - (2.0 * PI * x).cos()
    } else {
        0.0
    }
}

pub fn example_q(t: f64, z: f64) -> f64 {
    if (0.0..=1.0).contains(&z) && (1.0 / 3.0..=1.0).contains(&t) {
        (PI * z).sin() * (1.0 - (3.0 * PI * t - PI).cos())
    } else {
        0.0
    }
}

pub fn example_prior() -> PriorSpec {
    PriorSpec::constant(0.0, EXAMPLE_SIGMA, EXAMPLE_KILLING)
}

pub fn example_grid(nx: usize, nt: usize) -> Result<SpaceTimeGrid> {
    SpaceTimeGrid::unit(nx, nt)
}

/// `rho0` and `Q` of the example problem sampled on any grid.
pub fn example_marginals(g: &SpaceTimeGrid) -> Result<(ScalarField, SpaceTimeField)> {
    let rho0 = ScalarField::from_fn(g, example_rho0);
    // sin(pi z) rounds to ~1e-16 instead of 0 at z = 1; keep the support exact.
    let q = sample(example_q, g)?.map(|v| if v.abs() < 1e-14 { 0.0 } else { v });
    Ok((rho0, q))
}

/// the example problem on the unit square with `nx x nt` nodes.
pub fn example_problem(nx: usize, nt: usize) -> Result<ProblemSpec> {
    let g = example_grid(nx, nt)?;
    let (rho0, q) = example_marginals(&g)?;
    ProblemSpec::new(rho0, q, example_prior(), g)
}

/// Names accepted by [`by_name`].
pub const PRESETS: &[&str] = &["paper-example"];

pub fn by_name(name: &str, nx: usize, nt: usize) -> Option<Result<ProblemSpec>> {
    match name {
        "paper-example" => Some(example_problem(nx, nt)),
        _ => None,
    }
}
