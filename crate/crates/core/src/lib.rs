//! Schrödinger bridges for one-dimensional diffusions with killing.
//!
//! Given a prior diffusion `dX = b dt + sigma dW` killed at rate `V`, an
//! initial density `rho0` and a space-time density `Q` of killed mass, the
//! solver finds the law closest to the prior in relative entropy that matches
//! both. The Fortet-Sinkhorn iteration in [`sinkhorn`] alternates Crank-Nicolson
//! solves of the backward and forward Kolmogorov equations ([`pde`]) on a
//! finite-volume discretization of the generator ([`prior`]). [`posterior`]
//! turns the converged potentials into marginals, a feedback control and a
//! killing rescale; [`particle`] samples the resulting process and
//! [`oracle`] solves small discrete instances by brute force.
//!
//! ```
//! use killbridge::{presets, posterior, sinkhorn::{solve, SolverConfig}};
//!
//! let problem = presets::example_problem(41, 61).unwrap();
//! let (pot, trace) = solve(&problem, &SolverConfig::default()).unwrap();
//! let sol = posterior::assemble(&pot, &problem).unwrap();
//! assert!(trace.final_residual_rho0 < 1e-6);
//! assert!((sol.killed_mass.last().unwrap() - problem.killed_mass()).abs() < 1e-8);
//! ```

pub mod error;
pub mod exec;
pub mod grid;
pub mod oracle;
pub mod particle;
pub mod pde;
pub mod posterior;
pub mod presets;
pub mod prior;
pub mod sinkhorn;
pub mod tridiag;

pub use error::{Error, Locus, Result};
pub use exec::Execution;
pub use grid::{ScalarField, SpaceTimeField, SpaceTimeGrid};
pub use posterior::PosteriorSolution;
pub use prior::PriorSpec;
pub use sinkhorn::{ConvergenceTrace, Potentials, ProblemSpec, SolverConfig};
