use std::sync::Arc;

use killbridge::pde::KolmogorovSolver;
use killbridge::posterior::{self, fp_residual};
use killbridge::presets;
use killbridge::sinkhorn::{solve, SolverConfig};
use killbridge::PriorSpec;

/// Propagating rho0 under the posterior dynamics reproduces `P = phi phihat`.
#[test]
fn posterior_dynamics_reproduce_marginals() {
    let problem = presets::example_problem(201, 301).unwrap();
    let g = *problem.grid();
    let (pot, _) = solve(&problem, &SolverConfig::default()).unwrap();
    let sol = Arc::new(posterior::assemble(&pot, &problem).unwrap());
    let (s1, s2) = (sol.clone(), sol.clone());
    let base = presets::example_prior();
    let b2 = base.clone();
    let post = PriorSpec::new(
        move |t, x| s1.drift_correction.interpolate(&g, t, x),
        |_, _| presets::EXAMPLE_SIGMA,
        move |t, x| s2.alpha.interpolate(&g, t, x) * b2.killing(t, x),
    );
    let p = KolmogorovSolver::new(&post, &g).unwrap().solve_forward(problem.rho0()).unwrap().phihat;
    let gap = p.max_abs_diff(&sol.p) / sol.p.max();
    assert!(gap < 1e-2, "relative gap {gap:.3e}");
    assert!(fp_residual(&sol, &base, &g).unwrap() < 1e-3);
}

#[test]
fn fp_residual_is_second_order() {
    let residual = |nx, nt| {
        let problem = presets::example_problem(nx, nt).unwrap();
        let (pot, _) = solve(&problem, &SolverConfig::default()).unwrap();
        let sol = posterior::assemble(&pot, &problem).unwrap();
        fp_residual(&sol, problem.prior(), problem.grid()).unwrap()
    };
    let (a, b) = (residual(51, 76), residual(101, 151));
    assert!(a / b > 3.0, "{a:.3e} -> {b:.3e}");
}
