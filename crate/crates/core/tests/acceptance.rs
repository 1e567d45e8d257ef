//! Acceptance criteria for the solver, one test per criterion. Each test
//! prints a single `PASS` or `FAIL` line with the measured value before
//! asserting.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use killbridge::grid::{integrate_space, integrate_spacetime};
use killbridge::oracle::{self, DiscreteChain, Targets};
use killbridge::particle::{simulate, Dynamics, SimConfig};
use killbridge::pde::conservation_defect;
use killbridge::posterior::{self, fp_residual};
use killbridge::presets::{self, EXAMPLE_KILLED_MASS};
use killbridge::sinkhorn::{solve, solve_from, ConvergenceTrace, Potentials, ProblemSpec, SolverConfig};
use killbridge::{Execution, PosteriorSolution, PriorSpec, ScalarField, SpaceTimeGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NX: usize = 201;
const NT: usize = 301;

struct ExampleRun {
    problem: ProblemSpec,
    pot: Potentials,
    trace: ConvergenceTrace,
    sol: PosteriorSolution,
    elapsed: Duration,
}

fn example() -> &'static ExampleRun {
    static RUN: OnceLock<ExampleRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let problem = presets::example_problem(NX, NT).unwrap();
        let (pot, trace) = solve(&problem, &SolverConfig::default()).unwrap();
        let sol = posterior::assemble(&pot, &problem).unwrap();
        ExampleRun {
            problem,
            pot,
            trace,
            sol,
            elapsed: start.elapsed(),
        }
    })
}

fn report(id: u32, name: &str, ok: bool, detail: String) {
    let line = format!("{} criterion {id} ({name}): {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

#[test]
fn c01_example_constraints() {
    let run = example();
    let sweeps = run.trace.iterations();
    let (r0, rq) = (run.trace.final_residual_rho0, run.trace.final_residual_q);
    let secs = run.elapsed.as_secs_f64();
    let ok = sweeps <= 2000 && r0 < 1e-6 && rq < 1e-6 && secs < 60.0;
    report(
        1,
        "example problem constraints",
        ok,
        format!("{sweeps} sweeps, |P0 - rho0|_1 = {r0:.3e}, |Qhat - Q|_1 = {rq:.3e}, {secs:.2} s"),
    );
    assert!(ok);
}

#[test]
fn c02_killed_mass() {
    let run = example();
    let total = integrate_spacetime(&run.sol.qhat, &run.problem.grid().clone()).unwrap();
    let ok = (total - EXAMPLE_KILLED_MASS).abs() <= 1e-3;
    report(2, "killed mass", ok, format!("{total:.8} vs 4/(3 pi) = {EXAMPLE_KILLED_MASS:.8}"));
    assert!(ok);
}

#[test]
fn c03_delayed_absorption() {
    let run = example();
    let g = run.problem.grid();
    let worst = (0..g.nt())
        .filter(|&k| g.t(k) < 1.0 / 3.0)
        .flat_map(|k| run.sol.alpha.row(k).iter().copied())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let ok = worst == 0.0;
    report(3, "delayed absorption", ok, format!("max |alpha| for t < 1/3 is {worst:e}"));
    assert!(ok);
}

#[test]
fn c04_conservation() {
    let prior = presets::example_prior();
    let coarse = conservation_defect(&prior, &presets::example_grid(NX, NT).unwrap()).unwrap();
    let fine = conservation_defect(&prior, &presets::example_grid(401, 601).unwrap()).unwrap();
    let ratio = coarse / fine;
    // Same measurement with a time-dependent rate, where the defect is not
    // identically zero for the scheme.
    let varying = PriorSpec::new(|_, _| 0.0, |_, _| 0.25, |t, _| 0.3 * (1.0 + (2.0 * PI * t).sin()));
    let vc = conservation_defect(&varying, &presets::example_grid(NX, NT).unwrap()).unwrap();
    let vf = conservation_defect(&varying, &presets::example_grid(401, 601).unwrap()).unwrap();
    let ok = coarse < 1e-6 && ratio >= 3.0;
    report(
        4,
        "conservation identity",
        ok,
        format!(
            "defect {coarse:.3e} at 201x301, {fine:.3e} at 401x601, ratio {ratio:.3}; both are rounding error \
             (phi = 1 is an exact fixed point of the step for constant V); time-varying V: {vc:.3e} -> {vf:.3e}, ratio {:.3}",
            vc / vf
        ),
    );
    assert!(ok);
}

#[test]
fn c05_mass_bookkeeping() {
    let run = example();
    let worst = run.sol.bookkeeping_defect();
    let ok = worst < 1e-5;
    report(5, "mass bookkeeping", ok, format!("max_t |mass_t + killed_t - 1| = {worst:.3e}"));
    assert!(ok);
}

#[test]
fn c06_fokker_planck_residual() {
    let run = example();
    let coarse = fp_residual(&run.sol, run.problem.prior(), run.problem.grid()).unwrap();
    let fine_problem = presets::example_problem(401, 601).unwrap();
    let (pot, _) = solve(&fine_problem, &SolverConfig::default()).unwrap();
    let fine_sol = posterior::assemble(&pot, &fine_problem).unwrap();
    let fine = fp_residual(&fine_sol, fine_problem.prior(), fine_problem.grid()).unwrap();
    let ok = coarse < 1e-3 && fine < coarse;
    report(
        6,
        "posterior Fokker-Planck residual",
        ok,
        format!("{coarse:.3e} at 201x301, {fine:.3e} at 401x601"),
    );
    assert!(ok);
}

#[test]
fn c07_oracle_equivalence() {
    let start = Instant::now();
    let chain = DiscreteChain::random(5, 6, 2024).unwrap();
    let targets = Targets::random_feasible(&chain, 2025);
    let (rho_xy, rho_xzt) = oracle::prior_couplings(&chain);
    let ipf = oracle::ipf_solve(&rho_xy, &rho_xzt, &targets, 1e-14, 100_000).unwrap();
    let fs = oracle::fs_discrete(&chain, &targets, 1e-13).unwrap();
    let discrete_gap = ipf.gap(&fs);

    let problem = presets::example_problem(5, 7).unwrap();
    let (mchain, mtargets) = oracle::matched_instance(&problem).unwrap();
    let mfs = oracle::fs_discrete(&mchain, &mtargets, 1e-13).unwrap();
    let (mxy, mxzt) = oracle::prior_couplings(&mchain);
    let mipf = oracle::ipf_solve(&mxy, &mxzt, &mtargets, 1e-14, 100_000).unwrap();
    let (pot, _) = solve(&problem, &SolverConfig::default()).unwrap();
    let c = posterior::couplings(&pot, problem.prior(), problem.grid()).unwrap();
    let (cxy, cxzt) = oracle::grid_couplings(&c, problem.grid());
    let continuous_gap = oracle::linf(&cxy, &mfs.pi_xy).max(oracle::linf(&cxzt, &mfs.pi_xzt));
    let matched_gap = mipf.gap(&mfs);
    let secs = start.elapsed().as_secs_f64();

    let ok = discrete_gap < 1e-8 && matched_gap < 1e-8 && continuous_gap < 5e-3 && secs < 5.0;
    report(
        7,
        "oracle equivalence",
        ok,
        format!(
            "fs vs ipf {discrete_gap:.3e} (random chain), {matched_gap:.3e} (matched chain); continuous vs chain {continuous_gap:.3e}; {secs:.2} s"
        ),
    );
    assert!(ok);
}

/// `max |dP|, |du|, |dalpha|` between runs started from `phi0 = 1` and `phi0 = 10`.
fn gauge_gap(problem: &ProblemSpec, tol: f64) -> [f64; 3] {
    let cfg = SolverConfig {
        tol_hilbert: tol,
        ..SolverConfig::default()
    };
    let run = |init: f64| {
        let (pot, _) = solve_from(problem, &cfg, &vec![init; problem.grid().nx()]).unwrap();
        posterior::assemble(&pot, problem).unwrap()
    };
    let (a, b) = (run(1.0), run(10.0));
    [a.p.max_abs_diff(&b.p), a.u.max_abs_diff(&b.u), a.alpha.max_abs_diff(&b.alpha)]
}

#[test]
fn c08_gauge_invariance() {
    // Both runs stop within the Hilbert tolerance of the common fixed point, so
    // the comparison is made at a tolerance well below the 1e-10 bound.
    let run = example();
    let loose = gauge_gap(&run.problem, 1e-10);
    let [dp, du, da] = gauge_gap(&run.problem, 1e-13);
    let ok = dp.max(du).max(da) <= 1e-10;
    report(
        8,
        "gauge invariance",
        ok,
        format!(
            "tol 1e-13: |dP| = {dp:.3e}, |du| = {du:.3e}, |dalpha| = {da:.3e} (tol 1e-10: {:.3e}, {:.3e}, {:.3e})",
            loose[0], loose[1], loose[2]
        ),
    );
    assert!(ok);
}

/// A feasible problem with a known solution: random smooth coefficients,
/// random positive `phihat0` and `Lambda`, and the marginals they induce.
fn random_problem(seed: u64) -> ProblemSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = SpaceTimeGrid::unit(41, 61).unwrap();
    let (b0, b1): (f64, f64) = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    let (s0, s1): (f64, f64) = (rng.gen_range(0.2..0.4), rng.gen_range(-0.1..0.1));
    let (v0, v1): (f64, f64) = (rng.gen_range(0.1..0.8), rng.gen_range(0.0..0.5));
    let prior = PriorSpec::new(
        move |t, x| b0 + b1 * (2.0 * PI * x + t).sin(),
        move |_, x| s0 + s1 * x,
        move |t, x| v0 * (1.0 + v1 * (PI * x * t).cos()),
    );
    let solver = killbridge::pde::KolmogorovSolver::new(&prior, &g).unwrap();
    let (c0, c1): (f64, f64) = (rng.gen_range(0.5..2.0), rng.gen_range(1.0..3.0));
    let t_on: f64 = rng.gen_range(0.0..0.5);
    let lambda = killbridge::grid::sample(
        |t, x| if t >= t_on { c0 * (1.0 + 0.5 * (c1 * PI * x).sin()) * (t - t_on) } else { 0.0 },
        &g,
    )
    .unwrap();
    let phihat0: Vec<f64> = (0..g.nx()).map(|_| rng.gen_range(0.2..1.0)).collect();
    let phi = solver.solve_backward(&lambda).unwrap().phi;
    let phihat = solver.solve_forward(&phihat0).unwrap().phihat;
    let rho0: Vec<f64> = phihat0.iter().zip(phi.row(0)).map(|(a, b)| a * b).collect();
    let mass = integrate_space(&rho0, &g).unwrap();
    let q = lambda
        .zip_map(solver.killing(), |l, v| l * v)
        .unwrap()
        .zip_map(&phihat, |a, b| a * b / mass)
        .unwrap();
    let rho0 = ScalarField(rho0.iter().map(|v| v / mass).collect());
    ProblemSpec::new(rho0, q, prior, g).unwrap()
}

/// Sweeps after the first whose Hilbert distance exceeds the previous one.
fn increases(trace: &ConvergenceTrace) -> Vec<(usize, f64, f64)> {
    let d = trace.distances();
    (2..d.len())
        .filter(|&j| d[j] > d[j - 1])
        .map(|j| (j + 1, d[j - 1], d[j]))
        .collect()
}

fn terminal_ratio(trace: &ConvergenceTrace) -> f64 {
    let d = trace.distances();
    d[d.len() - 1] / d[d.len() - 2]
}

#[test]
fn c09_contraction() {
    let mut failures = Vec::new();
    let run = example();
    let mut worst_ratio = terminal_ratio(&run.trace);
    let bad = increases(&run.trace);
    if !bad.is_empty() || worst_ratio >= 1.0 {
        failures.push(format!("example problem: increases {bad:?}, ratio {worst_ratio}"));
    }
    for seed in 0..10 {
        let p = random_problem(seed);
        let (_, trace) = solve(&p, &SolverConfig::default()).unwrap();
        let ratio = terminal_ratio(&trace);
        worst_ratio = worst_ratio.max(ratio);
        let bad = increases(&trace);
        if !bad.is_empty() || ratio >= 1.0 {
            failures.push(format!("random problem {seed}: increases {bad:?}, ratio {ratio}"));
        }
    }
    let ok = failures.is_empty();
    report(
        9,
        "contraction",
        ok,
        if ok {
            format!("Hilbert distances nonincreasing on 11 problems, worst terminal ratio {worst_ratio:.4}")
        } else {
            failures.join("; ")
        },
    );
    assert!(ok);
}

#[test]
fn c10_monte_carlo() {
    let run = example();
    let g = run.problem.grid();
    let n = 100_000;
    let cfg = SimConfig {
        n_particles: n,
        seed: 20240601,
        dynamics: Dynamics::Posterior,
        substeps: 1,
        execution: Execution::default(),
    };
    let post = simulate(run.problem.prior(), Some(&run.sol), g, run.problem.rho0(), &cfg).unwrap();
    let prior_log = simulate(
        run.problem.prior(),
        None,
        g,
        run.problem.rho0(),
        &SimConfig {
            dynamics: Dynamics::Prior,
            ..cfg.clone()
        },
    )
    .unwrap();
    let sd = |p: f64| 3.0 * (p * (1.0 - p) / n as f64).sqrt();
    let kp = post.killed_fraction();
    let early = post.killed().filter(|&(t, _)| t < 1.0 / 3.0).count();
    let prior_p = 1.0 - (-presets::EXAMPLE_KILLING).exp();
    let kq = prior_log.killed_fraction();
    let ok = (kp - EXAMPLE_KILLED_MASS).abs() <= sd(EXAMPLE_KILLED_MASS) && early == 0 && (kq - prior_p).abs() <= sd(prior_p);
    report(
        10,
        "Monte Carlo consistency",
        ok,
        format!(
            "posterior killed {kp:.4} (target {EXAMPLE_KILLED_MASS:.4} +- {:.4}), {early} kills before 1/3; prior killed {kq:.4} (target {prior_p:.4} +- {:.4})",
            sd(EXAMPLE_KILLED_MASS),
            sd(prior_p)
        ),
    );
    assert!(ok);
    let _ = &run.pot;
}
