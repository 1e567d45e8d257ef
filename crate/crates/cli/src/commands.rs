//! The four subcommands. Each takes a resolved configuration and an output
//! directory, holds the directory lock for its whole run, and finishes by
//! writing a [`RunManifest`].

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use killbridge::grid::{cumulative_spacetime, integrate_space, integrate_spacetime};
use killbridge::oracle::{self, fs_discrete, ipf_solve, linf, prior_couplings};
use killbridge::particle::{self, Dynamics, PosteriorFields, SimConfig};
use killbridge::pde::KolmogorovSolver;
use killbridge::sinkhorn::{self, ConvergenceTrace};
use killbridge::{posterior, Error as SolverError, ProblemSpec};
use log::info;
use serde_json::json;

use crate::config::Resolved;
use crate::error::{CliError, Result};
use crate::manifest::{OutputLock, RunManifest};
use crate::table;

/// Gap below which `oracle-compare` passes.
pub const ORACLE_GAP: f64 = 1e-8;

struct Run {
    manifest: RunManifest,
    dir: PathBuf,
    clock: Instant,
}

impl Run {
    fn new(command: &str, cfg: &Resolved, dir: &Path) -> Result<Self> {
        Ok(Self {
            manifest: RunManifest::new(command, cfg)?,
            dir: dir.to_path_buf(),
            clock: Instant::now(),
        })
    }

    fn lap(&mut self, phase: &str) {
        let now = Instant::now();
        self.manifest
            .timings
            .insert(phase.to_string(), (now - self.clock).as_secs_f64());
        self.clock = now;
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.outputs.push(name.to_string());
        self.dir.join(name)
    }

    fn json(&mut self, name: &str, value: &serde_json::Value) -> Result<()> {
        let path = self.path(name);
        let text = serde_json::to_string_pretty(value).expect("report serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }

    fn finish(self, summary: serde_json::Value) -> Result<()> {
        let mut manifest = self.manifest;
        manifest.summary = summary;
        let path = manifest.write(&self.dir)?;
        info!("wrote {}", path.display());
        Ok(())
    }
}

fn write_trace(path: &Path, trace: &ConvergenceTrace) -> Result<()> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(f);
    trace.write_csv(&mut w).map_err(|e| CliError::io(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

fn trace_summary(trace: &ConvergenceTrace) -> serde_json::Value {
    json!({
        "termination": format!("{:?}", trace.termination),
        "iterations": trace.iterations(),
        "final_hilbert_distance": trace.records.last().map(|r| r.hilbert_distance),
        "residual_rho0": trace.final_residual_rho0,
        "residual_Q": trace.final_residual_q,
    })
}

/// Solve the bridge and write every field.
pub fn solve(cfg: &Resolved, out: &Path) -> Result<()> {
    let _lock = OutputLock::acquire(out)?;
    let mut run = Run::new("solve", cfg, out)?;
    let problem = cfg.problem()?;
    let g = *problem.grid();
    run.lap("setup");
    let (pot, trace) = match sinkhorn::solve(&problem, &cfg.solver_config()) {
        Ok(r) => r,
        Err(SolverError::NoConvergence { trace }) => {
            run.lap("iterate");
            write_trace(&run.path("trace.csv"), &trace)?;
            run.finish(trace_summary(&trace))?;
            return Err(SolverError::NoConvergence { trace }.into());
        }
        Err(e) => return Err(e.into()),
    };
    run.lap("iterate");
    let sol = posterior::assemble(&pot, &problem)?;
    run.lap("posterior");

    let fields = [
        ("P.csv", &sol.p),
        ("u.csv", &sol.u),
        ("drift_correction.csv", &sol.drift_correction),
        ("alpha.csv", &sol.alpha),
        ("Qhat.csv", &sol.qhat),
        ("phi.csv", &pot.phi),
        ("phihat.csv", &pot.phihat),
        ("Lambda.csv", &pot.lambda),
    ];
    for (name, field) in fields {
        let path = run.path(name);
        table::write_field(&path, field, &g)?;
    }
    write_trace(&run.path("trace.csv"), &trace)?;
    run.lap("write");

    let killed = integrate_spacetime(&sol.qhat, &g)?;
    let mut summary = trace_summary(&trace);
    summary["killed_mass"] = json!(killed);
    summary["survivor_mass_t1"] = json!(sol.survivor_mass.last());
    summary["bookkeeping_defect"] = json!(sol.bookkeeping_defect());
    println!(
        "converged in {} sweeps; residuals {:.3e} (rho0) {:.3e} (Q); killed mass {:.8}",
        trace.iterations(),
        trace.final_residual_rho0,
        trace.final_residual_q,
        killed
    );
    run.finish(summary)
}

/// Prior mass identity: survival plus killing from every start node, and the
/// survivor/killed split of `rho0` over time.
pub fn check_kernel(cfg: &Resolved, out: &Path) -> Result<()> {
    let _lock = OutputLock::acquire(out)?;
    let mut run = Run::new("check-kernel", cfg, out)?;
    let problem = cfg.problem()?;
    let g = *problem.grid();
    let solver = KolmogorovSolver::new(problem.prior(), &g)?;
    let defect = solver.conservation_defect()?;
    let phihat = solver.solve_forward(problem.rho0())?.phihat;
    let rates = problem.prior().tabulate(&g)?.killing;
    let flux = phihat.zip_map(&rates, |r, v| r * v)?;
    let killed = cumulative_spacetime(&flux, &g)?;
    run.lap("solve");

    let path = run.path("kernel_check.csv");
    let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut w = csv::Writer::from_writer(f);
    let csv_err = |e: csv::Error| CliError::Table {
        path: path.clone(),
        message: e.to_string(),
    };
    w.write_record(["k", "t", "survivor", "killed", "total"]).map_err(csv_err)?;
    let mut text = format!("conservation_defect {}\n", table::fmt(defect));
    text += &format!("{:>6} {:>10} {:>14} {:>14} {:>14}\n", "k", "t", "survivor", "killed", "total");
    let mut worst_total: f64 = 0.0;
    for k in 0..g.nt() {
        let s = integrate_space(phihat.row(k), &g)?;
        let c = killed[k];
        worst_total = worst_total.max((s + c - 1.0).abs());
        text += &format!("{k:>6} {:>10.6} {s:>14.10} {c:>14.10} {:>14.10}\n", g.t(k), s + c);
        w.write_record([k.to_string(), table::fmt(g.t(k)), table::fmt(s), table::fmt(c), table::fmt(s + c)])
            .map_err(csv_err)?;
    }
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
    w.flush().map_err(|e| CliError::io(&path, e))?;
    drop(w);
    run.lap("write");

    let bound = cfg.solver.defect_bound;
    let ok = defect < bound;
    run.finish(json!({
        "conservation_defect": defect,
        "defect_bound": bound,
        "max_total_deviation": worst_total,
        "pass": ok,
    }))?;
    if ok {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "conservation defect {defect:.3e} exceeds the bound {bound:.3e}"
        )))
    }
}

/// Discrete Fortet-Sinkhorn against IPF on the chain matched to the
/// configured grid; the continuous solver's gap is reported alongside.
pub fn oracle_compare(cfg: &Resolved, out: &Path) -> Result<()> {
    let _lock = OutputLock::acquire(out)?;
    let mut run = Run::new("oracle-compare", cfg, out)?;
    let problem = cfg.problem()?;
    let g = *problem.grid();
    let required = g.nx() * g.nx() * (g.nt() - 1);
    let budget = cfg.solver.oracle_budget;
    if required > budget {
        return Err(SolverError::Budget { required, budget }.into());
    }
    let (chain, targets) = oracle::matched_instance(&problem)?;
    let (rho_xy, rho_xzt) = prior_couplings(&chain);
    run.lap("setup");
    let tol = cfg.solver.tol;
    let fs = fs_discrete(&chain, &targets, tol)?;
    run.lap("fs_discrete");
    let ipf = ipf_solve(&rho_xy, &rho_xzt, &targets, tol, cfg.solver.max_iter)?;
    run.lap("ipf");
    let gap = fs.gap(&ipf);
    let continuous = continuous_gap(&problem, cfg, &fs)?;
    run.lap("continuous");

    let ok = gap < ORACLE_GAP;
    let report = json!({
        "states": chain.m(),
        "steps": chain.k(),
        "gap_fs_ipf": gap,
        "gap_continuous_fs": continuous,
        "fs": {"iterations": fs.iterations, "objective": fs.objective,
               "residual_rho0": fs.residual_rho0, "residual_Q": fs.residual_q},
        "ipf": {"iterations": ipf.iterations, "objective": ipf.objective,
                "residual_rho0": ipf.residual_rho0, "residual_Q": ipf.residual_q},
        "threshold": ORACLE_GAP,
        "pass": ok,
    });
    run.json("oracle.json", &report)?;
    println!(
        "fs vs ipf gap {gap:.3e} ({} and {} iterations); continuous vs fs {continuous:.3e}",
        fs.iterations, ipf.iterations
    );
    run.finish(report)?;
    if ok {
        Ok(())
    } else {
        Err(CliError::Check(format!("oracle gap {gap:.3e} is not below {ORACLE_GAP:.0e}")))
    }
}

fn continuous_gap(problem: &ProblemSpec, cfg: &Resolved, fs: &oracle::OracleResult) -> Result<f64> {
    let g = problem.grid();
    let (pot, _) = sinkhorn::solve(problem, &cfg.solver_config())?;
    let c = posterior::couplings(&pot, problem.prior(), g)?;
    let (xy, xzt) = oracle::grid_couplings(&c, g);
    Ok(linf(&xy, &fs.pi_xy).max(linf(&xzt, &fs.pi_xzt)))
}

/// Particle simulation under the prior or the solved posterior.
pub fn simulate(cfg: &Resolved, out: &Path) -> Result<()> {
    let _lock = OutputLock::acquire(out)?;
    let mut run = Run::new("simulate", cfg, out)?;
    let problem = cfg.problem()?;
    let g = *problem.grid();
    let dynamics = if cfg.simulate.dynamics == "prior" {
        Dynamics::Prior
    } else {
        Dynamics::Posterior
    };
    let artifacts = match &cfg.simulate.artifacts {
        Some(p) => cfg.resolve_path(p),
        None => out.to_path_buf(),
    };
    let loaded = match dynamics {
        Dynamics::Prior => None,
        Dynamics::Posterior => {
            let dc = table::read_field(&artifacts.join("drift_correction.csv"), &g)?;
            let alpha = table::read_field(&artifacts.join("alpha.csv"), &g)?;
            Some((dc, alpha))
        }
    };
    let fields = loaded.as_ref().map(|(dc, alpha)| PosteriorFields {
        drift_correction: dc,
        alpha,
    });
    run.lap("setup");
    let sim = SimConfig {
        n_particles: cfg.simulate.particles,
        seed: cfg.simulate.seed,
        dynamics,
        substeps: cfg.simulate.substeps,
        ..SimConfig::default()
    };
    let log = particle::simulate_fields(problem.prior(), fields, &g, problem.rho0(), &sim)?;
    run.lap("simulate");
    let (killed_hist, survivors) = particle::empirical_profiles(&log, &g)?;
    table::write_field(&run.path("killed_hist.csv"), &killed_hist, &g)?;
    table::write_profile(&run.path("survivors.csv"), "density", survivors.values(), &g)?;

    let mut report = json!({
        "dynamics": cfg.simulate.dynamics,
        "particles": log.len(),
        "seed": sim.seed,
        "substeps": sim.substeps,
        "killed": log.killed_count(),
        "survived": log.survived_count(),
        "killed_fraction": log.killed_fraction(),
        "first_kill_time": log.first_kill_time(),
    });
    if dynamics == Dynamics::Posterior {
        let target = problem.killed_mass();
        let se = (target * (1.0 - target) / log.len() as f64).sqrt();
        report["target_killed_mass"] = json!(target);
        report["standard_error"] = json!(se);
        report["z_score"] = json!((log.killed_fraction() - target) / se);
    }
    run.json("simulate_report.json", &report)?;
    run.lap("write");
    println!(
        "{} particles, {} killed ({:.6}), {} survived",
        log.len(),
        log.killed_count(),
        log.killed_fraction(),
        log.survived_count()
    );
    run.finish(report)
}
