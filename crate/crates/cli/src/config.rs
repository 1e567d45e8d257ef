//! Problem files.
//!
//! ```toml
//! [grid]
//! x_min = 0.0
//! x_max = 1.0
//! nx = 201
//! nt = 301
//!
//! [prior]
//! preset = "paper-example"   # b = 0, sigma = 1/4, V = 0.3
//! killing = "rate.csv"       # a number, or a t,x,value table; overrides the preset
//!
//! [marginals]
//! rho0 = "paper-example"     # preset name or t,x,value table (t = 0 rows)
//! q = "q.csv"
//!
//! [solver]
//! tol = 1e-10
//! max_iter = 10000
//! gauge = "max-phi0"         # or "terminal"
//!
//! [simulate]
//! particles = 100000
//! seed = 0
//! dynamics = "posterior"     # or "prior"
//! ```
//!
//! Table paths are relative to the problem file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use killbridge::sinkhorn::{Gauge, ProblemSpec, SolverConfig};
use killbridge::{presets, PriorSpec, ScalarField, SpaceTimeField, SpaceTimeGrid};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::table;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub grid: GridSection,
    pub prior: PriorSection,
    pub marginals: MarginalsSection,
    pub solver: SolverSection,
    pub simulate: SimulateSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub x_min: Option<f64>,
    pub x_max: Option<f64>,
    pub nx: Option<usize>,
    pub nt: Option<usize>,
}

/// A coefficient: constant or tabulated.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum FieldSource {
    Constant(f64),
    Table(String),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub preset: Option<String>,
    pub drift: Option<FieldSource>,
    pub sigma: Option<FieldSource>,
    pub killing: Option<FieldSource>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginalsSection {
    pub preset: Option<String>,
    pub rho0: Option<String>,
    pub q: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub gauge: Option<String>,
    pub defect_bound: Option<f64>,
    pub oracle_budget: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub particles: Option<usize>,
    pub seed: Option<u64>,
    pub dynamics: Option<String>,
    pub substeps: Option<usize>,
    pub artifacts: Option<String>,
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub nx: Option<usize>,
    pub nt: Option<usize>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub seed: Option<u64>,
    pub particles: Option<usize>,
}

/// Fully resolved settings. Serialized into the manifest and hashed.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub grid: ResolvedGrid,
    pub prior: ResolvedPrior,
    pub marginals: ResolvedMarginals,
    pub solver: ResolvedSolver,
    pub simulate: ResolvedSimulate,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub nt: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedPrior {
    pub drift: FieldSource,
    pub sigma: FieldSource,
    pub killing: FieldSource,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedMarginals {
    pub rho0: String,
    pub q: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedSolver {
    pub tol: f64,
    pub max_iter: usize,
    pub gauge: String,
    pub defect_bound: f64,
    pub oracle_budget: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedSimulate {
    pub particles: usize,
    pub seed: u64,
    pub dynamics: String,
    pub substeps: usize,
    pub artifacts: Option<String>,
}

fn check_preset(field: &str, name: &str) -> Result<()> {
    if presets::PRESETS.contains(&name) {
        Ok(())
    } else {
        Err(CliError::config(
            field,
            format!("unknown preset `{name}` (known: {})", presets::PRESETS.join(", ")),
        ))
    }
}

fn one_of(field: &str, value: String, allowed: &[&str]) -> Result<String> {
    if allowed.contains(&value.as_str()) {
        Ok(value)
    } else {
        Err(CliError::config(field, format!("`{value}` is not one of {}", allowed.join(", "))))
    }
}

fn positive(field: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::config(field, format!("must be a positive number, got {v}")))
    }
}

fn at_least_one(field: &str, v: usize) -> Result<usize> {
    if v >= 1 {
        Ok(v)
    } else {
        Err(CliError::config(field, "must be >= 1"))
    }
}

impl Resolved {
    /// Read `path` (if any) and apply the overrides.
    pub fn load(path: Option<&Path>, over: &Overrides) -> Result<Self> {
        let (file, base_dir) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                let file: ConfigFile =
                    toml::from_str(&text).map_err(|e| CliError::config(p.display().to_string(), e.to_string()))?;
                (file, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None if over.preset.is_some() => (ConfigFile::default(), PathBuf::new()),
            None => return Err(CliError::config("arguments", "give --config PATH or --preset NAME")),
        };
        Self::from_file(file, base_dir, over)
    }

    pub fn from_file(file: ConfigFile, base_dir: PathBuf, over: &Overrides) -> Result<Self> {
        let prior_preset = over.preset.clone().or(file.prior.preset);
        let marg_preset = over.preset.clone().or(file.marginals.preset);
        if let Some(p) = &prior_preset {
            check_preset("prior.preset", p)?;
        }
        if let Some(p) = &marg_preset {
            check_preset("marginals.preset", p)?;
        }
        let from_preset = |field: &str, given: Option<FieldSource>, preset_value: f64| -> Result<FieldSource> {
            match (given, &prior_preset) {
                (Some(v), _) => Ok(v),
                (None, Some(_)) => Ok(FieldSource::Constant(preset_value)),
                (None, None) => Err(CliError::config(format!("prior.{field}"), "missing (and no prior preset)")),
            }
        };
        let prior = ResolvedPrior {
            drift: from_preset("drift", file.prior.drift, 0.0)?,
            sigma: from_preset("sigma", file.prior.sigma, presets::EXAMPLE_SIGMA)?,
            killing: from_preset("killing", file.prior.killing, presets::EXAMPLE_KILLING)?,
        };
        let marginal = |field: &str, given: Option<String>| -> Result<String> {
            match (given, &marg_preset) {
                (Some(v), _) => Ok(v),
                (None, Some(p)) => Ok(p.clone()),
                (None, None) => Err(CliError::config(format!("marginals.{field}"), "missing (and no marginals preset)")),
            }
        };
        let marginals = ResolvedMarginals {
            rho0: marginal("rho0", file.marginals.rho0)?,
            q: marginal("q", file.marginals.q)?,
        };
        let grid = ResolvedGrid {
            x_min: file.grid.x_min.unwrap_or(0.0),
            x_max: file.grid.x_max.unwrap_or(1.0),
            nx: over.nx.or(file.grid.nx).unwrap_or(201),
            nt: over.nt.or(file.grid.nt).unwrap_or(301),
        };
        let solver = ResolvedSolver {
            tol: positive("solver.tol", over.tol.or(file.solver.tol).unwrap_or(1e-10))?,
            max_iter: at_least_one("solver.max_iter", over.max_iter.or(file.solver.max_iter).unwrap_or(10_000))?,
            gauge: one_of(
                "solver.gauge",
                file.solver.gauge.unwrap_or_else(|| "max-phi0".into()),
                &["max-phi0", "terminal"],
            )?,
            defect_bound: positive("solver.defect_bound", file.solver.defect_bound.unwrap_or(1e-6))?,
            oracle_budget: file.solver.oracle_budget.unwrap_or(2_000_000),
        };
        let simulate = ResolvedSimulate {
            particles: at_least_one(
                "simulate.particles",
                over.particles.or(file.simulate.particles).unwrap_or(100_000),
            )?,
            seed: over.seed.or(file.simulate.seed).unwrap_or(0),
            dynamics: one_of(
                "simulate.dynamics",
                file.simulate.dynamics.unwrap_or_else(|| "posterior".into()),
                &["posterior", "prior"],
            )?,
            substeps: at_least_one("simulate.substeps", file.simulate.substeps.unwrap_or(1))?,
            artifacts: file.simulate.artifacts,
        };
        Ok(Self {
            grid,
            prior,
            marginals,
            solver,
            simulate,
            base_dir,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("resolved config serializes")
    }

    pub fn resolve_path(&self, p: &str) -> PathBuf {
        self.base_dir.join(p)
    }

    /// Table files the run reads, in a fixed order.
    pub fn input_files(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for f in [&self.prior.drift, &self.prior.sigma, &self.prior.killing] {
            if let FieldSource::Table(p) = f {
                out.push(self.resolve_path(p));
            }
        }
        for m in [&self.marginals.rho0, &self.marginals.q] {
            if !presets::PRESETS.contains(&m.as_str()) {
                out.push(self.resolve_path(m));
            }
        }
        out
    }

    pub fn grid(&self) -> Result<SpaceTimeGrid> {
        Ok(SpaceTimeGrid::new(self.grid.x_min, self.grid.x_max, self.grid.nx, self.grid.nt)?)
    }

    fn coefficient(&self, source: &FieldSource, g: &SpaceTimeGrid) -> Result<Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>> {
        Ok(match source {
            FieldSource::Constant(c) => {
                let c = *c;
                Arc::new(move |_, _| c)
            }
            FieldSource::Table(p) => {
                let table = table::read_long(&self.resolve_path(p), g, false)?;
                let g = *g;
                Arc::new(move |t, x| table.interpolate(&g, t, x))
            }
        })
    }

    pub fn prior(&self) -> Result<PriorSpec> {
        let g = self.grid()?;
        Ok(PriorSpec::from_coefficients(
            self.coefficient(&self.prior.drift, &g)?,
            self.coefficient(&self.prior.sigma, &g)?,
            self.coefficient(&self.prior.killing, &g)?,
        ))
    }

    pub fn marginals(&self) -> Result<(ScalarField, SpaceTimeField)> {
        let g = self.grid()?;
        let preset = presets::example_marginals(&g)?;
        let rho0 = if presets::PRESETS.contains(&self.marginals.rho0.as_str()) {
            preset.0
        } else {
            table::read_long(&self.resolve_path(&self.marginals.rho0), &g, true)?.scalar(0)
        };
        let q = if presets::PRESETS.contains(&self.marginals.q.as_str()) {
            preset.1
        } else {
            table::read_long(&self.resolve_path(&self.marginals.q), &g, false)?
        };
        Ok((rho0, q))
    }

    pub fn problem(&self) -> Result<ProblemSpec> {
        let (rho0, q) = self.marginals()?;
        Ok(ProblemSpec::new(rho0, q, self.prior()?, self.grid()?)?)
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            tol_hilbert: self.solver.tol,
            max_iter: self.solver.max_iter,
            gauge: if self.solver.gauge == "terminal" {
                Gauge::Terminal
            } else {
                Gauge::MaxPhi0OnSupport
            },
            ..SolverConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Resolved> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| CliError::config("test", e.to_string()))?;
        Resolved::from_file(file, PathBuf::new(), &Overrides::default())
    }

    #[test]
    fn preset_fills_everything() {
        let r = Resolved::load(
            None,
            &Overrides {
                preset: Some("paper-example".into()),
                nx: Some(41),
                ..Overrides::default()
            },
        )
        .unwrap();
        assert_eq!(r.grid.nx, 41);
        assert_eq!(r.grid.nt, 301);
        assert_eq!(r.prior.sigma, FieldSource::Constant(0.25));
        assert_eq!(r.marginals.q, "paper-example");
        assert!(r.input_files().is_empty());
    }

    #[test]
    fn explicit_fields_override_presets() {
        let r = parse("[prior]\npreset = \"paper-example\"\nkilling = 0.5\n[marginals]\npreset = \"paper-example\"\nq = \"q.csv\"\n").unwrap();
        assert_eq!(r.prior.killing, FieldSource::Constant(0.5));
        assert_eq!(r.prior.drift, FieldSource::Constant(0.0));
        assert_eq!(r.input_files(), vec![PathBuf::from("q.csv")]);
    }

    #[test]
    fn diagnostics_name_the_field() {
        let err = parse("[solver]\ntol = -1.0\n[prior]\npreset = \"paper-example\"\n[marginals]\npreset = \"paper-example\"\n")
            .unwrap_err()
            .to_string();
        assert!(err.starts_with("solver.tol"), "{err}");
        let err = parse("[prior]\nsigma = 0.3\n").unwrap_err().to_string();
        assert!(err.starts_with("prior.drift"), "{err}");
        let err = parse("[grid]\nnx = \"many\"\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = parse("[grid]\nnxx = 3\n").unwrap_err().to_string();
        assert!(err.contains("nxx"), "{err}");
        let err = parse("[prior]\npreset = \"nope\"\n").unwrap_err().to_string();
        assert!(err.starts_with("prior.preset"), "{err}");
    }

    #[test]
    fn resolved_echo_round_trips_through_toml() {
        let r = parse("[prior]\npreset = \"paper-example\"\n[marginals]\npreset = \"paper-example\"\n").unwrap();
        let text = r.to_toml();
        assert!(text.contains("[solver]"));
        let value: toml::Value = toml::from_str(&text).unwrap();
        assert_eq!(value["grid"]["nx"].as_integer(), Some(201));
    }
}
