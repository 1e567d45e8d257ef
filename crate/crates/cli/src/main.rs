use std::path::PathBuf;
use std::process;

use clap::{Args, Parser, Subcommand};
use killbridge_cli::config::{Overrides, Resolved};
use killbridge_cli::{commands, CliError, ExitCode};

/// Schrödinger bridges for killed diffusions.
#[derive(Parser)]
#[command(name = "killbridge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the bridge and write the posterior fields.
    Solve(Common),
    /// Check survival plus killing mass of the prior kernel.
    CheckKernel(Common),
    /// Compare discrete Fortet-Sinkhorn with IPF on the matched chain.
    OracleCompare(Common),
    /// Simulate particles under the prior or a solved posterior.
    Simulate(Common),
}

#[derive(Args)]
struct Common {
    /// Built-in problem (`paper-example`).
    #[arg(long)]
    preset: Option<String>,
    /// Problem file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Spatial nodes.
    #[arg(long)]
    nx: Option<usize>,
    /// Time nodes.
    #[arg(long)]
    nt: Option<usize>,
    /// Stopping tolerance on the Hilbert distance.
    #[arg(long)]
    tol: Option<f64>,
    /// Sweep cap.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Particle seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Particle count.
    #[arg(long)]
    particles: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<Resolved, CliError> {
        let over = Overrides {
            preset: self.preset.clone(),
            nx: self.nx,
            nt: self.nt,
            tol: self.tol,
            max_iter: self.max_iter,
            seed: self.seed,
            particles: self.particles,
        };
        Resolved::load(self.config.as_deref(), &over)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (f, common): (fn(&Resolved, &std::path::Path) -> Result<(), CliError>, Common) = match cli.command {
        Command::Solve(c) => (commands::solve, c),
        Command::CheckKernel(c) => (commands::check_kernel, c),
        Command::OracleCompare(c) => (commands::oracle_compare, c),
        Command::Simulate(c) => (commands::simulate, c),
    };
    let cfg = common.resolve()?;
    f(&cfg, &common.out)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            process::exit(if e.use_stderr() { ExitCode::Config as i32 } else { 0 });
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        process::exit(e.exit_code() as i32);
    }
}
