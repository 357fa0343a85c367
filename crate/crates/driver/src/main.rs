use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dcpinn::config::{load_config, SolverMode};
use dcpinn::error::DriverError;
use dcpinn::optimize::{run_optimization, Outcome, RunOptions};
use dcpinn::verify::run_suite;

#[derive(Parser)]
#[command(name = "dcpinn", version, about = "Topology optimization with energy-trained neural displacement fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an optimization from a TOML config.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// dcpinn or fem (overrides the config).
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides output.dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Compare every dcpinn cycle with an FEM solve on the same design.
        #[arg(long)]
        verify_fem: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Run verification suites and print one PASS/FAIL line per check.
    Verify {
        /// all, properties, oracles, gradients, sensitivity or pinn.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn config_error(e: DriverError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Solve { config, mode, seed, out, verify_fem, quiet } => {
            let mut run = match load_config(&config) {
                Ok(r) => r,
                Err(e) => return config_error(e),
            };
            if let Some(m) = mode {
                match m.parse::<SolverMode>() {
                    Ok(m) => run.mode = m,
                    Err(e) => return config_error(e),
                }
            }
            if let Some(s) = seed {
                run.problem.opt.seed = s;
            }
            if out.is_some() {
                run.output.dir = out;
            }
            run.verify_fem |= verify_fem;
            let mut opts = RunOptions::from_config(&run);
            opts.verbose = !quiet;
            match run_optimization(&run.problem, &opts) {
                Ok(result) => {
                    let last = result.history.last();
                    match &result.outcome {
                        Outcome::Aborted(why) => eprintln!("aborted: {why}"),
                        other => eprintln!(
                            "{:?} after {} cycles, objective {:.6e}",
                            other,
                            result.history.records.len(),
                            last.map_or(f64::NAN, |r| r.objective)
                        ),
                    }
                    ExitCode::from(result.outcome.exit_code() as u8)
                }
                Err(e @ DriverError::Config(_)) => config_error(e),
                Err(e) => {
                    eprintln!("aborted: {e}");
                    ExitCode::from(2)
                }
            }
        }
        Command::Verify { suite, seed } => match run_suite(&suite, seed) {
            Ok(checks) => {
                let failed = checks.iter().filter(|c| !c.pass).count();
                for c in &checks {
                    println!("{c}");
                }
                println!("{} checks, {} failed", checks.len(), failed);
                if failed == 0 {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(2)
                }
            }
            Err(e) => config_error(e),
        },
    }
}
