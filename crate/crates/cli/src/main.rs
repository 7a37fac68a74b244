use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use lanekeep_core::harness::{self, emit_plots, write_outputs, ControllerKind, Scenario};
use lanekeep_core::verify;

#[derive(Parser)]
#[command(name = "lanekeep", version, about = "Adaptive robust MPC lane-keeping simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run closed-loop simulations of a scenario file.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario seed; run k uses seed + k.
        #[arg(long)]
        seed: Option<u64>,
        /// adaptive, nominal or lqr; overrides the scenario.
        #[arg(long)]
        controller: Option<ControllerKind>,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        /// Also write SVG plots of states, inputs and the parameter set.
        #[arg(long)]
        plots: bool,
    },
    /// Run acceptance checks: `all`, a check name or its number.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

fn simulate(
    path: &Path,
    out: &Path,
    seed: Option<u64>,
    controller: Option<ControllerKind>,
    runs: usize,
    plots: bool,
) -> Result<bool> {
    if runs == 0 {
        bail!("--runs must be at least 1");
    }
    let mut base = Scenario::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = seed {
        base.seed = seed;
    }
    if let Some(kind) = controller {
        base.controller = kind;
    }
    let scenarios: Vec<Scenario> = (0..runs as u64)
        .map(|k| Scenario {
            seed: base.seed + k,
            ..base.clone()
        })
        .collect();
    let mut clean = true;
    for (k, (scenario, result)) in scenarios.iter().zip(harness::run_batch(&scenarios)).enumerate() {
        let output = result.with_context(|| format!("run {k} (seed {})", scenario.seed))?;
        let prefix = if runs > 1 { format!("run{k}_") } else { String::new() };
        write_outputs(&output, out, &prefix)?;
        if plots {
            emit_plots(&[&output.trace], scenario, out, &prefix)?;
        }
        let s = &output.summary;
        println!(
            "run {k} seed {} {}: {} steps, {} violating, {} infeasible, {} softened, {} resets, mean solve {:.3} ms",
            scenario.seed,
            output.trace.controller_label(),
            s.steps,
            s.violation_steps,
            s.infeasible_steps,
            s.softened_steps,
            s.resets,
            s.mean_solve_ms
        );
        if let Some(f) = &output.failure {
            println!("  stopped at step {}: {}", f.step, f.reason);
            clean = false;
        }
    }
    Ok(clean)
}

fn verify_suite(name: &str) -> Result<bool> {
    let Some(reports) = verify::run_suite(name) else {
        bail!(
            "unknown suite '{name}'; expected all or one of {}",
            verify::suite_names().join(", ")
        );
    };
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} of {} checks passed", reports.len() - failed, reports.len());
    Ok(failed == 0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            scenario,
            out,
            seed,
            controller,
            runs,
            plots,
        } => simulate(&scenario, &out, seed, controller, runs, plots),
        Command::Verify { suite } => verify_suite(&suite),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
