use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use sirk::cli::{dump_tableau, execute, Problem, RunConfig};
use sirk::integrator::Method;

/// Gauss collocation integrator with structured simplified-Newton solves.
#[derive(Debug, Parser)]
#[command(name = "sirk", version)]
struct Args {
    #[arg(long, value_enum, default_value_t = Problem::DoublePendulum)]
    problem: Problem,
    /// Spring constant of the double pendulum.
    #[arg(long, default_value_t = 0.0, value_parser = parse_real)]
    k: f64,
    /// Frequency of the harmonic oscillator.
    #[arg(long, default_value_t = 1.0, value_parser = parse_real)]
    omega: f64,
    #[arg(long, default_value_t = 6)]
    stages: usize,
    /// Step size; accepts powers such as `2^-7`.
    #[arg(long, default_value = "2^-7", value_parser = parse_real)]
    h: f64,
    #[arg(long, default_value = "2^6", value_parser = parse_real)]
    t_end: f64,
    /// Steps between recorded samples.
    #[arg(long, default_value_t = 1024)]
    sampling: usize,
    #[arg(long, value_enum, default_value_t = Method::Newton)]
    method: Method,
    /// Number of perturbed trajectories; 1 runs a single trajectory.
    #[arg(long, default_value_t = 1)]
    ensemble: usize,
    /// Relative size of the initial-value perturbations.
    #[arg(long, default_value_t = 1e-6, value_parser = parse_real)]
    perturb: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the tableau for the given number of stages and exit.
    #[arg(long, value_name = "STAGES")]
    dump_tableau: Option<usize>,
    /// Check the residual of every stage solve.
    #[arg(long)]
    verify_solves: bool,
}

/// A float, or `base^exponent` with both parts floats.
fn parse_real(s: &str) -> Result<f64, String> {
    let s = s.trim();
    let v = match s.split_once('^') {
        Some((b, e)) => {
            let b: f64 = b.trim().parse().map_err(|e| format!("bad base in {s:?}: {e}"))?;
            let e: f64 = e.trim().parse().map_err(|e| format!("bad exponent in {s:?}: {e}"))?;
            b.powf(e)
        }
        None => s.parse().map_err(|e| format!("bad number {s:?}: {e}"))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{s:?} is not finite"))
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(s) = args.dump_tableau {
        return match dump_tableau(s) {
            Ok(text) => {
                print!("{text}");
                if text.contains("symplecticity PASS") {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::FAILURE
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        };
    }
    let cfg = RunConfig {
        problem: args.problem,
        k: args.k,
        omega: args.omega,
        stages: args.stages,
        h: args.h,
        t_end: args.t_end,
        sampling: args.sampling,
        method: args.method,
        ensemble: args.ensemble,
        perturb: args.perturb,
        seed: args.seed,
        out: args.out,
        verify_solves: args.verify_solves,
    };
    match execute(&cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
