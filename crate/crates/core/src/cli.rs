//! Experiment driver behind the `sirk` binary: single runs, perturbed
//! ensembles, CSV output and the tableau dump.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::ddouble::DoubleDouble;
use crate::integrator::{integrate, IntegrationConfig, Method, StatTotals, TrajectoryError, TrajectoryResult};
use crate::linalg::DenseMatrix;
use crate::problems::{
    double_pendulum, harmonic_oscillator, initial_state, DoublePendulum, DoublePendulumParams, HarmonicOscillator,
    OdeSystem, BASE_P, BASE_Q,
};
use crate::tableau::{cached_method, GaussMethod, GaussTableau, TableauError, CACHED_STAGES};

pub const CSV_HEADER: &str = "# sirk-csv v1";

/// Largest tolerated fraction of failed ensemble members.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Problem {
    DoublePendulum,
    Harmonic,
}

impl std::fmt::Display for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Problem::DoublePendulum => "double-pendulum",
            Problem::Harmonic => "harmonic",
        })
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tableau(#[from] TableauError),
    #[error("trajectory failed: {0}")]
    Trajectory(Box<TrajectoryError>),
    #[error("{failed} of {total} trajectories failed")]
    TooManyFailures { failed: usize, total: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: Problem,
    pub k: f64,
    /// Harmonic oscillator frequency.
    pub omega: f64,
    pub stages: usize,
    pub h: f64,
    pub t_end: f64,
    pub sampling: usize,
    pub method: Method,
    pub ensemble: usize,
    pub perturb: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub verify_solves: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: Problem::DoublePendulum,
            k: 0.0,
            omega: 1.0,
            stages: 6,
            h: 2f64.powi(-7),
            t_end: 64.0,
            sampling: 1024,
            method: Method::Newton,
            ensemble: 1,
            perturb: 1e-6,
            seed: 0,
            out: None,
            verify_solves: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::InvalidConfig(m));
        if !(self.h > 0.0 && self.h.is_finite()) {
            return bad(format!("step size must be positive, got {}", self.h));
        }
        if !(self.t_end.is_finite() && self.n_steps() >= 1) {
            return bad(format!("t_end = {} must be at least h = {}", self.t_end, self.h));
        }
        if self.sampling == 0 {
            return bad("sampling interval must be at least 1".into());
        }
        if self.ensemble == 0 {
            return bad("ensemble size must be at least 1".into());
        }
        if self.stages == 0 || self.stages > CACHED_STAGES {
            return bad(format!("stages must be in 1..={CACHED_STAGES}, got {}", self.stages));
        }
        if !(self.k >= 0.0 && self.k.is_finite()) {
            return bad(format!("spring constant must be non-negative, got {}", self.k));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return bad(format!("omega must be positive, got {}", self.omega));
        }
        if !(self.perturb >= 0.0 && self.perturb.is_finite()) {
            return bad(format!("perturbation scale must be non-negative, got {}", self.perturb));
        }
        Ok(())
    }

    /// Number of uniform steps covering `[0, t_end]`; a ratio within a few
    /// ulps of an integer counts as that integer.
    pub fn n_steps(&self) -> usize {
        let r = self.t_end / self.h;
        if !r.is_finite() || r < 0.0 {
            return 0;
        }
        let n = r.round();
        if (r - n).abs() <= 1e-9 * n.max(1.0) {
            n as usize
        } else {
            r.floor() as usize
        }
    }

    pub fn integration_config(&self) -> IntegrationConfig {
        let mut c = IntegrationConfig::new(self.method, self.h, self.n_steps(), self.sampling);
        c.verify_solves = self.verify_solves;
        c
    }

    pub fn system(&self) -> BenchmarkSystem {
        match self.problem {
            Problem::DoublePendulum => {
                BenchmarkSystem::DoublePendulum(double_pendulum(DoublePendulumParams::with_spring(self.k)))
            }
            Problem::Harmonic => BenchmarkSystem::Harmonic(harmonic_oscillator(self.omega)),
        }
    }

    pub fn initial_state(&self) -> Vec<f64> {
        match self.problem {
            Problem::DoublePendulum => {
                initial_state(&DoublePendulumParams::with_spring(self.k), BASE_Q, BASE_P).to_vec()
            }
            Problem::Harmonic => vec![1.0, 0.0],
        }
    }

    fn describe(&self) -> String {
        let mut s = format!("# problem={}", self.problem);
        match self.problem {
            Problem::DoublePendulum => write!(s, " k={}", self.k).unwrap(),
            Problem::Harmonic => write!(s, " omega={}", self.omega).unwrap(),
        }
        write!(
            s,
            " stages={} h={} steps={} sampling={} method={}",
            self.stages,
            self.h,
            self.n_steps(),
            self.sampling,
            self.method
        )
        .unwrap();
        if self.ensemble > 1 {
            write!(s, " ensemble={} perturb={} seed={}", self.ensemble, self.perturb, self.seed).unwrap();
        }
        s
    }
}

/// The systems selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BenchmarkSystem {
    DoublePendulum(DoublePendulum),
    Harmonic(HarmonicOscillator),
}

impl OdeSystem for BenchmarkSystem {
    fn dim(&self) -> usize {
        match self {
            Self::DoublePendulum(s) => s.dim(),
            Self::Harmonic(s) => s.dim(),
        }
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        match self {
            Self::DoublePendulum(s) => s.rhs(t, y, dy),
            Self::Harmonic(s) => s.rhs(t, y, dy),
        }
    }

    fn jacobian(&self, t: f64, y: &[f64], jac: &mut DenseMatrix) {
        match self {
            Self::DoublePendulum(s) => s.jacobian(t, y, jac),
            Self::Harmonic(s) => s.jacobian(t, y, jac),
        }
    }

    fn energy(&self, y: &[f64]) -> Option<f64> {
        match self {
            Self::DoublePendulum(s) => s.energy(y),
            Self::Harmonic(s) => s.energy(y),
        }
    }

    fn energy_extended(&self, y: &[f64], e: &[f64]) -> Option<DoubleDouble> {
        match self {
            Self::DoublePendulum(s) => s.energy_extended(y, e),
            Self::Harmonic(s) => s.energy_extended(y, e),
        }
    }
}

/// `x` with the full binary precision, e.g. `0x1.8p+1` for 3.
pub fn hex_float(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    let sign = if x.is_sign_negative() { "-" } else { "" };
    if x.is_infinite() {
        return format!("{sign}inf");
    }
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i64;
    let mut frac = bits & ((1u64 << 52) - 1);
    if biased == 0 && frac == 0 {
        return format!("{sign}0x0.0p+0");
    }
    let (lead, exp) = if biased == 0 {
        // Subnormal: normalise so the leading digit is 1.
        let shift = frac.leading_zeros() as i64 - 11;
        frac = (frac << shift) & ((1u64 << 52) - 1);
        (1, -1022 - shift)
    } else {
        (1, biased - 1023)
    };
    let mut digits = format!("{frac:013x}");
    while digits.len() > 1 && digits.ends_with('0') {
        digits.pop();
    }
    format!("{sign}0x{lead}.{digits}p{exp:+}")
}

fn hex_list(v: &[f64]) -> String {
    v.iter().map(|&x| hex_float(x)).collect::<Vec<_>>().join(" ")
}

/// Readable report of a tableau and its decomposition, ending with the
/// bitwise symplecticity verdict.
pub fn dump_tableau(s: usize) -> Result<String, TableauError> {
    let method = cached_method(s)?;
    Ok(format_tableau(method))
}

fn format_tableau(method: &GaussMethod) -> String {
    let t: &GaussTableau = &method.tableau;
    let d = &method.decomposition;
    let mut out = String::new();
    writeln!(out, "stages {}", t.stages()).unwrap();
    writeln!(out, "c {}", hex_list(&t.c)).unwrap();
    writeln!(out, "b {}", hex_list(&t.b)).unwrap();
    writeln!(out, "mu").unwrap();
    for i in 0..t.stages() {
        writeln!(out, "  {}", hex_list(t.mu.row(i))).unwrap();
    }
    writeln!(out, "sigma {}", hex_list(&d.sigma)).unwrap();
    writeln!(out, "alpha {}", hex_list(&d.alpha)).unwrap();
    let verdict = match t.mu_violation() {
        None => "PASS".to_string(),
        Some((i, j)) => format!("FAIL at ({}, {})", i + 1, j + 1),
    };
    writeln!(out, "symplecticity {verdict}").unwrap();
    out
}

/// Ordinary least squares fit `y ≈ intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope (residual variance on `n − 2` dof).
    pub slope_stderr: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    assert!(n >= 3, "a fit with standard error needs at least three points");
    let nf = n as f64;
    let mx = compensated_sum(x.iter().copied()) / nf;
    let my = compensated_sum(y.iter().copied()) / nf;
    let sxx = compensated_sum(x.iter().map(|&a| (a - mx) * (a - mx)));
    let sxy = compensated_sum(x.iter().zip(y).map(|(&a, &b)| (a - mx) * (b - my)));
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss = compensated_sum(x.iter().zip(y).map(|(&a, &b)| {
        let r = b - intercept - slope * a;
        r * r
    }));
    LinearFit { slope, intercept, slope_stderr: (rss / (nf - 2.0) / sxx).sqrt() }
}

/// Neumaier-compensated sum.
pub fn compensated_sum(it: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in it {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

/// Sample mean and (n − 1)-normalised standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = compensated_sum(values.iter().copied()) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = compensated_sum(values.iter().map(|&v| (v - mean) * (v - mean))) / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct SingleReport {
    pub result: TrajectoryResult,
    pub cpu_time_seconds: f64,
}

impl SingleReport {
    pub fn summary_line(&self) -> String {
        let t = &self.result.totals;
        format!(
            "# summary cpu_time_seconds={:.3} it_per_step={:.4} l_solves_per_step={:.4} max_energy_error={:.6e}",
            self.cpu_time_seconds,
            t.iterations_per_step(),
            t.solves_per_step(),
            self.result.max_energy_error
        )
    }
}

pub fn run_single(cfg: &RunConfig) -> Result<SingleReport, CliError> {
    cfg.validate()?;
    let method = cached_method(cfg.stages)?;
    let sys = cfg.system();
    let y0 = cfg.initial_state();
    let icfg = cfg.integration_config();
    let start = Instant::now();
    let result = integrate(&sys, method, &y0, &icfg).map_err(|e| CliError::Trajectory(Box::new(e)))?;
    Ok(SingleReport { result, cpu_time_seconds: start.elapsed().as_secs_f64() })
}

pub fn write_single_csv<W: Write>(cfg: &RunConfig, report: &SingleReport, mut w: W) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    writeln!(w, "{}", cfg.describe())?;
    writeln!(w, "t,energy_rel_err,mean_iterations,mean_linear_solves")?;
    let r = &report.result;
    for (i, &t) in r.sample_times.iter().enumerate() {
        let err = r.energy_errors.get(i).copied().unwrap_or(f64::NAN);
        let c = &r.cumulative[i];
        writeln!(w, "{t:.16e},{err:.16e},{:.16e},{:.16e}", c.iterations_per_step(), c.solves_per_step())?;
    }
    Ok(())
}

/// Perturbed initial value `y0 · (1 + scale · u)`, `u` uniform in `[−1, 1]`
/// per component; depends only on `(seed, index)`.
pub fn perturbed_initial_state(y0: &[f64], scale: f64, seed: u64, index: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    y0.iter().map(|&v| v * (1.0 + scale * rng.gen_range(-1.0..=1.0))).collect()
}

#[derive(Debug)]
pub struct EnsembleReport {
    pub sample_times: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub completed: usize,
    pub failures: Vec<(usize, TrajectoryError)>,
    pub totals: StatTotals,
    pub max_energy_error: f64,
    pub cpu_time_seconds: f64,
}

impl EnsembleReport {
    pub fn total(&self) -> usize {
        self.completed + self.failures.len()
    }

    pub fn failure_fraction(&self) -> f64 {
        self.failures.len() as f64 / self.total() as f64
    }

    pub fn summary_line(&self) -> String {
        format!(
            "# summary trajectories={} failed={} cpu_time_seconds={:.3} it_per_step={:.4} l_solves_per_step={:.4} max_energy_error={:.6e}",
            self.total(),
            self.failures.len(),
            self.cpu_time_seconds,
            self.totals.iterations_per_step(),
            self.totals.solves_per_step(),
            self.max_energy_error
        )
    }
}

pub fn run_ensemble(cfg: &RunConfig) -> Result<EnsembleReport, CliError> {
    cfg.validate()?;
    if cfg.ensemble < 2 {
        return Err(CliError::InvalidConfig("an ensemble needs at least 2 members".into()));
    }
    let method = cached_method(cfg.stages)?;
    let sys = cfg.system();
    let y0 = cfg.initial_state();
    let icfg = cfg.integration_config();
    let start = Instant::now();
    let runs: Vec<Result<TrajectoryResult, TrajectoryError>> = (0..cfg.ensemble)
        .into_par_iter()
        .map(|j| integrate(&sys, method, &perturbed_initial_state(&y0, cfg.perturb, cfg.seed, j as u64), &icfg))
        .collect();
    let cpu_time_seconds = start.elapsed().as_secs_f64();

    let mut ok = Vec::with_capacity(runs.len());
    let mut failures = Vec::new();
    for (j, r) in runs.into_iter().enumerate() {
        match r {
            Ok(r) => ok.push(r),
            Err(e) => failures.push((j, e)),
        }
    }
    let sample_times = ok.first().map(|r| r.sample_times.clone()).unwrap_or_default();
    let mut mean = Vec::with_capacity(sample_times.len());
    let mut std = Vec::with_capacity(sample_times.len());
    let mut column = Vec::with_capacity(ok.len());
    for i in 0..sample_times.len() {
        column.clear();
        column.extend(ok.iter().filter_map(|r| r.energy_errors.get(i).copied()));
        let (m, s) = if column.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&column) };
        mean.push(m);
        std.push(s);
    }
    let mut totals = StatTotals::default();
    for r in &ok {
        let t = &r.totals;
        totals.steps += t.steps;
        totals.iterations += t.iterations;
        totals.linear_solves += t.linear_solves;
        totals.inner_iterations[0] += t.inner_iterations[0];
        totals.inner_iterations[1] += t.inner_iterations[1];
        totals.jacobian_evaluations += t.jacobian_evaluations;
        totals.max_solve_residual = totals.max_solve_residual.max(t.max_solve_residual);
    }
    let max_energy_error = ok.iter().map(|r| r.max_energy_error).fold(0.0, f64::max);
    Ok(EnsembleReport {
        sample_times,
        mean,
        std,
        completed: ok.len(),
        failures,
        totals,
        max_energy_error,
        cpu_time_seconds,
    })
}

pub fn write_ensemble_csv<W: Write>(cfg: &RunConfig, report: &EnsembleReport, mut w: W) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    writeln!(w, "{}", cfg.describe())?;
    writeln!(w, "t,mean_energy_rel_err,std_energy_rel_err")?;
    for ((t, m), s) in report.sample_times.iter().zip(&report.mean).zip(&report.std) {
        writeln!(w, "{t:.16e},{m:.16e},{s:.16e}")?;
    }
    Ok(())
}

fn open_output(cfg: &RunConfig) -> io::Result<Box<dyn Write>> {
    Ok(match &cfg.out {
        Some(path) => Box::new(io::BufWriter::new(std::fs::File::create(path)?)),
        None => Box::new(io::BufWriter::new(io::stdout().lock())),
    })
}

/// Runs the configured experiment, writing CSV to `--out` (or standard
/// output) and the summary line to standard output.
pub fn execute(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.ensemble > 1 {
        let report = run_ensemble(cfg)?;
        for (j, e) in &report.failures {
            eprintln!("trajectory {j}: {e}");
        }
        {
            let mut w = open_output(cfg)?;
            write_ensemble_csv(cfg, &report, &mut w)?;
            w.flush()?;
        }
        println!("{}", report.summary_line());
        if report.failure_fraction() > MAX_FAILURE_FRACTION {
            return Err(CliError::TooManyFailures { failed: report.failures.len(), total: report.total() });
        }
    } else {
        let report = run_single(cfg)?;
        {
            let mut w = open_output(cfg)?;
            write_single_csv(cfg, &report, &mut w)?;
            w.flush()?;
        }
        println!("{}", report.summary_line());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_float_formatting() {
        assert_eq!(hex_float(0.5), "0x1.0p-1");
        assert_eq!(hex_float(1.0), "0x1.0p+0");
        assert_eq!(hex_float(3.0), "0x1.8p+1");
        assert_eq!(hex_float(-0.1), "-0x1.999999999999ap-4");
        assert_eq!(hex_float(0.0), "0x0.0p+0");
        assert_eq!(hex_float(f64::MIN_POSITIVE / 4.0), "0x1.0p-1024");
        assert_eq!(hex_float(f64::INFINITY), "inf");
    }

    #[test]
    fn dump_reports_pass() {
        let one = dump_tableau(1).unwrap();
        assert!(one.contains("mu\n  0x1.0p-1\n"), "{one}");
        assert!(one.trim_end().ends_with("symplecticity PASS"));
        let six = dump_tableau(6).unwrap();
        let sigma: Vec<&str> = six.lines().find(|l| l.starts_with("sigma")).unwrap().split(' ').skip(1).collect();
        assert_eq!(sigma.len(), 3);
        assert!(six.contains("symplecticity PASS"));
        assert!(matches!(dump_tableau(9), Err(TableauError::UnsupportedStageCount(9))));
    }

    #[test]
    fn step_count_and_validation() {
        let cfg = RunConfig { t_end: 1.0, h: 0.1, ..RunConfig::default() };
        assert_eq!(cfg.n_steps(), 10);
        assert!(cfg.validate().is_ok());
        assert!(RunConfig { t_end: 0.5 * 2f64.powi(-7), ..RunConfig::default() }.validate().is_err());
        assert!(RunConfig { sampling: 0, ..RunConfig::default() }.validate().is_err());
        assert!(RunConfig { stages: 0, ..RunConfig::default() }.validate().is_err());
        assert!(RunConfig { h: -1.0, ..RunConfig::default() }.validate().is_err());
    }

    #[test]
    fn single_step_csv_has_two_rows() {
        let cfg = RunConfig { t_end: 2f64.powi(-7), sampling: 1, ..RunConfig::default() };
        let report = run_single(&cfg).unwrap();
        let mut buf = Vec::new();
        write_single_csv(&cfg, &report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.iter().filter(|l| !l.starts_with('#')).count(), 3);
    }

    #[test]
    fn perturbations_are_small_and_reproducible() {
        let y0 = [1.1, -1.1, 2.7746, 2.7746];
        let a = perturbed_initial_state(&y0, 1e-6, 7, 3);
        assert_eq!(a, perturbed_initial_state(&y0, 1e-6, 7, 3));
        assert_ne!(a, perturbed_initial_state(&y0, 1e-6, 7, 4));
        for (p, v) in a.iter().zip(&y0) {
            assert!(((p - v) / v).abs() <= 1e-6);
        }
    }

    #[test]
    fn small_ensemble_is_deterministic() {
        let cfg = RunConfig { t_end: 0.5, sampling: 8, ensemble: 2, seed: 11, ..RunConfig::default() };
        let csv = |r: &EnsembleReport| {
            let mut buf = Vec::new();
            write_ensemble_csv(&cfg, r, &mut buf).unwrap();
            buf
        };
        let a = run_ensemble(&cfg).unwrap();
        let b = run_ensemble(&cfg).unwrap();
        assert_eq!(csv(&a), csv(&b));
        assert_eq!(a.completed, 2);
        assert_eq!(a.sample_times.len(), cfg.n_steps() / 8 + 1);
    }

    #[test]
    fn least_squares_recovers_line() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let fit = linear_fit(&x, &y);
        assert!((fit.slope + 0.5).abs() < 1e-14);
        assert!((fit.intercept - 2.0).abs() < 1e-13);
        assert!(fit.slope_stderr < 1e-14);
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
