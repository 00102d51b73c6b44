//! One-step maps of the Gauss methods and the fixed-step trajectory driver.
//!
//! A step is carried out on the compensated representation `ỹ + e` of the
//! solution. The Newton variant runs simplified Newton iterations with one
//! common Jacobian, refines the last increment against per-stage Jacobians
//! and finishes with one inexact Newton iteration that accounts for `e`; the
//! fixed-point variant iterates the stage map directly. Newton loops stop on
//! the `fl32` projection of their iterates, fixed-point iteration on the
//! double iterates themselves.

use std::fmt;

use thiserror::Error;

use crate::ddouble::DoubleDouble;
use crate::linalg::DenseMatrix;
use crate::problems::OdeSystem;
use crate::stagesolver::{
    apply_stage_operator, kahan_step, CompensatedState, ConvergenceMonitor, SolveScratch, SolverError,
    StageLinearSolver,
};
use crate::tableau::GaussMethod;

/// Root-finding strategy for the stage equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, clap::ValueEnum)]
pub enum Method {
    Newton,
    FixedPoint,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Newton => "newton",
            Method::FixedPoint => "fixed-point",
        })
    }
}

/// The loop that hit its cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Outer,
    Inner,
    FixedPoint,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Outer => "simplified Newton iteration",
            Phase::Inner => "inner iteration",
            Phase::FixedPoint => "fixed-point iteration",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepError {
    #[error("{phase} did not stop within {cap} iterations")]
    NoConvergence { phase: Phase, cap: usize },
    #[error("{phase} stopped after {iterations} iterations without settling")]
    Diverged { phase: Phase, iterations: usize },
    #[error("stage iterates became non-finite")]
    NonFinite,
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("state has dimension {found}, system has {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IterationLimits {
    pub outer: usize,
    pub inner: usize,
    pub fixed_point: usize,
}

impl Default for IterationLimits {
    fn default() -> Self {
        Self { outer: 50, inner: 30, fixed_point: 200 }
    }
}

/// Work done by one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    /// Newton-like iterations (those of the first substep plus the final
    /// inexact one), or fixed-point iterations.
    pub iterations: usize,
    /// Calls into the structured stage solver.
    pub linear_solves: usize,
    /// Inner refinements in the third and fourth substeps.
    pub inner_iterations: [usize; 2],
    /// Single `d x d` Jacobian evaluations (common one plus stage ones).
    pub jacobian_evaluations: usize,
    /// Largest relative residual of a stage solve; only with verification on.
    pub max_solve_residual: f64,
}

/// A reusable stepping context for one system, method and step size.
pub struct Stepper<'a, S: OdeSystem + ?Sized> {
    sys: &'a S,
    method: &'a GaussMethod,
    h: f64,
    hb: Vec<f64>,
    limits: IterationLimits,
    verify_solves: bool,
    ws: Workspace,
}

struct Workspace {
    s: usize,
    d: usize,
    l: Vec<f64>,
    l_prev: Vec<f64>,
    dl: Vec<f64>,
    corr: Vec<f64>,
    g: Vec<f64>,
    big_g: Vec<f64>,
    op: Vec<f64>,
    stage_y: Vec<f64>,
    f: Vec<f64>,
    j: DenseMatrix,
    jacs: Vec<DenseMatrix>,
    solve: SolveScratch,
    monitor: ConvergenceMonitor,
    fp_monitor: ConvergenceMonitor,
    mix: Vec<f64>,
    jx: Vec<f64>,
}

impl Workspace {
    fn new(s: usize, d: usize) -> Self {
        let n = s * d;
        Self {
            s,
            d,
            l: vec![0.0; n],
            l_prev: vec![0.0; n],
            dl: vec![0.0; n],
            corr: vec![0.0; n],
            g: vec![0.0; n],
            big_g: vec![0.0; n],
            op: vec![0.0; n],
            stage_y: vec![0.0; d],
            f: vec![0.0; d],
            j: DenseMatrix::zeros(d, d),
            jacs: vec![DenseMatrix::zeros(d, d); s],
            solve: SolveScratch::new(s, d),
            monitor: ConvergenceMonitor::new(n),
            fp_monitor: ConvergenceMonitor::full_precision(n),
            mix: vec![0.0; d],
            jx: vec![0.0; d],
        }
    }
}

/// `out = y + Σⱼ μᵢⱼ Lⱼ`, with the small sum formed first.
fn stage_value(mu: &DenseMatrix, y: &[f64], l: &[f64], i: usize, out: &mut [f64]) {
    let d = y.len();
    out.fill(0.0);
    for j in 0..mu.cols() {
        let m = mu[(i, j)];
        for (o, &v) in out.iter_mut().zip(&l[j * d..(j + 1) * d]) {
            *o = m.mul_add(v, *o);
        }
    }
    for (o, &v) in out.iter_mut().zip(y) {
        *o += v;
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Largest accepted `‖last increment‖∞ / ‖L‖∞` when an outer loop stops.
/// The stopping rule also halts diverging iterations; this tells them apart.
pub const SETTLED_TOLERANCE: f64 = 1e-4;

fn settled(increment: impl Iterator<Item = f64>, l: &[f64]) -> bool {
    let inc = increment.fold(0.0f64, |m, v| m.max(v.abs()));
    inc <= SETTLED_TOLERANCE * crate::linalg::vec_norm_inf(l)
}

impl<'a, S: OdeSystem + ?Sized> Stepper<'a, S> {
    pub fn new(sys: &'a S, method: &'a GaussMethod, h: f64) -> Result<Self, StepError> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(StepError::InvalidStep(h));
        }
        let (s, d) = (method.stages(), sys.dim());
        Ok(Self {
            sys,
            method,
            h,
            hb: method.tableau.scaled_weights(h),
            limits: IterationLimits::default(),
            verify_solves: false,
            ws: Workspace::new(s, d),
        })
    }

    pub fn with_limits(mut self, limits: IterationLimits) -> Self {
        self.limits = limits;
        self
    }

    /// Records the residual of every stage solve in [`StepStats::max_solve_residual`].
    pub fn with_solve_verification(mut self, on: bool) -> Self {
        self.verify_solves = on;
        self
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    /// `h bᵢ`, bitwise symmetric.
    pub fn scaled_weights(&self) -> &[f64] {
        &self.hb
    }

    fn check_state(&self, state: &CompensatedState) -> Result<(), StepError> {
        if state.dim() != self.ws.d {
            return Err(StepError::DimensionMismatch { expected: self.ws.d, found: state.dim() });
        }
        if !state.is_finite() {
            return Err(StepError::NonFinite);
        }
        Ok(())
    }

    pub fn step(&mut self, method: Method, state: &mut CompensatedState, t: f64) -> Result<StepStats, StepError> {
        match method {
            Method::Newton => self.newton_step(state, t),
            Method::FixedPoint => self.fixed_point_step(state, t),
        }
    }

    /// Residuals `gᵢ = h bᵢ f(t + cᵢh, ỹ + Σμᵢⱼ Lⱼ) − Lᵢ` at `l_prev` into `g`.
    fn residuals(&mut self, y: &[f64], t: f64) -> Result<(), StepError> {
        let ws = &mut self.ws;
        let tab = &self.method.tableau;
        let d = ws.d;
        for i in 0..ws.s {
            stage_value(&tab.mu, y, &ws.l_prev, i, &mut ws.stage_y);
            self.sys.rhs(t + tab.c[i] * self.h, &ws.stage_y, &mut ws.f);
            let (gi, li) = (&mut ws.g[i * d..(i + 1) * d], &ws.l_prev[i * d..(i + 1) * d]);
            for ((g, &f), &l) in gi.iter_mut().zip(&ws.f).zip(li) {
                *g = self.hb[i].mul_add(f, -l);
            }
        }
        if all_finite(&ws.g) {
            Ok(())
        } else {
            Err(StepError::NonFinite)
        }
    }

    fn solve(
        &mut self,
        solver: &StageLinearSolver<'_>,
        rhs: Rhs,
        out: Out,
        stats: &mut StepStats,
    ) -> Result<(), StepError> {
        let ws = &mut self.ws;
        let g = match rhs {
            Rhs::G => &ws.g,
            Rhs::BigG => &ws.big_g,
        };
        let dst = match out {
            Out::Dl => &mut ws.dl,
            Out::Corr => &mut ws.corr,
        };
        solver.solve_into(g, dst, &mut ws.solve)?;
        stats.linear_solves += 1;
        if self.verify_solves {
            let res = solver.residual(&self.method.tableau.mu, &self.hb, dst, g);
            let scale = crate::linalg::vec_norm_inf(g).max(f64::MIN_POSITIVE);
            stats.max_solve_residual = stats.max_solve_residual.max(res / scale);
        }
        if all_finite(dst) {
            Ok(())
        } else {
            Err(StepError::NonFinite)
        }
    }

    /// Refines `dl` against the stage-Jacobian system with right-hand side
    /// `g`. Returns the number of refinements.
    fn inner_iteration(&mut self, solver: &StageLinearSolver<'_>, stats: &mut StepStats) -> Result<usize, StepError> {
        self.ws.monitor.reset();
        self.ws.monitor.observe(&self.ws.dl);
        let mut ell = 0;
        loop {
            ell += 1;
            if ell > self.limits.inner {
                return Err(StepError::NoConvergence { phase: Phase::Inner, cap: self.limits.inner });
            }
            {
                let ws = &mut self.ws;
                let jacs: Vec<&DenseMatrix> = ws.jacs.iter().collect();
                apply_stage_operator(&self.method.tableau.mu, &self.hb, &jacs, &ws.dl, &mut ws.op, &mut ws.mix, &mut ws.jx);
                for ((bg, &g), &o) in ws.big_g.iter_mut().zip(&ws.g).zip(&ws.op) {
                    *bg = g - o;
                }
            }
            self.solve(solver, Rhs::BigG, Out::Corr, stats)?;
            let ws = &mut self.ws;
            for (d, &c) in ws.dl.iter_mut().zip(&ws.corr) {
                *d += c;
            }
            if !ws.monitor.observe(&ws.dl) {
                return Ok(ell);
            }
        }
    }

    /// One step of the Newton-based implementation; `state` is updated only
    /// on success.
    pub fn newton_step(&mut self, state: &mut CompensatedState, t: f64) -> Result<StepStats, StepError> {
        self.check_state(state)?;
        let mut stats = StepStats::default();
        let (s, d) = (self.ws.s, self.ws.d);
        let h = self.h;
        let method = self.method;
        let tab = &method.tableau;

        self.sys.jacobian(t + 0.5 * h, &state.y, &mut self.ws.j);
        stats.jacobian_evaluations += 1;
        let solver = StageLinearSolver::new(&self.ws.j, h, &method.decomposition)?;

        // Simplified Newton from L = 0.
        self.ws.l.fill(0.0);
        self.ws.monitor.reset();
        self.ws.monitor.observe(&self.ws.l);
        loop {
            stats.iterations += 1;
            if stats.iterations > self.limits.outer {
                return Err(StepError::NoConvergence { phase: Phase::Outer, cap: self.limits.outer });
            }
            std::mem::swap(&mut self.ws.l_prev, &mut self.ws.l);
            self.residuals(&state.y, t)?;
            self.solve(&solver, Rhs::G, Out::Dl, &mut stats)?;
            let ws = &mut self.ws;
            for ((l, &lp), &dl) in ws.l.iter_mut().zip(&ws.l_prev).zip(&ws.dl) {
                *l = lp + dl;
            }
            if !ws.monitor.observe(&ws.l) {
                break;
            }
        }
        if !settled(self.ws.dl.iter().copied(), &self.ws.l) {
            return Err(StepError::Diverged { phase: Phase::Outer, iterations: stats.iterations });
        }

        // Stage Jacobians at the converged stage values.
        for i in 0..s {
            let ws = &mut self.ws;
            stage_value(&tab.mu, &state.y, &ws.l, i, &mut ws.stage_y);
            self.sys.jacobian(t + tab.c[i] * h, &ws.stage_y, &mut ws.jacs[i]);
            if !ws.jacs[i].is_finite() {
                return Err(StepError::NonFinite);
            }
        }
        stats.jacobian_evaluations += s;

        // Refine the last increment, then L = L_prev + ΔL.
        stats.inner_iterations[0] = self.inner_iteration(&solver, &mut stats)?;
        {
            let ws = &mut self.ws;
            for ((l, &lp), &dl) in ws.l.iter_mut().zip(&ws.l_prev).zip(&ws.dl) {
                *l = lp + dl;
            }
            std::mem::swap(&mut ws.l_prev, &mut ws.l);
        }

        // Final inexact iteration, with e entering through h bᵢ Jᵢ e.
        stats.iterations += 1;
        self.residuals(&state.y, t)?;
        {
            let ws = &mut self.ws;
            for i in 0..s {
                ws.jacs[i].matvec_into(&state.e, &mut ws.jx);
                for (g, &v) in ws.g[i * d..(i + 1) * d].iter_mut().zip(&ws.jx) {
                    *g = self.hb[i].mul_add(v, *g);
                }
            }
        }
        self.solve(&solver, Rhs::G, Out::Dl, &mut stats)?;
        stats.inner_iterations[1] = self.inner_iteration(&solver, &mut stats)?;

        let ws = &self.ws;
        let mut delta = state.e.clone();
        for i in 0..s {
            for (dv, &x) in delta.iter_mut().zip(&ws.dl[i * d..(i + 1) * d]) {
                *dv += x;
            }
        }
        state.e = delta;
        kahan_step(state, ws.l_prev.chunks_exact(d));
        Ok(stats)
    }

    /// One step of the fixed-point implementation; `state` is updated only
    /// on success.
    pub fn fixed_point_step(&mut self, state: &mut CompensatedState, t: f64) -> Result<StepStats, StepError> {
        self.check_state(state)?;
        let mut stats = StepStats::default();
        let (s, d) = (self.ws.s, self.ws.d);
        let tab = &self.method.tableau;
        let ws = &mut self.ws;

        ws.l.fill(0.0);
        ws.fp_monitor.reset();
        ws.fp_monitor.observe(&ws.l);
        loop {
            stats.iterations += 1;
            if stats.iterations > self.limits.fixed_point {
                return Err(StepError::NoConvergence { phase: Phase::FixedPoint, cap: self.limits.fixed_point });
            }
            std::mem::swap(&mut ws.l_prev, &mut ws.l);
            for i in 0..s {
                stage_value(&tab.mu, &state.y, &ws.l_prev, i, &mut ws.stage_y);
                self.sys.rhs(t + tab.c[i] * self.h, &ws.stage_y, &mut ws.f);
                for (l, &f) in ws.l[i * d..(i + 1) * d].iter_mut().zip(&ws.f) {
                    *l = self.hb[i] * f;
                }
            }
            if !all_finite(&ws.l) {
                return Err(StepError::NonFinite);
            }
            if !ws.fp_monitor.observe(&ws.l) {
                break;
            }
        }
        if !settled(ws.l.iter().zip(&ws.l_prev).map(|(a, b)| a - b), &ws.l) {
            return Err(StepError::Diverged { phase: Phase::FixedPoint, iterations: stats.iterations });
        }

        let mut delta = state.e.clone();
        for (k, (&l, &lp)) in ws.l.iter().zip(&ws.l_prev).enumerate() {
            delta[k % d] += l - lp;
        }
        state.e = delta;
        kahan_step(state, ws.l_prev.chunks_exact(d));
        Ok(stats)
    }
}

#[derive(Clone, Copy)]
enum Rhs {
    G,
    BigG,
}

#[derive(Clone, Copy)]
enum Out {
    Dl,
    Corr,
}

/// One Newton-based step from `state` at time `t`; see [`Stepper::newton_step`].
pub fn newton_step<S: OdeSystem + ?Sized>(
    sys: &S,
    method: &GaussMethod,
    state: &CompensatedState,
    t: f64,
    h: f64,
) -> Result<(CompensatedState, StepStats), StepError> {
    let mut next = state.clone();
    let stats = Stepper::new(sys, method, h)?.newton_step(&mut next, t)?;
    Ok((next, stats))
}

/// One fixed-point step from `state` at time `t`; see [`Stepper::fixed_point_step`].
pub fn fixed_point_step<S: OdeSystem + ?Sized>(
    sys: &S,
    method: &GaussMethod,
    state: &CompensatedState,
    t: f64,
    h: f64,
) -> Result<(CompensatedState, StepStats), StepError> {
    let mut next = state.clone();
    let stats = Stepper::new(sys, method, h)?.fixed_point_step(&mut next, t)?;
    Ok((next, stats))
}

/// Step statistics summed over a trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StatTotals {
    pub steps: usize,
    pub iterations: usize,
    pub linear_solves: usize,
    pub inner_iterations: [usize; 2],
    pub jacobian_evaluations: usize,
    pub max_solve_residual: f64,
}

impl StatTotals {
    pub fn add(&mut self, s: &StepStats) {
        self.steps += 1;
        self.iterations += s.iterations;
        self.linear_solves += s.linear_solves;
        self.inner_iterations[0] += s.inner_iterations[0];
        self.inner_iterations[1] += s.inner_iterations[1];
        self.jacobian_evaluations += s.jacobian_evaluations;
        self.max_solve_residual = self.max_solve_residual.max(s.max_solve_residual);
    }

    fn per_step(&self, n: usize) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            n as f64 / self.steps as f64
        }
    }

    pub fn iterations_per_step(&self) -> f64 {
        self.per_step(self.iterations)
    }

    pub fn solves_per_step(&self) -> f64 {
        self.per_step(self.linear_solves)
    }

    pub fn inner_per_step(&self) -> [f64; 2] {
        [self.per_step(self.inner_iterations[0]), self.per_step(self.inner_iterations[1])]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationConfig {
    pub method: Method,
    pub h: f64,
    pub n_steps: usize,
    /// Steps between recorded samples.
    pub sampling: usize,
    pub t0: f64,
    pub limits: IterationLimits,
    pub verify_solves: bool,
}

impl IntegrationConfig {
    pub fn new(method: Method, h: f64, n_steps: usize, sampling: usize) -> Self {
        Self { method, h, n_steps, sampling, t0: 0.0, limits: IterationLimits::default(), verify_solves: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryResult {
    pub sample_times: Vec<f64>,
    pub samples: Vec<CompensatedState>,
    /// Signed `(E(tᵢ) − E₀)/E₀` at the samples; empty without a first integral.
    pub energy_errors: Vec<f64>,
    /// `max |(E(tₙ) − E₀)/E₀|` over every step, sampled or not.
    pub max_energy_error: f64,
    pub initial_energy: Option<f64>,
    /// Running totals at each sample.
    pub cumulative: Vec<StatTotals>,
    pub totals: StatTotals,
}

impl TrajectoryResult {
    pub fn abs_energy_errors(&self) -> Vec<f64> {
        self.energy_errors.iter().map(|e| e.abs()).collect()
    }

    pub fn final_state(&self) -> Option<&CompensatedState> {
        self.samples.last()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("step {step} failed: {source}")]
pub struct TrajectoryError {
    /// Zero-based index of the failing step.
    pub step: usize,
    pub source: StepError,
    pub partial: Box<TrajectoryResult>,
}

/// `(E − E₀)/E₀`, or `E − E₀` when `E₀ = 0`.
pub fn relative_energy_error(e: f64, e0: f64) -> f64 {
    if e0 == 0.0 {
        e - e0
    } else {
        (e - e0) / e0.abs()
    }
}

/// Relative energy errors, in double-double arithmetic when the system
/// provides an extended evaluation.
enum EnergyMonitor {
    None,
    Double(f64),
    Extended(DoubleDouble),
}

impl EnergyMonitor {
    fn new<S: OdeSystem + ?Sized>(sys: &S, st: &CompensatedState) -> Self {
        if let Some(e) = sys.energy_extended(&st.y, &st.e) {
            Self::Extended(e)
        } else if let Some(e) = sys.energy(&st.value()) {
            Self::Double(e)
        } else {
            Self::None
        }
    }

    fn initial(&self) -> Option<f64> {
        match self {
            Self::None => None,
            Self::Double(e) => Some(*e),
            Self::Extended(e) => Some(e.to_f64()),
        }
    }

    fn relative_error<S: OdeSystem + ?Sized>(&self, sys: &S, st: &CompensatedState) -> Option<f64> {
        match self {
            Self::None => None,
            Self::Double(e0) => sys.energy(&st.value()).map(|e| relative_energy_error(e, *e0)),
            Self::Extended(e0) => sys.energy_extended(&st.y, &st.e).map(|e| {
                let diff = e - *e0;
                if e0.hi == 0.0 {
                    diff.to_f64()
                } else {
                    (diff / e0.abs()).to_f64()
                }
            }),
        }
    }
}

/// Integrates `n_steps` fixed steps from `y0` and records a sample every
/// `sampling` steps (including the initial point).
pub fn integrate<S: OdeSystem + ?Sized>(
    sys: &S,
    method: &GaussMethod,
    y0: &[f64],
    cfg: &IntegrationConfig,
) -> Result<TrajectoryResult, TrajectoryError> {
    assert!(cfg.n_steps >= 1, "n_steps must be at least 1");
    assert!(cfg.sampling >= 1, "sampling interval must be at least 1");
    let mut state = CompensatedState::new(y0);
    let monitor = EnergyMonitor::new(sys, &state);
    let e0 = monitor.initial();
    let n_samples = cfg.n_steps / cfg.sampling + 1;
    let mut out = TrajectoryResult {
        sample_times: Vec::with_capacity(n_samples),
        samples: Vec::with_capacity(n_samples),
        energy_errors: Vec::with_capacity(if e0.is_some() { n_samples } else { 0 }),
        max_energy_error: 0.0,
        initial_energy: e0,
        cumulative: Vec::with_capacity(n_samples),
        totals: StatTotals::default(),
    };
    let energy_error = |st: &CompensatedState| monitor.relative_error(sys, st);
    let record = |out: &mut TrajectoryResult, st: &CompensatedState, n: usize, err: Option<f64>| {
        out.sample_times.push(cfg.t0 + n as f64 * cfg.h);
        out.samples.push(st.clone());
        if let Some(err) = err {
            out.energy_errors.push(err);
        }
        out.cumulative.push(out.totals);
    };
    record(&mut out, &state, 0, energy_error(&state));

    let fail = |out: TrajectoryResult, step: usize, source: StepError| TrajectoryError {
        step,
        source,
        partial: Box::new(out),
    };
    let mut stepper = match Stepper::new(sys, method, cfg.h) {
        Ok(s) => s.with_limits(cfg.limits).with_solve_verification(cfg.verify_solves),
        Err(e) => return Err(fail(out, 0, e)),
    };
    for n in 0..cfg.n_steps {
        let t = cfg.t0 + n as f64 * cfg.h;
        match stepper.step(cfg.method, &mut state, t) {
            Ok(st) => out.totals.add(&st),
            Err(e) => return Err(fail(out, n, e)),
        }
        let err = energy_error(&state);
        if let Some(err) = err {
            if !err.is_finite() {
                return Err(fail(out, n, StepError::NonFinite));
            }
            out.max_energy_error = out.max_energy_error.max(err.abs());
        }
        if (n + 1) % cfg.sampling == 0 {
            record(&mut out, &state, n + 1, err);
        }
    }
    Ok(out)
}
