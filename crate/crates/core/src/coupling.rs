//! Optimization-based coupling: per-step gradient descent on the interface
//! flux and the transient driver.
//!
//! The objective at time level `n` is
//! `J(g) = ½ (u₁ − u₂, u₁ − u₂)_Γ0 + (δ/2)(g, g)_Γ0`,
//! where `u_i` solves the subdomain state problem driven by `(−1)^i g`.
//! Descent directions are the nodal adjoint trace differences
//! `δ g + μ₁|_Γ0 − μ₂|_Γ0`, i.e. the `L²(Γ0)` gradient.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::fom::CoupledProblem;
use crate::linalg::dot;
use crate::rom::{ReducedAdjoint, ReducedBasis, ReducedState};
use crate::Side;

/// Settings of the descent loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingConfig {
    pub delta: f64,
    pub alpha: f64,
    pub tol: f64,
    pub max_iters: usize,
    /// Consecutive step halvings after which a step is declared stagnated.
    pub max_halvings: usize,
    pub warm_start: bool,
    /// Keep the accepted objective values of every step in the stats.
    pub record_objectives: bool,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self {
            delta: 1e-16,
            alpha: 2.0,
            tol: 1e-14,
            max_iters: 10_000,
            max_halvings: 60,
            warm_start: true,
            record_objectives: false,
        }
    }
}

impl CouplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(invalid(format!("delta must be nonnegative, got {}", self.delta)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(invalid(format!("step size must be positive, got {}", self.alpha)));
        }
        if !(self.tol > 0.0) {
            return Err(invalid(format!("tolerance must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Outcome of the descent loop at one time level.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    /// Number of gradient evaluations (adjoint solve pairs).
    pub iterations: usize,
    pub halvings: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub converged: bool,
    pub stagnated: bool,
    /// Whether every accepted objective was at most its predecessor.
    pub monotone: bool,
    pub seconds: f64,
    pub objectives: Vec<f64>,
}

/// Aggregate statistics of a transient run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub total_iterations: usize,
    pub average_iterations: f64,
    pub max_iterations: usize,
    pub non_converged_steps: usize,
    pub all_monotone: bool,
    pub seconds: f64,
}

impl RunSummary {
    pub fn from_stats(stats: &[StepStats], seconds: f64) -> Self {
        let total: usize = stats.iter().map(|s| s.iterations).sum();
        Self {
            steps: stats.len(),
            total_iterations: total,
            average_iterations: if stats.is_empty() { 0.0 } else { total as f64 / stats.len() as f64 },
            max_iterations: stats.iter().map(|s| s.iterations).max().unwrap_or(0),
            non_converged_steps: stats.iter().filter(|s| !s.converged).count(),
            all_monotone: stats.iter().all(|s| s.monotone),
            seconds,
        }
    }

    pub fn converged(&self) -> bool {
        self.non_converged_steps == 0
    }
}

/// State model of one subdomain.
#[derive(Clone, Debug)]
pub enum StateModel {
    Full,
    Reduced(ReducedState),
}

/// Adjoint model of one subdomain.
#[derive(Clone, Debug)]
pub enum AdjointModel {
    Full,
    Reduced(ReducedAdjoint),
}

/// Model choices for both subdomains.
#[derive(Clone, Debug)]
pub struct Backends {
    pub state: [StateModel; 2],
    pub adjoint: [AdjointModel; 2],
}

impl Backends {
    pub fn full() -> Self {
        Self { state: [StateModel::Full, StateModel::Full], adjoint: [AdjointModel::Full, AdjointModel::Full] }
    }

    /// Reduced models wherever a basis is given, full-order elsewhere.
    pub fn new(
        cp: &CoupledProblem,
        state: [Option<&ReducedBasis>; 2],
        adjoint: [Option<&ReducedBasis>; 2],
    ) -> Result<Self> {
        let mut out = Self::full();
        for side in Side::BOTH {
            let i = side.index();
            if let Some(b) = state[i] {
                out.state[i] = StateModel::Reduced(ReducedState::new(cp.solver(side), cp.interface(), b)?);
            }
            if let Some(b) = adjoint[i] {
                out.adjoint[i] = AdjointModel::Reduced(ReducedAdjoint::new(cp.solver(side), cp.interface(), b)?);
            }
        }
        Ok(out)
    }
}

/// Receives intermediate results of a run. All methods default to no-ops.
pub trait Observer {
    /// Whether `adjoints` should be called; lifting reduced adjoints costs time.
    fn wants_adjoints(&self) -> bool {
        false
    }

    /// Free-DOF adjoints of every gradient evaluation at time level `step`.
    fn adjoints(&mut self, _step: usize, _iteration: usize, _mu: [&[f64]; 2]) {}

    /// Whether `states` should be called after each step.
    fn wants_states(&self) -> bool {
        false
    }

    /// Free-DOF states accepted at time level `step`.
    fn states(&mut self, _step: usize, _u: [&[f64]; 2]) {}
}

/// Observer that ignores everything.
pub struct NoObserver;

impl Observer for NoObserver {}

/// Observer collecting every adjoint pair.
#[derive(Default)]
pub struct AdjointCollector {
    pub columns: [Vec<Vec<f64>>; 2],
}

impl Observer for AdjointCollector {
    fn wants_adjoints(&self) -> bool {
        true
    }

    fn adjoints(&mut self, _step: usize, _iteration: usize, mu: [&[f64]; 2]) {
        for (c, m) in self.columns.iter_mut().zip(mu) {
            c.push(m.to_vec());
        }
    }
}

/// Result of one descent loop.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub control: Vec<f64>,
    /// Model coordinates of the accepted states (free values or reduced coefficients).
    pub states: [Vec<f64>; 2],
    pub stats: StepStats,
}

/// Result of a transient run.
#[derive(Clone, Debug)]
pub struct TransientResult {
    /// Free-DOF states at the final time level.
    pub final_states: [Vec<f64>; 2],
    /// Control at every time level `1..=N`.
    pub controls: Vec<Vec<f64>>,
    pub stats: Vec<StepStats>,
    pub summary: RunSummary,
}

/// Gradient-descent coupling of two subdomain models.
pub struct Coupler<'a> {
    cp: &'a CoupledProblem,
    backends: Backends,
    config: CouplingConfig,
}

impl<'a> Coupler<'a> {
    pub fn new(cp: &'a CoupledProblem, backends: Backends, config: CouplingConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { cp, backends, config })
    }

    pub fn config(&self) -> &CouplingConfig {
        &self.config
    }

    pub fn problem(&self) -> &CoupledProblem {
        self.cp
    }

    /// Initial state in model coordinates.
    pub fn initial_state(&self, side: Side) -> Vec<f64> {
        let u0 = self.cp.solver(side).initial_state(&self.cp.problem);
        match &self.backends.state[side.index()] {
            StateModel::Full => u0,
            StateModel::Reduced(r) => r.project(&u0),
        }
    }

    /// Control-independent right-hand side at level `n` given the previous state.
    pub fn base_rhs(&self, side: Side, n: usize, u_prev: &[f64]) -> Vec<f64> {
        let solver = self.cp.solver(side);
        let forcing = solver.forcing(&self.cp.problem, n);
        match &self.backends.state[side.index()] {
            StateModel::Full => solver.base_rhs(&forcing, u_prev),
            StateModel::Reduced(r) => r.base_rhs(&r.project(&forcing), u_prev),
        }
    }

    pub fn solve_state(&self, side: Side, base: &[f64], g: &[f64]) -> Vec<f64> {
        match &self.backends.state[side.index()] {
            StateModel::Full => {
                self.cp.solver(side).solve_with_control(base, g, self.cp.interface(), &self.cp.interface_mass)
            }
            StateModel::Reduced(r) => r.solve_with_control(base, g),
        }
    }

    /// Free-DOF values of a model state.
    pub fn lift_state(&self, side: Side, u: &[f64]) -> Vec<f64> {
        match &self.backends.state[side.index()] {
            StateModel::Full => u.to_vec(),
            StateModel::Reduced(r) => r.lift(u),
        }
    }

    fn control_trace(&self, side: Side, u: &[f64]) -> Vec<f64> {
        match &self.backends.state[side.index()] {
            StateModel::Full => self.cp.interface().gather(side, u),
            StateModel::Reduced(r) => r.trace(u),
        }
    }

    /// Interface jump `u₁ − u₂` on all interface nodes; endpoint values come
    /// from the Dirichlet data at level `n`.
    pub fn jump(&self, n: usize, u: [&[f64]; 2]) -> Vec<f64> {
        let ends = self.endpoint_jump(n);
        let t1 = self.control_trace(Side::One, u[0]);
        let t2 = self.control_trace(Side::Two, u[1]);
        let mut j = Vec::with_capacity(t1.len() + 2);
        j.push(ends[0]);
        j.extend(t1.iter().zip(&t2).map(|(a, b)| a - b));
        j.push(ends[1]);
        j
    }

    fn endpoint_jump(&self, n: usize) -> [f64; 2] {
        let imap = self.cp.interface();
        let b1 = self.cp.solver(Side::One).dirichlet(&self.cp.problem, n);
        let b2 = self.cp.solver(Side::Two).dirichlet(&self.cp.problem, n);
        let [l1, h1] = imap.endpoint_dirichlet_indices(Side::One);
        let [l2, h2] = imap.endpoint_dirichlet_indices(Side::Two);
        [b1[l1] - b2[l2], b1[h1] - b2[h2]]
    }

    /// `J = ½ jᵀ M_Γ j + (δ/2) gᵀ M_Γ g`.
    pub fn objective_of(&self, jump: &[f64], g: &[f64]) -> f64 {
        objective(&self.cp.interface_mass, jump, g, self.config.delta)
    }

    /// Adjoint traces on the control nodes, and the free-DOF adjoints when `lift`.
    fn adjoint_traces(&self, weighted: &[f64], lift: bool) -> ([Vec<f64>; 2], Option<[Vec<f64>; 2]>) {
        let mut traces: [Vec<f64>; 2] = Default::default();
        let mut lifted: [Vec<f64>; 2] = Default::default();
        for side in Side::BOTH {
            let i = side.index();
            match &self.backends.adjoint[i] {
                AdjointModel::Full => {
                    let mu = self.cp.solver(side).adjoint_solve(weighted, self.cp.interface());
                    traces[i] = self.cp.interface().gather(side, &mu);
                    lifted[i] = mu;
                }
                AdjointModel::Reduced(r) => {
                    let mu_hat = r.solve(weighted);
                    traces[i] = r.trace(&mu_hat);
                    if lift {
                        lifted[i] = r.lift(&mu_hat);
                    }
                }
            }
        }
        (traces, lift.then_some(lifted))
    }

    /// Descent direction `δ g + μ₁|_Γ0 − μ₂|_Γ0` at the state `u`.
    pub fn direction(&self, n: usize, u: [&[f64]; 2], g: &[f64]) -> Vec<f64> {
        let w = self.cp.interface_mass.weighted_jump(&self.jump(n, u));
        let ([t1, t2], _) = self.adjoint_traces(&w, false);
        control_gradient(&t1, &t2, g, self.config.delta)
    }

    /// Objective at level `n` for a given control.
    pub fn evaluate(&self, n: usize, base: [&[f64]; 2], g: &[f64]) -> f64 {
        let u1 = self.solve_state(Side::One, base[0], g);
        let u2 = self.solve_state(Side::Two, base[1], g);
        self.objective_of(&self.jump(n, [&u1, &u2]), g)
    }

    /// Gradient descent at time level `n` from the initial guess `g0`.
    pub fn descent_timestep(
        &self,
        n: usize,
        base: [&[f64]; 2],
        g0: &[f64],
        observer: &mut dyn Observer,
    ) -> Result<StepOutcome> {
        if g0.len() != self.cp.num_control() {
            return Err(mismatch(format!("control of length {}, expected {}", g0.len(), self.cp.num_control())));
        }
        let start = Instant::now();
        let cfg = &self.config;
        let solve = |g: &[f64]| -> ([Vec<f64>; 2], Vec<f64>, f64) {
            let u1 = self.solve_state(Side::One, base[0], g);
            let u2 = self.solve_state(Side::Two, base[1], g);
            let j = self.jump(n, [&u1, &u2]);
            let val = self.objective_of(&j, g);
            ([u1, u2], j, val)
        };
        let mut g = g0.to_vec();
        let (mut u, mut jump, mut val) = solve(&g);
        let mut stats = StepStats {
            step: n,
            initial_objective: val,
            monotone: true,
            ..StepStats::default()
        };
        if cfg.record_objectives {
            stats.objectives.push(val);
        }
        let mut alpha = cfg.alpha;
        let wants = observer.wants_adjoints();
        'outer: loop {
            if val < cfg.tol {
                stats.converged = true;
                break;
            }
            if stats.iterations >= cfg.max_iters {
                break;
            }
            let w = self.cp.interface_mass.weighted_jump(&jump);
            let ([t1, t2], lifted) = self.adjoint_traces(&w, wants);
            stats.iterations += 1;
            if let Some([m1, m2]) = &lifted {
                observer.adjoints(n, stats.iterations, [m1, m2]);
            }
            let mut consecutive = 0;
            loop {
                let shrink = 1.0 - alpha * cfg.delta;
                let g_try: Vec<f64> =
                    g.iter().zip(t1.iter().zip(&t2)).map(|(gi, (a, b))| shrink * gi - alpha * (a - b)).collect();
                let (u_try, j_try, v_try) = solve(&g_try);
                if v_try <= val {
                    stats.monotone &= v_try <= stats.objectives.last().copied().unwrap_or(val);
                    g = g_try;
                    u = u_try;
                    jump = j_try;
                    val = v_try;
                    if cfg.record_objectives {
                        stats.objectives.push(val);
                    }
                    break;
                }
                alpha *= 0.5;
                stats.halvings += 1;
                consecutive += 1;
                if consecutive > cfg.max_halvings {
                    stats.stagnated = true;
                    break 'outer;
                }
            }
        }
        stats.final_objective = val;
        stats.seconds = start.elapsed().as_secs_f64();
        Ok(StepOutcome { control: g, states: u, stats })
    }

    /// Advances all time levels, warm-starting each control from the previous one.
    pub fn run_transient(&self, observer: &mut dyn Observer) -> Result<TransientResult> {
        let start = Instant::now();
        let steps = self.cp.num_steps();
        let mut u = [self.initial_state(Side::One), self.initial_state(Side::Two)];
        let mut g = vec![0.0; self.cp.num_control()];
        let mut controls = Vec::with_capacity(steps);
        let mut stats = Vec::with_capacity(steps);
        let wants_states = observer.wants_states();
        for n in 1..=steps {
            let b1 = self.base_rhs(Side::One, n, &u[0]);
            let b2 = self.base_rhs(Side::Two, n, &u[1]);
            let g0 = if self.config.warm_start { g.clone() } else { vec![0.0; g.len()] };
            let out = self.descent_timestep(n, [&b1, &b2], &g0, observer)?;
            u = out.states;
            g = out.control;
            if wants_states {
                let l1 = self.lift_state(Side::One, &u[0]);
                let l2 = self.lift_state(Side::Two, &u[1]);
                observer.states(n, [&l1, &l2]);
            }
            controls.push(g.clone());
            stats.push(out.stats);
        }
        let final_states = [self.lift_state(Side::One, &u[0]), self.lift_state(Side::Two, &u[1])];
        let summary = RunSummary::from_stats(&stats, start.elapsed().as_secs_f64());
        Ok(TransientResult { final_states, controls, stats, summary })
    }

    /// Compares the Euclidean gradient `M_Γ d` with central differences of `J`
    /// along the unit vectors `directions`. Returns the largest difference
    /// relative to `max_k |∇J_k|`.
    pub fn fd_gradient_check(
        &self,
        n: usize,
        base: [&[f64]; 2],
        g: &[f64],
        eps: f64,
        directions: &[usize],
    ) -> Result<GradientCheck> {
        if !(eps > 0.0) {
            return Err(invalid("finite-difference step must be positive"));
        }
        let u1 = self.solve_state(Side::One, base[0], g);
        let u2 = self.solve_state(Side::Two, base[1], g);
        let d = self.direction(n, [&u1, &u2], g);
        let grad = self.cp.interface_mass.control.matvec(&d);
        let mut analytic = Vec::with_capacity(directions.len());
        let mut fd = Vec::with_capacity(directions.len());
        for &k in directions {
            if k >= g.len() {
                return Err(invalid(format!("direction {k} outside the control space")));
            }
            let mut gp = g.to_vec();
            let mut gm = g.to_vec();
            gp[k] += eps;
            gm[k] -= eps;
            fd.push((self.evaluate(n, base, &gp) - self.evaluate(n, base, &gm)) / (2.0 * eps));
            analytic.push(grad[k]);
        }
        let scale = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = analytic.iter().zip(&fd).map(|(a, f)| (a - f).abs()).fold(0.0, f64::max);
        let max_rel_error = if scale > 0.0 { err / scale } else { err };
        Ok(GradientCheck { analytic, fd, max_rel_error })
    }
}

/// Analytic and finite-difference directional derivatives.
#[derive(Clone, Debug)]
pub struct GradientCheck {
    pub analytic: Vec<f64>,
    pub fd: Vec<f64>,
    pub max_rel_error: f64,
}

/// `½ jᵀ M_Γ,full j + (δ/2) gᵀ M_Γ g`.
pub fn objective(iface: &crate::assembly::InterfaceMass, jump_full: &[f64], g: &[f64], delta: f64) -> f64 {
    let reg = if delta == 0.0 { 0.0 } else { 0.5 * delta * iface.inner(g, g) };
    iface.half_norm_sq(jump_full) + reg
}

/// `δ g + (μ₁ − μ₂)|_Γ0` from the adjoint traces on the control nodes.
pub fn control_gradient(trace1: &[f64], trace2: &[f64], g: &[f64], delta: f64) -> Vec<f64> {
    g.iter().zip(trace1.iter().zip(trace2)).map(|(gi, (a, b))| delta * gi + (a - b)).collect()
}

/// Both sides of `(g̃, μ₁ − μ₂)_Γ0 = (ũ₁ − ũ₂, u₁ − u₂)_Γ0` for full-order
/// states `u`, a flux perturbation `g̃` and sensitivities `ũ_i` solved with
/// zero history and forcing.
pub fn duality_pair(cp: &CoupledProblem, u: [&[f64]; 2], g_tilde: &[f64]) -> (f64, f64) {
    let imap = cp.interface();
    let iface = &cp.interface_mass;
    let t1 = imap.gather(Side::One, u[0]);
    let t2 = imap.gather(Side::Two, u[1]);
    let mut jump = vec![0.0];
    jump.extend(t1.iter().zip(&t2).map(|(a, b)| a - b));
    jump.push(0.0);
    let w = iface.weighted_jump(&jump);
    let mu1 = cp.solver(Side::One).adjoint_solve(&w, imap);
    let mu2 = cp.solver(Side::Two).adjoint_solve(&w, imap);
    let dmu: Vec<f64> = imap.gather(Side::One, &mu1).iter().zip(imap.gather(Side::Two, &mu2)).map(|(a, b)| a - b).collect();
    let lhs = iface.inner(g_tilde, &dmu);
    let zero = |s: Side| vec![0.0; cp.solver(s).num_free()];
    let s1 = cp.solver(Side::One).solve_with_control(&zero(Side::One), g_tilde, imap, iface);
    let s2 = cp.solver(Side::Two).solve_with_control(&zero(Side::Two), g_tilde, imap, iface);
    let ds: Vec<f64> = imap.gather(Side::One, &s1).iter().zip(imap.gather(Side::Two, &s2)).map(|(a, b)| a - b).collect();
    (lhs, dot(&ds, &w))
}
