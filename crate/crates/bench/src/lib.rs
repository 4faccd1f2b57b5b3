//! Solid body rotation benchmark and the experiment pipeline behind the `obc`
//! command-line tool.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use obc_core::assembly::AdjointForm;
use obc_core::coupling::{Backends, Coupler, CouplingConfig, Observer, RunSummary, TransientResult};
use obc_core::fom::{CoupledProblem, MonolithicSolver, ProblemSpec, Trajectory};
use obc_core::geometry::{Mesh, Rect};
use obc_core::linalg::dot;
use obc_core::rom::{projection_errors_nested, PodBasis, SnapshotMatrix};
use obc_core::snapshots::{collect_gdra, collect_mgd, split_monolithic_snapshots, MgdConfig};
use obc_core::Side;
use serde::{Deserialize, Serialize};

pub use obc_core::{Error, Result};

/// Time step of the 64×64 benchmark.
pub const ROTATION_DT: f64 = 1.122398e-3;
/// Time step of the 32×32 desk benchmark.
pub const DESK_DT: f64 = 4.489592e-3;

const CYLINDER: ([f64; 2], f64) = ([0.5, 0.75], 0.15);
const SLOT_HALF_WIDTH: f64 = 0.025;
const SLOT_TOP: f64 = 0.85;
const CONE: ([f64; 2], f64) = ([0.5, 0.25], 0.15);
const HILL_CENTER: [f64; 2] = [0.25, 0.5];
const HILL_WIDTH: f64 = 0.05;

/// Notched cylinder, cone and Gaussian hill.
pub fn rotation_initial_condition(x: f64, y: f64) -> f64 {
    let dist = |c: [f64; 2]| ((x - c[0]).powi(2) + (y - c[1]).powi(2)).sqrt();
    let mut v = 0.0;
    let (c, r) = CYLINDER;
    let in_slot = (x - c[0]).abs() < SLOT_HALF_WIDTH && y < SLOT_TOP;
    if dist(c) <= r && !in_slot {
        v += 1.0;
    }
    let (c, r) = CONE;
    let d = dist(c);
    if d <= r {
        v += 1.0 - d / r;
    }
    let d2 = (x - HILL_CENTER[0]).powi(2) + (y - HILL_CENTER[1]).powi(2);
    v + (-d2 / (2.0 * HILL_WIDTH * HILL_WIDTH)).exp()
}

/// Rotation `a = (0.5 − y, x − 0.5)` of the unit square about its center,
/// homogeneous Dirichlet data, no source, split at `x = 0.5`.
pub fn solid_body_rotation_problem(level: usize, nu: f64, dt: f64, final_time: f64) -> Result<ProblemSpec> {
    if level < 2 || level % 2 != 0 {
        return Err(Error::InvalidArgument(format!("mesh level must be even and at least 2, got {level}")));
    }
    let mesh = Mesh::structured(level, level, Rect::unit_square())?;
    let initial = mesh.interpolate(rotation_initial_condition);
    let spec = ProblemSpec {
        mesh,
        interface_x: 0.5,
        nu,
        velocity: Arc::new(|x, y, _| [0.5 - y, x - 0.5]),
        source: Arc::new(|_, _, _| 0.0),
        dirichlet: Arc::new(|_, _, _| 0.0),
        initial,
        dt,
        final_time,
        supg: true,
        adjoint_form: AdjointForm::Transposed,
    };
    spec.validate()?;
    Ok(spec)
}

/// Relative errors of a coupled solution against the monolithic one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub rel_l2: f64,
    /// Full H¹ norm (mass plus stiffness).
    pub rel_h1: f64,
    /// H¹ seminorm (stiffness only).
    pub rel_h1_semi: f64,
}

/// Errors at time level `n` between subdomain free vectors `coupled` and the
/// monolithic free vector `mono`, summed elementwise over both subdomains.
pub fn error_report(
    cp: &CoupledProblem,
    mono: &MonolithicSolver,
    coupled: [&[f64]; 2],
    mono_free: &[f64],
    n: usize,
) -> Result<ErrorReport> {
    let parent = mono.nodal(mono_free, n);
    let (mut e_m, mut e_k, mut r_m, mut r_k) = (0.0, 0.0, 0.0, 0.0);
    for side in Side::BOTH {
        let solver = cp.solver(side);
        let c = coupled[side.index()];
        if c.len() != solver.num_free() {
            return Err(Error::DimensionMismatch(format!(
                "coupled state of length {}, subdomain {} has {} free DOFs",
                c.len(),
                side.number(),
                solver.num_free()
            )));
        }
        let uc = solver.nodal(&cp.problem, c, n);
        let um: Vec<f64> = solver.subdomain().parent_nodes.iter().map(|&p| parent[p]).collect();
        let e: Vec<f64> = uc.iter().zip(&um).map(|(a, b)| a - b).collect();
        let ops = solver.operators();
        e_m += dot(&e, &ops.mass.matvec(&e));
        e_k += dot(&e, &ops.stiffness.matvec(&e));
        r_m += dot(&um, &ops.mass.matvec(&um));
        r_k += dot(&um, &ops.stiffness.matvec(&um));
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { (a.max(0.0) / b).sqrt() } else { a.max(0.0).sqrt() };
    Ok(ErrorReport { rel_l2: ratio(e_m, r_m), rel_h1: ratio(e_m + e_k, r_m + r_k), rel_h1_semi: ratio(e_k, r_k) })
}

/// State model of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum StateChoice {
    Fom,
    Rom(usize),
}

/// Adjoint model of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AdjointChoice {
    Full,
    /// Basis from the state snapshots.
    Sra(usize),
    /// Basis from MGDmRA snapshots with `m` pairs per step.
    Mgd { m: usize, modes: usize },
    /// Basis from GDRA snapshots.
    Gdra(usize),
}

fn parse_modes(s: &str, what: &str) -> Result<usize> {
    let n: usize = s.parse().map_err(|_| Error::InvalidArgument(format!("bad mode count `{s}` in {what}")))?;
    if n == 0 {
        return Err(Error::InvalidArgument(format!("mode count must be positive in {what}")));
    }
    Ok(n)
}

impl FromStr for StateChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "fom" => Ok(Self::Fom),
            Some(("rom", n)) => Ok(Self::Rom(parse_modes(n, s)?)),
            _ => Err(Error::InvalidArgument(format!("state model must be `fom` or `rom:N`, got `{s}`"))),
        }
    }
}

impl fmt::Display for StateChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fom => write!(f, "fom"),
            Self::Rom(n) => write!(f, "rom:{n}"),
        }
    }
}

impl FromStr for AdjointChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Self::Full);
        }
        let bad = || Error::InvalidArgument(format!("adjoint model must be full, sra:N, mgd:N, mgdM:N or gdra:N, got `{s}`"));
        let (head, n) = s.split_once(':').ok_or_else(bad)?;
        let modes = parse_modes(n, s)?;
        match head {
            "sra" => Ok(Self::Sra(modes)),
            "gdra" => Ok(Self::Gdra(modes)),
            "mgd" => Ok(Self::Mgd { m: 1, modes }),
            h if h.starts_with("mgd") => {
                let m = h[3..].parse().ok().filter(|&m| m > 0).ok_or_else(bad)?;
                Ok(Self::Mgd { m, modes })
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for AdjointChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Full => write!(f, "full"),
            Self::Sra(n) => write!(f, "sra:{n}"),
            Self::Mgd { m: 1, modes } => write!(f, "mgd:{modes}"),
            Self::Mgd { m, modes } => write!(f, "mgd{m}:{modes}"),
            Self::Gdra(n) => write!(f, "gdra:{n}"),
        }
    }
}

macro_rules! string_conversions {
    ($t:ty) => {
        impl TryFrom<String> for $t {
            type Error = Error;
            fn try_from(s: String) -> Result<Self> {
                s.parse()
            }
        }
        impl From<$t> for String {
            fn from(v: $t) -> String {
                v.to_string()
            }
        }
    };
}
string_conversions!(StateChoice);
string_conversions!(AdjointChoice);

/// One coupled run of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub state: StateChoice,
    pub adjoint: AdjointChoice,
    /// Overrides of the experiment-wide descent settings.
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub tol: Option<f64>,
}

impl RunSpec {
    pub fn new(state: StateChoice, adjoint: AdjointChoice) -> Self {
        Self { state, adjoint, delta: None, tol: None }
    }

    /// Method label in the style `RS-FA`, `FS-MGD1RA`, `FOM-FOM`.
    pub fn label(&self) -> String {
        let s = match self.state {
            StateChoice::Fom => "FS",
            StateChoice::Rom(_) => "RS",
        };
        match (self.state, self.adjoint) {
            (StateChoice::Fom, AdjointChoice::Full) => "FOM-FOM".into(),
            (_, AdjointChoice::Full) => format!("{s}-FA"),
            (_, AdjointChoice::Sra(_)) => format!("{s}-SRA"),
            (_, AdjointChoice::Mgd { m, .. }) => format!("{s}-MGD{m}RA"),
            (_, AdjointChoice::Gdra(_)) => format!("{s}-GDRA"),
        }
    }

    pub fn state_modes(&self) -> Option<usize> {
        match self.state {
            StateChoice::Fom => None,
            StateChoice::Rom(n) => Some(n),
        }
    }

    pub fn adjoint_modes(&self) -> Option<usize> {
        match self.adjoint {
            AdjointChoice::Full => None,
            AdjointChoice::Sra(n) | AdjointChoice::Gdra(n) | AdjointChoice::Mgd { modes: n, .. } => Some(n),
        }
    }
}

/// Experiment description, usually read from a JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub level: usize,
    pub nu: f64,
    pub dt: f64,
    pub final_time: f64,
    /// Overrides `final_time` with a step count when set.
    pub steps: Option<usize>,
    pub supg: bool,
    pub adjoint_form: AdjointForm,
    pub delta: f64,
    pub tol: f64,
    pub alpha: f64,
    pub max_iters: usize,
    pub warm_start: bool,
    /// Settings of the GDRA collection run.
    pub gdra_delta: f64,
    pub gdra_tol: f64,
    pub runs: Vec<RunSpec>,
    /// Mode counts at which projection errors are tabulated.
    pub projection_modes: Vec<usize>,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            level: 32,
            nu: 1e-5,
            dt: DESK_DT,
            final_time: 2.0 * std::f64::consts::PI,
            steps: None,
            supg: true,
            adjoint_form: AdjointForm::Transposed,
            delta: 1e-16,
            tol: 1e-14,
            alpha: 2.0,
            max_iters: 10_000,
            warm_start: true,
            gdra_delta: 1e-14,
            gdra_tol: 1e-12,
            runs: vec![RunSpec::new(StateChoice::Fom, AdjointChoice::Full)],
            projection_modes: vec![25, 50, 100, 500],
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    /// The 64×64 full-rotation setting.
    pub fn full_rotation() -> Self {
        Self { level: 64, dt: ROTATION_DT, ..Self::default() }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("nu", self.nu), ("dt", self.dt), ("tol", self.tol), ("alpha", self.alpha)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.delta >= 0.0) {
            return Err(Error::InvalidArgument(format!("delta must be nonnegative, got {}", self.delta)));
        }
        let free = self.level / 2 * (self.level - 1);
        for r in &self.runs {
            for m in [r.state_modes(), r.adjoint_modes()].into_iter().flatten() {
                if m > free {
                    return Err(Error::InvalidArgument(format!(
                        "{m} modes exceed the {free} free DOFs of a subdomain"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn problem(&self) -> Result<ProblemSpec> {
        let t = match self.steps {
            Some(n) if n > 0 => n as f64 * self.dt,
            Some(_) => return Err(Error::InvalidArgument("steps must be positive".into())),
            None => self.final_time,
        };
        let mut p = solid_body_rotation_problem(self.level, self.nu, self.dt, t)?;
        p.supg = self.supg;
        p.adjoint_form = self.adjoint_form;
        Ok(p)
    }

    pub fn coupling_config(&self, run: Option<&RunSpec>) -> CouplingConfig {
        CouplingConfig {
            delta: run.and_then(|r| r.delta).unwrap_or(self.delta),
            alpha: self.alpha,
            tol: run.and_then(|r| r.tol).unwrap_or(self.tol),
            max_iters: self.max_iters,
            warm_start: self.warm_start,
            ..CouplingConfig::default()
        }
    }
}

/// One row of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub state_modes: Option<usize>,
    pub adjoint_modes: Option<usize>,
    pub delta: f64,
    pub tol: f64,
    pub rel_l2: f64,
    pub rel_h1: f64,
    pub rel_h1_semi: f64,
    /// Average gradient evaluations per time step, one decimal.
    pub avg_iterations: String,
    pub max_iterations: usize,
    /// False mirrors a starred table entry: some step hit the iteration limit
    /// or stagnated.
    pub converged: bool,
    /// Online wall time of the coupled run; not written to the results table.
    #[serde(skip)]
    pub seconds: f64,
    #[serde(skip)]
    pub summary: RunSummary,
    #[serde(skip)]
    pub error: Option<String>,
}

/// Cached offline data of one problem: the monolithic reference, state
/// snapshots and POD bases.
pub struct Experiment {
    pub spec: BenchmarkSpec,
    pub problem: ProblemSpec,
    pub coupled: CoupledProblem,
    pub mono: MonolithicSolver,
    mono_final: Option<Vec<f64>>,
    state_snapshots: Option<[SnapshotMatrix; 2]>,
    state_pod: Option<Arc<[PodBasis; 2]>>,
    adjoint_pods: HashMap<String, Arc<[PodBasis; 2]>>,
}

impl Experiment {
    pub fn new(spec: BenchmarkSpec) -> Result<Self> {
        spec.validate()?;
        let problem = spec.problem()?;
        let coupled = CoupledProblem::new(&problem)?;
        let mono = MonolithicSolver::new(&problem)?;
        Ok(Self {
            spec,
            problem,
            coupled,
            mono,
            mono_final: None,
            state_snapshots: None,
            state_pod: None,
            adjoint_pods: HashMap::new(),
        })
    }

    pub fn num_steps(&self) -> usize {
        self.problem.num_steps()
    }

    /// Runs the monolithic reference once, keeping the final state and the
    /// per-subdomain state snapshots.
    pub fn ensure_monolithic(&mut self) -> Result<()> {
        if self.state_snapshots.is_some() {
            return Ok(());
        }
        let traj = self.mono.solve();
        self.mono_final = traj.last().map(<[f64]>::to_vec);
        self.state_snapshots = Some(split_monolithic_snapshots(&traj, &self.coupled)?);
        Ok(())
    }

    /// Installs externally computed state snapshots and reference state.
    pub fn set_monolithic(&mut self, snapshots: [SnapshotMatrix; 2], final_state: Vec<f64>) {
        self.state_snapshots = Some(snapshots);
        self.mono_final = Some(final_state);
        self.state_pod = None;
    }

    pub fn monolithic_trajectory(&self) -> Trajectory {
        self.mono.solve()
    }

    pub fn mono_final(&mut self) -> Result<&[f64]> {
        self.ensure_monolithic()?;
        Ok(self.mono_final.as_deref().expect("monolithic run"))
    }

    pub fn state_snapshots(&mut self) -> Result<&[SnapshotMatrix; 2]> {
        self.ensure_monolithic()?;
        Ok(self.state_snapshots.as_ref().expect("monolithic run"))
    }

    pub fn state_pod(&mut self) -> Result<Arc<[PodBasis; 2]>> {
        if let Some(p) = &self.state_pod {
            return Ok(p.clone());
        }
        let [s1, s2] = self.state_snapshots()?;
        let pods = Arc::new([PodBasis::from_snapshots(&s1.data)?, PodBasis::from_snapshots(&s2.data)?]);
        self.state_pod = Some(pods.clone());
        Ok(pods)
    }

    /// MGDmRA snapshots for `m` pairs per step.
    pub fn mgd_snapshots(&mut self, m: usize) -> Result<[SnapshotMatrix; 2]> {
        let cfg = MgdConfig { m, delta: self.spec.delta, alpha: self.spec.alpha, threads: None };
        let states = self.state_snapshots()?.clone();
        collect_mgd(&self.coupled, [&states[0], &states[1]], &cfg)
    }

    pub fn mgd_pod(&mut self, m: usize) -> Result<Arc<[PodBasis; 2]>> {
        let key = format!("mgd{m}");
        if let Some(p) = self.adjoint_pods.get(&key) {
            return Ok(p.clone());
        }
        let [a, b] = self.mgd_snapshots(m)?;
        let pods = Arc::new([PodBasis::from_snapshots(&a.data)?, PodBasis::from_snapshots(&b.data)?]);
        self.adjoint_pods.insert(key, pods.clone());
        Ok(pods)
    }

    /// GDRA snapshots from a full-order coupled run with the GDRA settings.
    pub fn gdra_snapshots(&self) -> Result<([SnapshotMatrix; 2], TransientResult)> {
        let mut cfg = self.spec.coupling_config(None);
        cfg.delta = self.spec.gdra_delta;
        cfg.tol = self.spec.gdra_tol;
        let coupler = Coupler::new(&self.coupled, Backends::full(), cfg)?;
        collect_gdra(&coupler)
    }

    pub fn gdra_pod(&mut self) -> Result<Arc<[PodBasis; 2]>> {
        if let Some(p) = self.adjoint_pods.get("gdra") {
            return Ok(p.clone());
        }
        let ([a, b], _) = self.gdra_snapshots()?;
        let pods = Arc::new([PodBasis::from_snapshots(&a.data)?, PodBasis::from_snapshots(&b.data)?]);
        self.adjoint_pods.insert("gdra".into(), pods.clone());
        Ok(pods)
    }

    pub fn insert_adjoint_pod(&mut self, key: &str, pods: [PodBasis; 2]) {
        self.adjoint_pods.insert(key.into(), Arc::new(pods));
    }

    /// Model backends for a run, computing any missing offline data.
    pub fn backends(&mut self, run: &RunSpec) -> Result<Backends> {
        let state_pod = match run.state {
            StateChoice::Fom => None,
            StateChoice::Rom(_) => Some(self.state_pod()?),
        };
        let adjoint_pod = match run.adjoint {
            AdjointChoice::Full => None,
            AdjointChoice::Sra(_) => Some(self.state_pod()?),
            AdjointChoice::Mgd { m, .. } => Some(self.mgd_pod(m)?),
            AdjointChoice::Gdra(_) => Some(self.gdra_pod()?),
        };
        let cut = |pods: &Option<Arc<[PodBasis; 2]>>, n: Option<usize>| -> Result<[Option<_>; 2]> {
            match (pods, n) {
                (Some(p), Some(n)) => Ok([Some(p[0].truncate(n)?), Some(p[1].truncate(n)?)]),
                _ => Ok([None, None]),
            }
        };
        let sb = cut(&state_pod, run.state_modes())?;
        let ab = cut(&adjoint_pod, run.adjoint_modes())?;
        Backends::new(&self.coupled, [sb[0].as_ref(), sb[1].as_ref()], [ab[0].as_ref(), ab[1].as_ref()])
    }

    /// Runs one coupled configuration and compares it with the reference.
    pub fn run(&mut self, run: &RunSpec, observer: &mut dyn Observer) -> Result<(ReportRow, TransientResult)> {
        let backends = self.backends(run)?;
        let cfg = self.spec.coupling_config(Some(run));
        self.ensure_monolithic()?;
        let coupler = Coupler::new(&self.coupled, backends, cfg.clone())?;
        let result = coupler.run_transient(observer)?;
        let mono_final = self.mono_final.as_deref().expect("monolithic run");
        let err = error_report(
            &self.coupled,
            &self.mono,
            [&result.final_states[0], &result.final_states[1]],
            mono_final,
            self.num_steps(),
        )?;
        let s = &result.summary;
        let row = ReportRow {
            method: run.label(),
            state_modes: run.state_modes(),
            adjoint_modes: run.adjoint_modes(),
            delta: cfg.delta,
            tol: cfg.tol,
            rel_l2: err.rel_l2,
            rel_h1: err.rel_h1,
            rel_h1_semi: err.rel_h1_semi,
            avg_iterations: format!("{:.1}", s.average_iterations),
            max_iterations: s.max_iterations,
            converged: s.converged(),
            seconds: s.seconds,
            summary: s.clone(),
            error: None,
        };
        Ok((row, result))
    }

    /// Runs every configured run; failures become rows carrying the message.
    pub fn run_all(&mut self) -> Vec<ReportRow> {
        let runs = self.spec.runs.clone();
        runs.iter()
            .map(|r| match self.run(r, &mut obc_core::coupling::NoObserver) {
                Ok((row, _)) => row,
                Err(e) => ReportRow {
                    method: r.label(),
                    state_modes: r.state_modes(),
                    adjoint_modes: r.adjoint_modes(),
                    delta: r.delta.unwrap_or(self.spec.delta),
                    tol: r.tol.unwrap_or(self.spec.tol),
                    rel_l2: f64::NAN,
                    rel_h1: f64::NAN,
                    rel_h1_semi: f64::NAN,
                    avg_iterations: String::new(),
                    max_iterations: 0,
                    converged: false,
                    seconds: 0.0,
                    summary: RunSummary::default(),
                    error: Some(e.to_string()),
                },
            })
            .collect()
    }
}

/// Observer accumulating min/max projection errors of the adjoints onto nested
/// bases, per subdomain and mode count.
pub struct ProjectionStats {
    pub bases: Vec<(String, Arc<[PodBasis; 2]>, Vec<usize>)>,
    /// `[basis][side][count] -> (min, max)`.
    pub ranges: Vec<[Vec<(f64, f64)>; 2]>,
    pub samples: usize,
}

impl ProjectionStats {
    pub fn new(bases: Vec<(String, Arc<[PodBasis; 2]>, Vec<usize>)>) -> Self {
        let ranges = bases
            .iter()
            .map(|(_, _, counts)| std::array::from_fn(|_| vec![(f64::INFINITY, 0.0); counts.len()]))
            .collect();
        Self { bases, ranges, samples: 0 }
    }

    /// Folds the projection errors of one free-DOF vector of `side`.
    pub fn record(&mut self, side: Side, v: &[f64]) {
        for (b, (_, pods, counts)) in self.bases.iter().enumerate() {
            let errs = projection_errors_nested(&pods[side.index()].modes, v, counts);
            for (slot, e) in self.ranges[b][side.index()].iter_mut().zip(errs) {
                slot.0 = slot.0.min(e);
                slot.1 = slot.1.max(e);
            }
        }
    }

    /// Largest error over both sides for basis `b` at its `k`-th mode count.
    pub fn max_error(&self, b: usize, k: usize) -> f64 {
        self.ranges[b][0][k].1.max(self.ranges[b][1][k].1)
    }

    pub fn min_error(&self, b: usize, k: usize) -> f64 {
        self.ranges[b][0][k].0.min(self.ranges[b][1][k].0)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["basis", "modes", "min_omega1", "max_omega1", "min_omega2", "max_omega2"])
            .map_err(csv_err)?;
        for (b, (name, _, counts)) in self.bases.iter().enumerate() {
            for (k, c) in counts.iter().enumerate() {
                let [r1, r2] = &self.ranges[b];
                w.write_record([
                    name.clone(),
                    c.to_string(),
                    sci(r1[k].0),
                    sci(r1[k].1),
                    sci(r2[k].0),
                    sci(r2[k].1),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

impl Observer for ProjectionStats {
    fn wants_adjoints(&self) -> bool {
        true
    }

    fn adjoints(&mut self, _step: usize, _iteration: usize, mu: [&[f64]; 2]) {
        self.samples += 1;
        self.record(Side::One, mu[0]);
        self.record(Side::Two, mu[1]);
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

/// Scientific notation with three significant digits.
pub fn sci(v: f64) -> String {
    format!("{v:.2e}")
}

/// Results table. Wall times go to a separate file so this one is reproducible.
pub fn write_results_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "method",
        "state_modes",
        "adjoint_modes",
        "delta",
        "tol",
        "rel_l2",
        "rel_h1",
        "rel_h1_semi",
        "avg_iterations",
        "max_iterations",
        "converged",
        "error",
    ])
    .map_err(csv_err)?;
    let opt = |v: Option<usize>| v.map_or_else(|| "full".to_string(), |n| n.to_string());
    for r in rows {
        w.write_record([
            r.method.clone(),
            opt(r.state_modes),
            opt(r.adjoint_modes),
            sci(r.delta),
            sci(r.tol),
            sci(r.rel_l2),
            sci(r.rel_h1),
            sci(r.rel_h1_semi),
            r.avg_iterations.clone(),
            r.max_iterations.to_string(),
            if r.converged { "yes".into() } else { "*".into() },
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timing_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["method", "state_modes", "adjoint_modes", "delta", "tol", "seconds"]).map_err(csv_err)?;
    let opt = |v: Option<usize>| v.map_or_else(|| "full".to_string(), |n| n.to_string());
    for r in rows {
        w.write_record([
            r.method.clone(),
            opt(r.state_modes),
            opt(r.adjoint_modes),
            sci(r.delta),
            sci(r.tol),
            format!("{:.3}", r.seconds),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Singular values and cumulative energies of named bases, one row per mode.
pub fn write_singular_values_csv(path: &Path, bases: &[(String, &PodBasis)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["basis", "mode", "sigma", "energy"]).map_err(csv_err)?;
    for (name, b) in bases {
        let energy = obc_core::rom::snapshot_energy(&b.sigma).unwrap_or_else(|_| vec![f64::NAN; b.sigma.len()]);
        for (k, (s, e)) in b.sigma.iter().zip(energy).enumerate() {
            w.write_record([name.clone(), (k + 1).to_string(), format!("{s:.6e}"), format!("{e:.12}")])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_condition_probes() {
        // The hill has unbounded support, so subtract its tail at each probe.
        let hill = |x: f64, y: f64| (-((x - 0.25).powi(2) + (y - 0.5).powi(2)) / 0.005).exp();
        let body = |x, y| rotation_initial_condition(x, y) - hill(x, y);
        for (x, y, want) in [
            (0.9, 0.9, 0.0),
            (0.5, 0.25, 1.0),
            (0.25, 0.5, 0.0),
            // Inside the cylinder but in the slot.
            (0.5, 0.7, 0.0),
            // Inside the cylinder above the slot.
            (0.5, 0.88, 1.0),
            (0.4, 0.75, 1.0),
        ] {
            assert!((body(x, y) - want).abs() < 1e-15, "({x}, {y})");
        }
        assert_eq!(hill(0.25, 0.5), 1.0);
    }

    #[test]
    fn model_strings_round_trip() {
        for s in ["fom", "rom:100"] {
            assert_eq!(s.parse::<StateChoice>().unwrap().to_string(), s);
        }
        for s in ["full", "sra:500", "mgd:100", "mgd2:50", "gdra:25"] {
            assert_eq!(s.parse::<AdjointChoice>().unwrap().to_string(), s);
        }
        assert!("rom:0".parse::<StateChoice>().is_err());
        assert!("rom".parse::<StateChoice>().is_err());
        assert!("mgd0:5".parse::<AdjointChoice>().is_err());
        assert!("pod:5".parse::<AdjointChoice>().is_err());
    }

    #[test]
    fn labels() {
        let r = |s: &str, a: &str| RunSpec::new(s.parse().unwrap(), a.parse().unwrap()).label();
        assert_eq!(r("fom", "full"), "FOM-FOM");
        assert_eq!(r("rom:100", "full"), "RS-FA");
        assert_eq!(r("fom", "sra:10"), "FS-SRA");
        assert_eq!(r("rom:100", "mgd2:10"), "RS-MGD2RA");
        assert_eq!(r("rom:100", "gdra:10"), "RS-GDRA");
    }

    #[test]
    fn full_rotation_setting() {
        let p = BenchmarkSpec::full_rotation().problem().unwrap();
        assert_eq!(p.dt, 1.122398e-3);
        assert!((p.final_time - 2.0 * std::f64::consts::PI).abs() < 1e-15);
        assert_eq!(p.num_steps(), 5598);
    }

    #[test]
    fn config_modes_are_bounded() {
        let mut s = BenchmarkSpec { level: 8, ..BenchmarkSpec::default() };
        s.runs = vec![RunSpec::new(StateChoice::Rom(28), AdjointChoice::Full)];
        assert!(s.validate().is_ok());
        s.runs = vec![RunSpec::new(StateChoice::Rom(29), AdjointChoice::Full)];
        assert!(s.validate().is_err());
    }
}
