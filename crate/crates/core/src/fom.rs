//! Full-order solvers: the monolithic reference, and the per-subdomain state,
//! modified state and adjoint solves used by the coupling.
//!
//! All vectors are on free DOFs unless stated otherwise. Operators are
//! assembled once with the velocity at `t = 0` and factored once.

use crate::assembly::{
    add_interface_load, assemble_coupling, assemble_load, AdjointForm, Block, InterfaceMass, OperatorSet, Physics,
};
use crate::error::{invalid, mismatch, Result};
use crate::geometry::{decompose, Decomposition, DofMap, InterfaceMap, Mesh, Subdomain};
use crate::linalg::{BandedLu, CsrMatrix};
use crate::{ScalarField, Side, VectorField};

/// A transient advection-diffusion problem on a rectangle split at a
/// vertical grid line.
#[derive(Clone)]
pub struct ProblemSpec {
    pub mesh: Mesh,
    pub interface_x: f64,
    pub nu: f64,
    pub velocity: VectorField,
    pub source: ScalarField,
    /// Dirichlet data `β(x, y, t)` on the outer boundary.
    pub dirichlet: ScalarField,
    /// Nodal initial values on the undecomposed mesh.
    pub initial: Vec<f64>,
    pub dt: f64,
    pub final_time: f64,
    pub supg: bool,
    pub adjoint_form: AdjointForm,
}

impl std::fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("nx", &self.mesh.nx())
            .field("ny", &self.mesh.ny())
            .field("interface_x", &self.interface_x)
            .field("nu", &self.nu)
            .field("dt", &self.dt)
            .field("final_time", &self.final_time)
            .field("supg", &self.supg)
            .field("adjoint_form", &self.adjoint_form)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(invalid(format!("time step must be positive, got {}", self.dt)));
        }
        if !(self.final_time >= self.dt) || !self.final_time.is_finite() {
            return Err(invalid(format!("final time {} is shorter than one step", self.final_time)));
        }
        if !(self.nu > 0.0) {
            return Err(invalid(format!("diffusivity must be positive, got {}", self.nu)));
        }
        if self.initial.len() != self.mesh.num_nodes() {
            return Err(mismatch(format!(
                "{} initial values for {} nodes",
                self.initial.len(),
                self.mesh.num_nodes()
            )));
        }
        if self.initial.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite initial value"));
        }
        Ok(())
    }

    /// Number of backward Euler steps, `round(T / Δt)`.
    pub fn num_steps(&self) -> usize {
        (self.final_time / self.dt).round() as usize
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    pub fn physics(&self) -> Physics {
        Physics { nu: self.nu, dt: self.dt, velocity: self.velocity.clone(), supg: self.supg }
    }

    /// A copy of this problem with a different number of steps.
    pub fn with_steps(&self, steps: usize) -> Self {
        let mut p = self.clone();
        p.final_time = steps as f64 * self.dt;
        p
    }
}

/// Solution vectors at consecutive time levels, starting with the initial state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> Option<&[f64]> {
        self.states.last().map(Vec::as_slice)
    }
}

/// Backward Euler system split into free/free and free/Dirichlet blocks.
#[derive(Clone, Debug)]
struct SplitSystem {
    lhs_ff: CsrMatrix,
    lhs_fd: CsrMatrix,
    hist_ff: CsrMatrix,
    hist_fd: CsrMatrix,
    lu: BandedLu,
}

impl SplitSystem {
    fn new(ops: &OperatorSet) -> Result<Self> {
        let lhs = ops.state_operator();
        let hist = ops.history_operator();
        let lhs_ff = ops.block(&lhs, Block::FreeFree);
        let lu = BandedLu::factorize(&lhs_ff)?;
        Ok(Self {
            lhs_fd: ops.block(&lhs, Block::FreeDirichlet),
            hist_ff: ops.block(&hist, Block::FreeFree),
            hist_fd: ops.block(&hist, Block::FreeDirichlet),
            lhs_ff,
            lu,
        })
    }
}

fn dirichlet_values(mesh: &Mesh, dofs: &DofMap, beta: &ScalarField, t: f64) -> Vec<f64> {
    dofs.dirichlet_nodes()
        .iter()
        .map(|&k| {
            let p = mesh.node(k);
            beta(p[0], p[1], t)
        })
        .collect()
}

/// Time-dependent part of the right-hand side at step `n`:
/// `f̄ⁿ − L_fd βⁿ + H_fd βⁿ⁻¹`.
fn affine_forcing(
    mesh: &Mesh,
    ops: &OperatorSet,
    sys: &SplitSystem,
    phys: &Physics,
    problem: &ProblemSpec,
    n: usize,
) -> Vec<f64> {
    let t = problem.time(n);
    let load = assemble_load(mesh, phys, problem.source.as_ref(), t);
    let mut rhs = ops.dofs.restrict(&load);
    let beta_now = dirichlet_values(mesh, &ops.dofs, &problem.dirichlet, t);
    let beta_prev = dirichlet_values(mesh, &ops.dofs, &problem.dirichlet, problem.time(n.saturating_sub(1)));
    sys.lhs_fd.matvec_acc(&beta_now, -1.0, &mut rhs);
    sys.hist_fd.matvec_acc(&beta_prev, 1.0, &mut rhs);
    rhs
}

/// Reference solver on the undecomposed domain.
pub struct MonolithicSolver {
    problem: ProblemSpec,
    physics: Physics,
    ops: OperatorSet,
    sys: SplitSystem,
}

impl MonolithicSolver {
    pub fn new(problem: &ProblemSpec) -> Result<Self> {
        problem.validate()?;
        let physics = problem.physics();
        let dofs = DofMap::new(problem.mesh.num_nodes(), problem.mesh.boundary_nodes())?;
        let ops = OperatorSet::assemble(&problem.mesh, dofs, &physics, 0.0)?;
        let sys = SplitSystem::new(&ops)?;
        Ok(Self { problem: problem.clone(), physics, ops, sys })
    }

    pub fn dofs(&self) -> &DofMap {
        &self.ops.dofs
    }

    pub fn operators(&self) -> &OperatorSet {
        &self.ops
    }

    pub fn initial_state(&self) -> Vec<f64> {
        self.ops.dofs.restrict(&self.problem.initial)
    }

    /// One backward Euler step from `u_prev` to time level `n`.
    pub fn step(&self, u_prev: &[f64], n: usize) -> Vec<f64> {
        let mut rhs = affine_forcing(&self.problem.mesh, &self.ops, &self.sys, &self.physics, &self.problem, n);
        self.sys.hist_ff.matvec_acc(u_prev, 1.0, &mut rhs);
        self.sys.lu.solve_in_place(&mut rhs);
        rhs
    }

    /// Runs all steps, calling `observer(n, uⁿ)` for `n = 0..=N`.
    pub fn run_with(&self, mut observer: impl FnMut(usize, &[f64])) {
        let mut u = self.initial_state();
        observer(0, &u);
        for n in 1..=self.problem.num_steps() {
            u = self.step(&u, n);
            observer(n, &u);
        }
    }

    pub fn solve(&self) -> Trajectory {
        let mut traj = Trajectory::default();
        self.run_with(|n, u| {
            traj.times.push(self.problem.time(n));
            traj.states.push(u.to_vec());
        });
        traj
    }

    /// Nodal values from free values, with Dirichlet data at time level `n`.
    pub fn nodal(&self, free: &[f64], n: usize) -> Vec<f64> {
        let beta = dirichlet_values(&self.problem.mesh, &self.ops.dofs, &self.problem.dirichlet, self.problem.time(n));
        self.ops.dofs.extend(free, Some(&beta))
    }
}

/// Monolithic reference trajectory on free DOFs, initial state included.
pub fn monolithic_solve(problem: &ProblemSpec) -> Result<Trajectory> {
    Ok(MonolithicSolver::new(problem)?.solve())
}

/// State and adjoint solver for one subdomain.
pub struct SubdomainSolver {
    side: Side,
    sub: Subdomain,
    physics: Physics,
    ops: OperatorSet,
    sys: SplitSystem,
    adjoint_ff: CsrMatrix,
    adjoint_lu: BandedLu,
    coupling: CsrMatrix,
}

impl SubdomainSolver {
    fn new(problem: &ProblemSpec, dec: &Decomposition, iface: &InterfaceMass, side: Side) -> Result<Self> {
        let physics = problem.physics();
        let sub = dec.sub(side).clone();
        let ops = OperatorSet::assemble(&sub.mesh, sub.dofs.clone(), &physics, 0.0)?;
        let sys = SplitSystem::new(&ops)?;
        let adjoint_ff = ops.block(&ops.adjoint_operator(problem.adjoint_form), Block::FreeFree);
        let adjoint_lu = BandedLu::factorize(&adjoint_ff)?;
        let coupling = assemble_coupling(&sub, &dec.interface, iface)?;
        Ok(Self { side, sub, physics, ops, sys, adjoint_ff, adjoint_lu, coupling })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn subdomain(&self) -> &Subdomain {
        &self.sub
    }

    pub fn operators(&self) -> &OperatorSet {
        &self.ops
    }

    pub fn num_free(&self) -> usize {
        self.ops.dofs.num_free()
    }

    /// Free/free block of the state operator.
    pub fn state_matrix(&self) -> &CsrMatrix {
        &self.sys.lhs_ff
    }

    /// Free/free block of the history operator `(M + Sm)/Δt`.
    pub fn history_matrix(&self) -> &CsrMatrix {
        &self.sys.hist_ff
    }

    /// Free/free block of the adjoint operator.
    pub fn adjoint_matrix(&self) -> &CsrMatrix {
        &self.adjoint_ff
    }

    /// `M_Γ0`, free DOFs × control DOFs.
    pub fn coupling_matrix(&self) -> &CsrMatrix {
        &self.coupling
    }

    /// Dirichlet values at time level `n`.
    pub fn dirichlet(&self, problem: &ProblemSpec, n: usize) -> Vec<f64> {
        dirichlet_values(&self.sub.mesh, &self.ops.dofs, &problem.dirichlet, problem.time(n))
    }

    /// `f̄ⁿ − L_fd βⁿ + H_fd βⁿ⁻¹`.
    pub fn forcing(&self, problem: &ProblemSpec, n: usize) -> Vec<f64> {
        affine_forcing(&self.sub.mesh, &self.ops, &self.sys, &self.physics, problem, n)
    }

    /// Right-hand side without the interface term: `forcing + H_ff u_prev`.
    pub fn base_rhs(&self, forcing: &[f64], u_prev: &[f64]) -> Vec<f64> {
        let mut rhs = forcing.to_vec();
        self.sys.hist_ff.matvec_acc(u_prev, 1.0, &mut rhs);
        rhs
    }

    /// Solves `L u = base + (−1)^i M_Γ0 g`.
    pub fn solve_with_control(&self, base: &[f64], g: &[f64], imap: &InterfaceMap, iface: &InterfaceMass) -> Vec<f64> {
        let mut rhs = base.to_vec();
        add_interface_load(imap, iface, self.side, g, self.side.sign(), &mut rhs);
        self.sys.lu.solve_in_place(&mut rhs);
        rhs
    }

    /// One backward Euler state step driven by the interface flux `g`.
    pub fn state_step(
        &self,
        u_prev: &[f64],
        g: &[f64],
        forcing: &[f64],
        imap: &InterfaceMap,
        iface: &InterfaceMass,
    ) -> Vec<f64> {
        self.solve_with_control(&self.base_rhs(forcing, u_prev), g, imap, iface)
    }

    /// State step whose history is a stored snapshot rather than the live
    /// trajectory. The system is the same; only the provenance differs.
    pub fn modified_state_step(
        &self,
        u_snap_prev: &[f64],
        g: &[f64],
        forcing: &[f64],
        imap: &InterfaceMap,
        iface: &InterfaceMass,
    ) -> Vec<f64> {
        self.state_step(u_snap_prev, g, forcing, imap, iface)
    }

    /// Adjoint solve with right-hand side `(−1)^i · (M_Γ j)` placed on the
    /// interface DOFs; `weighted_jump` is `M_Γ,full j` on the control nodes.
    pub fn adjoint_solve(&self, weighted_jump: &[f64], imap: &InterfaceMap) -> Vec<f64> {
        let mut rhs = vec![0.0; self.num_free()];
        imap.scatter_add(self.side, weighted_jump, self.side.sign(), &mut rhs);
        self.adjoint_lu.solve_in_place(&mut rhs);
        rhs
    }

    /// Interface flux reproducing `u` from `base`: solves
    /// `M_Γ g = (−1)^i (L u − base)|_Γ0`.
    pub fn implied_flux(&self, u: &[f64], base: &[f64], imap: &InterfaceMap, iface: &InterfaceMass) -> Vec<f64> {
        let mut r = self.sys.lhs_ff.matvec(u);
        for (ri, bi) in r.iter_mut().zip(base) {
            *ri -= bi;
        }
        let mut t = imap.gather(self.side, &r);
        t.iter_mut().for_each(|v| *v *= self.side.sign());
        iface.solve(&t)
    }

    /// Initial free values from nodal values on the parent mesh.
    pub fn initial_state(&self, problem: &ProblemSpec) -> Vec<f64> {
        let nodal: Vec<f64> = self.sub.parent_nodes.iter().map(|&p| problem.initial[p]).collect();
        self.ops.dofs.restrict(&nodal)
    }

    /// Nodal values from free values and Dirichlet data at level `n`.
    pub fn nodal(&self, problem: &ProblemSpec, free: &[f64], n: usize) -> Vec<f64> {
        self.ops.dofs.extend(free, Some(&self.dirichlet(problem, n)))
    }
}

/// The decomposed problem with both subdomain solvers and interface data.
pub struct CoupledProblem {
    pub problem: ProblemSpec,
    pub decomposition: Decomposition,
    pub interface_mass: InterfaceMass,
    solvers: [SubdomainSolver; 2],
}

impl CoupledProblem {
    pub fn new(problem: &ProblemSpec) -> Result<Self> {
        problem.validate()?;
        let decomposition = decompose(&problem.mesh, problem.interface_x)?;
        let interface_mass = InterfaceMass::new(&decomposition.interface)?;
        let solvers = [
            SubdomainSolver::new(problem, &decomposition, &interface_mass, Side::One)?,
            SubdomainSolver::new(problem, &decomposition, &interface_mass, Side::Two)?,
        ];
        Ok(Self { problem: problem.clone(), decomposition, interface_mass, solvers })
    }

    pub fn solver(&self, side: Side) -> &SubdomainSolver {
        &self.solvers[side.index()]
    }

    pub fn interface(&self) -> &InterfaceMap {
        &self.decomposition.interface
    }

    pub fn num_control(&self) -> usize {
        self.decomposition.interface.num_control()
    }

    pub fn num_steps(&self) -> usize {
        self.problem.num_steps()
    }

    /// Interface values of side `side` at level `n`, endpoints included.
    pub fn full_trace(&self, side: Side, free: &[f64], n: usize) -> Vec<f64> {
        let beta = self.solver(side).dirichlet(&self.problem, n);
        self.interface().full_trace(side, free, Some(&beta))
    }

    /// Parent free index of every free DOF of `side`.
    pub fn parent_free_indices(&self, side: Side, parent_dofs: &DofMap) -> Result<Vec<usize>> {
        parent_free_indices(&self.decomposition, side, parent_dofs)
    }
}

/// Parent free index of every free DOF of subdomain `side`.
pub fn parent_free_indices(dec: &Decomposition, side: Side, parent_dofs: &DofMap) -> Result<Vec<usize>> {
    let sub = dec.sub(side);
    sub.dofs
        .free_nodes()
        .iter()
        .map(|&k| {
            parent_dofs
                .free_index(sub.parent_nodes[k])
                .ok_or_else(|| invalid("a free subdomain node is fixed in the parent"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rect;
    use crate::linalg::{norm2, DenseMatrix};
    use std::sync::Arc;

    fn rotating(n: usize, steps: usize) -> ProblemSpec {
        let mesh = Mesh::structured(n, n, Rect::unit_square()).unwrap();
        let initial = mesh.interpolate(|x, y| (-((x - 0.4).powi(2) + (y - 0.6).powi(2)) / 0.02).exp());
        ProblemSpec {
            mesh,
            interface_x: 0.5,
            nu: 1e-2,
            velocity: Arc::new(|x, y, _| [0.5 - y, x - 0.5]),
            source: Arc::new(|_, _, _| 0.0),
            dirichlet: Arc::new(|_, _, _| 0.0),
            initial,
            dt: 0.01,
            final_time: 0.01 * steps as f64,
            supg: false,
            adjoint_form: AdjointForm::Transposed,
        }
    }

    #[test]
    fn zero_data_gives_zero_trajectory() {
        let mut p = rotating(4, 3);
        p.initial.iter_mut().for_each(|v| *v = 0.0);
        let traj = monolithic_solve(&p).unwrap();
        assert_eq!(traj.len(), 4);
        assert!(traj.states.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_diffusion_is_dissipative() {
        let mut p = rotating(8, 10);
        p.nu = 1.0;
        p.velocity = Arc::new(|_, _, _| [0.0, 0.0]);
        let solver = MonolithicSolver::new(&p).unwrap();
        let m = solver.operators().block(&solver.operators().mass, Block::FreeFree);
        let mut norms = Vec::new();
        solver.run_with(|_, u| norms.push(crate::linalg::dot(u, &m.matvec(u)).sqrt()));
        assert!(norms.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn monolithic_matches_dense_oracle() {
        let p = rotating(8, 10);
        let solver = MonolithicSolver::new(&p).unwrap();
        let traj = solver.solve();
        let ops = solver.operators();
        let l = ops.block(&ops.state_operator(), Block::FreeFree).to_dense();
        let h = ops.block(&ops.history_operator(), Block::FreeFree).to_dense();
        let mut u = solver.initial_state();
        for n in 1..=10 {
            u = crate::linalg::dense_solve(&l, &h.matvec(&u)).unwrap();
            let diff: Vec<f64> = u.iter().zip(&traj.states[n]).map(|(a, b)| a - b).collect();
            assert!(norm2(&diff) <= 1e-12 * norm2(&u));
        }
    }

    #[test]
    fn state_step_is_linear() {
        let p = rotating(4, 1);
        let cp = CoupledProblem::new(&p).unwrap();
        let s = cp.solver(Side::Two);
        let (imap, im) = (cp.interface(), &cp.interface_mass);
        let z = vec![0.0; s.num_free()];
        let u0 = s.initial_state(&p);
        let g1 = [0.3, -1.0, 2.0];
        let g2 = [1.5, 0.25, -0.75];
        let g12: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        let a = s.state_step(&u0, &g12, &z, imap, im);
        let b = s.state_step(&u0, &g1, &z, imap, im);
        let c = s.state_step(&z, &g2, &z, imap, im);
        for i in 0..a.len() {
            assert!((a[i] - b[i] - c[i]).abs() < 1e-13);
        }
        assert!(s.state_step(&z, &[0.0; 3], &z, imap, im).iter().all(|&v| v == 0.0));
        assert_eq!(s.modified_state_step(&u0, &g1, &z, imap, im), b);
    }

    #[test]
    fn state_step_matches_dense_oracle() {
        let p = rotating(4, 1);
        let cp = CoupledProblem::new(&p).unwrap();
        for side in Side::BOTH {
            let s = cp.solver(side);
            let g = [0.7, -0.2, 0.4];
            let u0 = s.initial_state(&p);
            let got = s.state_step(&u0, &g, &vec![0.0; s.num_free()], cp.interface(), &cp.interface_mass);
            let l: DenseMatrix = s.state_matrix().to_dense();
            let mut rhs = s.history_matrix().matvec(&u0);
            s.coupling_matrix().matvec_acc(&g, side.sign(), &mut rhs);
            let want = crate::linalg::dense_solve(&l, &rhs).unwrap();
            let diff: Vec<f64> = got.iter().zip(&want).map(|(a, b)| a - b).collect();
            assert!(norm2(&diff) <= 1e-12 * norm2(&want));
        }
    }

    #[test]
    fn adjoint_is_linear_in_the_jump() {
        let p = rotating(4, 1);
        let cp = CoupledProblem::new(&p).unwrap();
        let s = cp.solver(Side::One);
        let w = [0.1, 0.2, -0.3];
        let neg: Vec<f64> = w.iter().map(|v| -v).collect();
        let a = s.adjoint_solve(&w, cp.interface());
        let b = s.adjoint_solve(&neg, cp.interface());
        assert!(a.iter().zip(&b).all(|(x, y)| x == &-y));
        assert!(s.adjoint_solve(&[0.0; 3], cp.interface()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exact_flux_reproduces_monolithic_solution() {
        for supg in [false, true] {
            let mut p = rotating(4, 2);
            p.supg = supg;
            let mono = MonolithicSolver::new(&p).unwrap();
            let traj = mono.solve();
            let cp = CoupledProblem::new(&p).unwrap();
            let maps: Vec<_> = Side::BOTH
                .iter()
                .map(|&s| cp.parent_free_indices(s, mono.dofs()).unwrap())
                .collect();
            for n in 1..=2 {
                let restrict = |s: Side, u: &[f64]| -> Vec<f64> { maps[s.index()].iter().map(|&k| u[k]).collect() };
                let s1 = cp.solver(Side::One);
                let base1 = s1.base_rhs(&s1.forcing(&p, n), &restrict(Side::One, &traj.states[n - 1]));
                let u1 = restrict(Side::One, &traj.states[n]);
                let g = s1.implied_flux(&u1, &base1, cp.interface(), &cp.interface_mass);
                for side in Side::BOTH {
                    let s = cp.solver(side);
                    let prev = restrict(side, &traj.states[n - 1]);
                    let got = s.state_step(&prev, &g, &s.forcing(&p, n), cp.interface(), &cp.interface_mass);
                    let want = restrict(side, &traj.states[n]);
                    let diff: Vec<f64> = got.iter().zip(&want).map(|(a, b)| a - b).collect();
                    assert!(norm2(&diff) <= 1e-10 * norm2(&want), "supg {supg} side {side:?}");
                }
            }
        }
    }
}
