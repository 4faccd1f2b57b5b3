//! POD bases and Galerkin-projected subdomain solvers.
//!
//! Reduced states represent only the free DOFs: `ū_free = Ψ û`, while the
//! Dirichlet values `β` are carried separately (the lifting), exactly as in the
//! full-order solver.

use crate::error::{invalid, mismatch, Result};
use crate::fom::SubdomainSolver;
use crate::geometry::InterfaceMap;
use crate::linalg::{norm2, thin_svd, CsrMatrix, DenseLu, DenseMatrix};
use crate::Side;

/// What a snapshot matrix was collected from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnapshotKind {
    State,
    AdjointGdra,
    AdjointMgd { m: usize },
}

/// Column-stacked free-DOF vectors of one subdomain.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotMatrix {
    pub data: DenseMatrix,
    pub kind: SnapshotKind,
    pub side: Side,
}

impl SnapshotMatrix {
    pub fn new(data: DenseMatrix, kind: SnapshotKind, side: Side) -> Result<Self> {
        if data.data().iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite snapshot entry"));
        }
        Ok(Self { data, kind, side })
    }

    pub fn num_dofs(&self) -> usize {
        self.data.n_rows()
    }

    pub fn num_snapshots(&self) -> usize {
        self.data.n_cols()
    }
}

/// Left singular vectors and singular values of one snapshot matrix, from
/// which nested bases of any size are cut.
#[derive(Clone, Debug)]
pub struct PodBasis {
    pub modes: DenseMatrix,
    pub sigma: Vec<f64>,
}

impl PodBasis {
    pub fn from_snapshots(s: &DenseMatrix) -> Result<Self> {
        let svd = thin_svd(s)?;
        Ok(Self { modes: svd.u, sigma: svd.sigma })
    }

    pub fn max_modes(&self) -> usize {
        self.modes.n_cols()
    }

    /// The first `n_modes` modes.
    pub fn truncate(&self, n_modes: usize) -> Result<ReducedBasis> {
        if n_modes == 0 || n_modes > self.max_modes() {
            return Err(invalid(format!("{n_modes} modes requested, {} available", self.max_modes())));
        }
        Ok(ReducedBasis { psi: self.modes.leading_columns(n_modes), sigma: self.sigma[..n_modes].to_vec() })
    }
}

/// Orthonormal basis `Ψ` (free DOFs × modes).
#[derive(Clone, Debug)]
pub struct ReducedBasis {
    pub psi: DenseMatrix,
    pub sigma: Vec<f64>,
}

impl ReducedBasis {
    pub fn num_modes(&self) -> usize {
        self.psi.n_cols()
    }

    pub fn num_dofs(&self) -> usize {
        self.psi.n_rows()
    }

    /// `‖ΨᵀΨ − I‖_max`.
    pub fn orthonormality_defect(&self) -> f64 {
        self.psi.tr_matmul(&self.psi).max_abs_diff(&DenseMatrix::identity(self.num_modes()))
    }
}

/// POD basis of `n_modes` modes of a snapshot matrix.
pub fn pod(s: &SnapshotMatrix, n_modes: usize) -> Result<ReducedBasis> {
    if n_modes == 0 || n_modes > s.num_snapshots().min(s.num_dofs()) {
        return Err(invalid(format!(
            "{n_modes} modes requested from a {} x {} snapshot matrix",
            s.num_dofs(),
            s.num_snapshots()
        )));
    }
    PodBasis::from_snapshots(&s.data)?.truncate(n_modes)
}

/// Cumulative normalized energy `Σ_{j≤k} σ_j² / Σ_j σ_j²`.
pub fn snapshot_energy(sigma: &[f64]) -> Result<Vec<f64>> {
    if sigma.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
        return Err(invalid("singular values must be finite and nonnegative"));
    }
    if sigma.windows(2).any(|w| w[1] > w[0]) {
        return Err(invalid("singular values must be nonincreasing"));
    }
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(invalid("all singular values are zero"));
    }
    let mut acc = 0.0;
    let mut out: Vec<f64> = sigma
        .iter()
        .map(|s| {
            acc += s * s;
            acc / total
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    Ok(out)
}

/// `‖v − ΨΨᵀv‖₂ / ‖v‖₂`, zero for a zero vector.
pub fn projection_error(basis: &ReducedBasis, v: &[f64]) -> f64 {
    projection_error_psi(&basis.psi, v)
}

pub(crate) fn projection_error_psi(psi: &DenseMatrix, v: &[f64]) -> f64 {
    let nv = norm2(v);
    if nv == 0.0 {
        return 0.0;
    }
    let c = psi.tr_matvec(v);
    let mut r = v.to_vec();
    psi.matvec_acc(&c, -1.0, &mut r);
    norm2(&r) / nv
}

/// Projection errors of `v` onto the leading `k` modes for each `k` in `counts`,
/// computed from one set of coefficients.
pub fn projection_errors_nested(modes: &DenseMatrix, v: &[f64], counts: &[usize]) -> Vec<f64> {
    let nv = norm2(v);
    if nv == 0.0 {
        return vec![0.0; counts.len()];
    }
    let kmax = counts.iter().copied().max().unwrap_or(0).min(modes.n_cols());
    let c: Vec<f64> = (0..kmax).map(|j| crate::linalg::dot(modes.col(j), v)).collect();
    // ‖v − Pv‖² = ‖v‖² − Σ c_j² loses accuracy near zero, so subtract explicitly.
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&i| counts[i]);
    let mut out = vec![0.0; counts.len()];
    let mut r = v.to_vec();
    let mut done = 0;
    for i in order {
        let k = counts[i].min(kmax);
        for j in done..k {
            crate::linalg::axpy(-c[j], modes.col(j), &mut r);
        }
        done = done.max(k);
        out[i] = norm2(&r) / nv;
    }
    out
}

/// `Ψ_aᵀ A Ψ_b`.
pub fn galerkin(a: &CsrMatrix, left: &DenseMatrix, right: &DenseMatrix) -> DenseMatrix {
    left.tr_matmul(&a.mul_dense(right))
}

/// Reduced state solver of one subdomain.
#[derive(Clone, Debug)]
pub struct ReducedState {
    side: Side,
    psi: DenseMatrix,
    lu: DenseLu,
    history: DenseMatrix,
    /// `Ψᵀ M_Γ0`, modes × control.
    coupling: DenseMatrix,
    /// Interface rows of `Ψ` in control ordering.
    trace: DenseMatrix,
}

impl ReducedState {
    pub fn new(solver: &SubdomainSolver, imap: &InterfaceMap, basis: &ReducedBasis) -> Result<Self> {
        if basis.num_dofs() != solver.num_free() {
            return Err(mismatch(format!(
                "basis has {} rows, subdomain has {} free DOFs",
                basis.num_dofs(),
                solver.num_free()
            )));
        }
        let psi = basis.psi.clone();
        let lu = DenseLu::factorize(&galerkin(solver.state_matrix(), &psi, &psi))?;
        let history = galerkin(solver.history_matrix(), &psi, &psi);
        let coupling = solver.coupling_matrix().transpose().mul_dense(&psi).transpose();
        let trace = psi.select_rows(imap.trace_indices(solver.side()));
        Ok(Self { side: solver.side(), psi, lu, history, coupling, trace })
    }

    pub fn num_modes(&self) -> usize {
        self.psi.n_cols()
    }

    pub fn psi(&self) -> &DenseMatrix {
        &self.psi
    }

    /// `Ψᵀ v`.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.psi.tr_matvec(v)
    }

    /// `Ψ û`.
    pub fn lift(&self, u_hat: &[f64]) -> Vec<f64> {
        self.psi.matvec(u_hat)
    }

    /// `f̂ + Ĥ û_prev`, with `f̂` the projected forcing.
    pub fn base_rhs(&self, forcing_hat: &[f64], u_prev: &[f64]) -> Vec<f64> {
        let mut rhs = forcing_hat.to_vec();
        self.history.matvec_acc(u_prev, 1.0, &mut rhs);
        rhs
    }

    pub fn solve_with_control(&self, base: &[f64], g: &[f64]) -> Vec<f64> {
        let mut rhs = base.to_vec();
        self.coupling.matvec_acc(g, self.side.sign(), &mut rhs);
        self.lu.solve(&rhs)
    }

    pub fn state_step(&self, u_prev: &[f64], g: &[f64], forcing_hat: &[f64]) -> Vec<f64> {
        self.solve_with_control(&self.base_rhs(forcing_hat, u_prev), g)
    }

    /// Interface values of the lifted state on the control nodes.
    pub fn trace(&self, u_hat: &[f64]) -> Vec<f64> {
        self.trace.matvec(u_hat)
    }
}

/// Reduced adjoint solver of one subdomain.
#[derive(Clone, Debug)]
pub struct ReducedAdjoint {
    side: Side,
    psi: DenseMatrix,
    lu: DenseLu,
    trace: DenseMatrix,
}

impl ReducedAdjoint {
    pub fn new(solver: &SubdomainSolver, imap: &InterfaceMap, basis: &ReducedBasis) -> Result<Self> {
        if basis.num_dofs() != solver.num_free() {
            return Err(mismatch(format!(
                "basis has {} rows, subdomain has {} free DOFs",
                basis.num_dofs(),
                solver.num_free()
            )));
        }
        let psi = basis.psi.clone();
        let lu = DenseLu::factorize(&galerkin(solver.adjoint_matrix(), &psi, &psi))?;
        let trace = psi.select_rows(imap.trace_indices(solver.side()));
        Ok(Self { side: solver.side(), psi, lu, trace })
    }

    pub fn num_modes(&self) -> usize {
        self.psi.n_cols()
    }

    /// Solves `Ψ_μᵀ L_adj Ψ_μ μ̂ = (−1)^i Ψ_μᵀ (M_Γ j)`.
    pub fn solve(&self, weighted_jump: &[f64]) -> Vec<f64> {
        let mut rhs = self.trace.tr_matvec(weighted_jump);
        rhs.iter_mut().for_each(|v| *v *= self.side.sign());
        self.lu.solve(&rhs)
    }

    pub fn lift(&self, mu_hat: &[f64]) -> Vec<f64> {
        self.psi.matvec(mu_hat)
    }

    pub fn trace(&self, mu_hat: &[f64]) -> Vec<f64> {
        self.trace.matvec(mu_hat)
    }
}
