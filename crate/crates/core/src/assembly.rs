//! Q1 finite element operators on structured rectangular meshes.
//!
//! Nodal (unrestricted) matrices are assembled over all mesh nodes; the
//! solvers then split them into free/free and free/Dirichlet blocks.
//!
//! Conventions, with `k` the test function and `j` the trial function:
//!
//! * `M[k][j] = (φ_j, φ_k)`
//! * `K[k][j] = (∇φ_j, ∇φ_k)`
//! * `C[k][j] = (a φ_j, ∇φ_k)`, the conservative advection form
//! * `Sm[k][j] = Σ_e τ_e (φ_j, a·∇φ_k)_e`, `Sa[k][j] = Σ_e τ_e (a·∇φ_j, a·∇φ_k)_e`
//!
//! The backward Euler state operator is `M/Δt + νK − C + Sm/Δt + Sa` and its
//! history operator `(M + Sm)/Δt`.

use crate::error::{invalid, mismatch, Result};
use crate::geometry::{DofMap, InterfaceMap, Mesh, Subdomain};
use crate::linalg::{BandedLu, CsrMatrix};
use crate::{Side, VectorField};

/// Tensor-product rule on the reference square `[0, 1]²`.
#[derive(Clone, Debug)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// 2×2 Gauss-Legendre, exact for polynomials of degree 3 in each variable.
    pub fn gauss_2x2() -> Self {
        let [a, b] = gauss_line_2();
        let mut points = Vec::with_capacity(4);
        for &y in &[a, b] {
            for &x in &[a, b] {
                points.push([x, y]);
            }
        }
        Self { points, weights: vec![0.25; 4] }
    }
}

/// Two-point Gauss abscissae on `[0, 1]`; both weights are 1/2.
pub fn gauss_line_2() -> [f64; 2] {
    let d = 0.5 / 3f64.sqrt();
    [0.5 - d, 0.5 + d]
}

/// Bilinear shape functions at reference point `(s, t)`, counterclockwise
/// from the lower-left node.
pub fn shape(s: f64, t: f64) -> [f64; 4] {
    [(1.0 - s) * (1.0 - t), s * (1.0 - t), s * t, (1.0 - s) * t]
}

/// Physical gradients of the shape functions on an `hx × hy` element.
pub fn shape_grad(s: f64, t: f64, hx: f64, hy: f64) -> [[f64; 2]; 4] {
    [
        [-(1.0 - t) / hx, -(1.0 - s) / hy],
        [(1.0 - t) / hx, -s / hy],
        [t / hx, s / hy],
        [-t / hx, (1.0 - s) / hy],
    ]
}

/// Coefficients entering the element integrals.
#[derive(Clone)]
pub struct Physics {
    pub nu: f64,
    pub dt: f64,
    pub velocity: VectorField,
    pub supg: bool,
}

impl Physics {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) || !self.nu.is_finite() {
            return Err(invalid(format!("diffusivity must be positive, got {}", self.nu)));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(invalid(format!("time step must be positive, got {}", self.dt)));
        }
        Ok(())
    }

    /// SUPG parameter for an element of edge lengths `hx × hy` with advection
    /// speed `speed`.
    pub fn tau(&self, hx: f64, hy: f64, speed: f64) -> f64 {
        let h = (hx * hy).sqrt();
        let diff = 9.0 * 4.0 * self.nu / (h * h);
        ((2.0 / self.dt).powi(2) + (2.0 * speed / h).powi(2) + diff * diff).powf(-0.5)
    }
}

type Elem = [[f64; 4]; 4];

/// All element matrices of one element, indexed `[test][trial]`.
#[derive(Clone, Debug, Default)]
pub struct ElementMatrices {
    pub mass: Elem,
    pub stiffness: Elem,
    pub advection: Elem,
    pub supg_mass: Elem,
    pub supg_advection: Elem,
}

pub fn element_matrices(origin: [f64; 2], hx: f64, hy: f64, phys: &Physics, t: f64) -> ElementMatrices {
    let rule = QuadratureRule::gauss_2x2();
    let area = hx * hy;
    let mut out = ElementMatrices::default();
    let tau = if phys.supg {
        let a = (phys.velocity)(origin[0] + 0.5 * hx, origin[1] + 0.5 * hy, t);
        phys.tau(hx, hy, a[0].hypot(a[1]))
    } else {
        0.0
    };
    for (p, &w) in rule.points.iter().zip(&rule.weights) {
        let wa = w * area;
        let n = shape(p[0], p[1]);
        let g = shape_grad(p[0], p[1], hx, hy);
        let a = (phys.velocity)(origin[0] + p[0] * hx, origin[1] + p[1] * hy, t);
        let adv: Vec<f64> = g.iter().map(|d| a[0] * d[0] + a[1] * d[1]).collect();
        for k in 0..4 {
            for j in 0..4 {
                out.mass[k][j] += wa * n[j] * n[k];
                out.stiffness[k][j] += wa * (g[j][0] * g[k][0] + g[j][1] * g[k][1]);
                out.advection[k][j] += wa * n[j] * adv[k];
                if phys.supg {
                    out.supg_mass[k][j] += wa * tau * n[j] * adv[k];
                    out.supg_advection[k][j] += wa * tau * adv[j] * adv[k];
                }
            }
        }
    }
    out
}

/// Unrestricted operators of a mesh together with its Dirichlet split.
#[derive(Clone, Debug)]
pub struct OperatorSet {
    pub nu: f64,
    pub dt: f64,
    pub supg: bool,
    pub dofs: DofMap,
    pub mass: CsrMatrix,
    pub stiffness: CsrMatrix,
    pub advection: CsrMatrix,
    pub supg_mass: CsrMatrix,
    pub supg_advection: CsrMatrix,
}

/// How the advection and stabilization terms of the adjoint operator are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum AdjointForm {
    /// Exact transpose of the state operator.
    #[default]
    Transposed,
    /// `M/Δt + νK − Cᵀ` with streamline stabilization along `−a`.
    Stabilized,
    /// `M/Δt + νK + C` as written for the continuous adjoint without the
    /// interface boundary term.
    Literal,
}

/// Which block of a nodal operator to extract.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    FreeFree,
    FreeDirichlet,
}

impl OperatorSet {
    /// Assembles all nodal operators of `mesh` at time `t`.
    pub fn assemble(mesh: &Mesh, dofs: DofMap, phys: &Physics, t: f64) -> Result<Self> {
        phys.validate()?;
        if dofs.num_nodes() != mesh.num_nodes() {
            return Err(mismatch("DOF map does not match the mesh"));
        }
        let n = mesh.num_nodes();
        let cap = 16 * mesh.num_elements();
        let mut trip: [Vec<(usize, usize, f64)>; 5] = std::array::from_fn(|_| Vec::with_capacity(cap));
        for (e, nodes) in mesh.elements().iter().enumerate() {
            let (origin, hx, hy) = mesh.element_box(e);
            let em = element_matrices(origin, hx, hy, phys, t);
            let mats = [&em.mass, &em.stiffness, &em.advection, &em.supg_mass, &em.supg_advection];
            for (list, m) in trip.iter_mut().zip(mats) {
                for k in 0..4 {
                    for j in 0..4 {
                        if m[k][j] != 0.0 {
                            list.push((nodes[k], nodes[j], m[k][j]));
                        }
                    }
                }
            }
        }
        let [m, k, c, sm, sa] = trip;
        Ok(Self {
            nu: phys.nu,
            dt: phys.dt,
            supg: phys.supg,
            dofs,
            mass: CsrMatrix::from_triplets(n, n, &m)?,
            stiffness: CsrMatrix::from_triplets(n, n, &k)?,
            advection: CsrMatrix::from_triplets(n, n, &c)?,
            supg_mass: CsrMatrix::from_triplets(n, n, &sm)?,
            supg_advection: CsrMatrix::from_triplets(n, n, &sa)?,
        })
    }

    /// `M/Δt + νK − C + Sm/Δt + Sa` on all nodes.
    pub fn state_operator(&self) -> CsrMatrix {
        let idt = 1.0 / self.dt;
        CsrMatrix::linear_combination(&[
            (idt, &self.mass),
            (self.nu, &self.stiffness),
            (-1.0, &self.advection),
            (idt, &self.supg_mass),
            (1.0, &self.supg_advection),
        ])
        .expect("operators share one shape")
    }

    /// `(M + Sm)/Δt` on all nodes.
    pub fn history_operator(&self) -> CsrMatrix {
        let idt = 1.0 / self.dt;
        CsrMatrix::linear_combination(&[(idt, &self.mass), (idt, &self.supg_mass)]).expect("operators share one shape")
    }

    /// Adjoint operator on all nodes.
    pub fn adjoint_operator(&self, form: AdjointForm) -> CsrMatrix {
        let idt = 1.0 / self.dt;
        match form {
            AdjointForm::Transposed => self.state_operator().transpose(),
            AdjointForm::Stabilized => {
                let ct = self.advection.transpose();
                CsrMatrix::linear_combination(&[
                    (idt, &self.mass),
                    (self.nu, &self.stiffness),
                    (-1.0, &ct),
                    (-idt, &self.supg_mass),
                    (1.0, &self.supg_advection),
                ])
                .expect("operators share one shape")
            }
            AdjointForm::Literal => CsrMatrix::linear_combination(&[
                (idt, &self.mass),
                (self.nu, &self.stiffness),
                (1.0, &self.advection),
            ])
            .expect("operators share one shape"),
        }
    }

    pub fn block(&self, nodal: &CsrMatrix, block: Block) -> CsrMatrix {
        let cols = match block {
            Block::FreeFree => self.dofs.free_nodes(),
            Block::FreeDirichlet => self.dofs.dirichlet_nodes(),
        };
        nodal.select(self.dofs.free_nodes(), cols)
    }
}

/// Nodal load vector `(f, φ_k) + Σ_e τ_e (f, a·∇φ_k)_e` at time `t`.
pub fn assemble_load(mesh: &Mesh, phys: &Physics, f: &(dyn Fn(f64, f64, f64) -> f64 + Sync), t: f64) -> Vec<f64> {
    let rule = QuadratureRule::gauss_2x2();
    let mut out = vec![0.0; mesh.num_nodes()];
    for (e, nodes) in mesh.elements().iter().enumerate() {
        let (o, hx, hy) = mesh.element_box(e);
        let tau = if phys.supg {
            let a = (phys.velocity)(o[0] + 0.5 * hx, o[1] + 0.5 * hy, t);
            phys.tau(hx, hy, a[0].hypot(a[1]))
        } else {
            0.0
        };
        for (p, &w) in rule.points.iter().zip(&rule.weights) {
            let (x, y) = (o[0] + p[0] * hx, o[1] + p[1] * hy);
            let fv = f(x, y, t) * w * hx * hy;
            if fv == 0.0 {
                continue;
            }
            let n = shape(p[0], p[1]);
            let g = shape_grad(p[0], p[1], hx, hy);
            let a = if phys.supg { (phys.velocity)(x, y, t) } else { [0.0, 0.0] };
            for k in 0..4 {
                out[nodes[k]] += fv * (n[k] + tau * (a[0] * g[k][0] + a[1] * g[k][1]));
            }
        }
    }
    out
}

/// `B[k][j] = ∫_{∂Ω} (a·n) φ_j φ_k` over the outer boundary of `mesh`.
pub fn assemble_boundary_flux(mesh: &Mesh, velocity: &VectorField, t: f64) -> Result<CsrMatrix> {
    let (nx, ny) = (mesh.nx(), mesh.ny());
    let mut edges: Vec<([usize; 2], [[f64; 2]; 2], [f64; 2])> = Vec::new();
    for i in 0..nx {
        let (a, b) = (mesh.node_index(i, 0), mesh.node_index(i + 1, 0));
        edges.push(([a, b], [mesh.node(a), mesh.node(b)], [0.0, -1.0]));
        let (a, b) = (mesh.node_index(i, ny), mesh.node_index(i + 1, ny));
        edges.push(([a, b], [mesh.node(a), mesh.node(b)], [0.0, 1.0]));
    }
    for j in 0..ny {
        let (a, b) = (mesh.node_index(0, j), mesh.node_index(0, j + 1));
        edges.push(([a, b], [mesh.node(a), mesh.node(b)], [-1.0, 0.0]));
        let (a, b) = (mesh.node_index(nx, j), mesh.node_index(nx, j + 1));
        edges.push(([a, b], [mesh.node(a), mesh.node(b)], [1.0, 0.0]));
    }
    let mut trip = Vec::with_capacity(4 * edges.len());
    for (nodes, [p, q], normal) in edges {
        let len = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
        for s in gauss_line_2() {
            let x = p[0] + s * (q[0] - p[0]);
            let y = p[1] + s * (q[1] - p[1]);
            let a = velocity(x, y, t);
            let an = a[0] * normal[0] + a[1] * normal[1];
            let phi = [1.0 - s, s];
            for k in 0..2 {
                for j in 0..2 {
                    trip.push((nodes[k], nodes[j], 0.5 * len * an * phi[k] * phi[j]));
                }
            }
        }
    }
    CsrMatrix::from_triplets(mesh.num_nodes(), mesh.num_nodes(), &trip)
}

/// 1D Q1 mass matrix on a sorted list of interface coordinates.
pub fn line_mass(coords: &[f64]) -> Result<CsrMatrix> {
    if coords.len() < 2 {
        return Err(invalid("an interface needs at least two nodes"));
    }
    let mut trip = Vec::with_capacity(4 * coords.len());
    for (e, w) in coords.windows(2).enumerate() {
        let h = w[1] - w[0];
        if !(h > 0.0) {
            return Err(invalid("interface coordinates must increase strictly"));
        }
        for s in gauss_line_2() {
            let phi = [1.0 - s, s];
            for k in 0..2 {
                for j in 0..2 {
                    trip.push((e + k, e + j, 0.5 * h * phi[k] * phi[j]));
                }
            }
        }
    }
    CsrMatrix::from_triplets(coords.len(), coords.len(), &trip)
}

/// Interface mass matrices shared by both subdomains.
#[derive(Clone, Debug)]
pub struct InterfaceMass {
    /// Mass on all interface nodes, endpoints first and last.
    pub full: CsrMatrix,
    /// `M_Γ`: mass on the control (interior) nodes.
    pub control: CsrMatrix,
    control_lu: BandedLu,
}

impl InterfaceMass {
    pub fn new(imap: &InterfaceMap) -> Result<Self> {
        let full = line_mass(&imap.ys)?;
        let n = imap.num_control();
        let interior: Vec<usize> = (1..=n).collect();
        let control = full.select(&interior, &interior);
        let control_lu = BandedLu::factorize(&control)?;
        Ok(Self { full, control, control_lu })
    }

    pub fn num_control(&self) -> usize {
        self.control.n_rows()
    }

    /// `(M_Γ,full · j)` restricted to the control nodes, for a jump `j` given on
    /// all interface nodes.
    pub fn weighted_jump(&self, jump_full: &[f64]) -> Vec<f64> {
        let w = self.full.matvec(jump_full);
        w[1..w.len() - 1].to_vec()
    }

    /// `½ jᵀ M_Γ,full j`.
    pub fn half_norm_sq(&self, jump_full: &[f64]) -> f64 {
        0.5 * crate::linalg::dot(jump_full, &self.full.matvec(jump_full))
    }

    /// `(a, b)_Γ` for control vectors.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        crate::linalg::dot(a, &self.control.matvec(b))
    }

    /// `M_Γ⁻¹ r`.
    pub fn solve(&self, r: &[f64]) -> Vec<f64> {
        self.control_lu.solve(r)
    }
}

/// `M_Γ0` for one subdomain: `N_free × N_control`, coupling each control hat
/// function to the free basis functions through their interface traces.
pub fn assemble_coupling(sub: &Subdomain, imap: &InterfaceMap, iface: &InterfaceMass) -> Result<CsrMatrix> {
    let trace = imap.trace_indices(sub.side);
    let n = imap.num_control();
    let mut trip = Vec::new();
    for (r, &free) in trace.iter().enumerate() {
        // Row r + 1 of the full interface mass couples node r + 1 with the
        // control nodes, which are interface nodes 1..=n.
        let (cols, vals) = iface.full.row(r + 1);
        for (&c, &v) in cols.iter().zip(vals) {
            if (1..=n).contains(&c) {
                trip.push((free, c - 1, v));
            }
        }
    }
    CsrMatrix::from_triplets(sub.dofs.num_free(), n, &trip)
}

/// Adds `sign · M_Γ0 g` into a free-DOF vector without forming `M_Γ0`.
pub fn add_interface_load(imap: &InterfaceMap, iface: &InterfaceMass, side: Side, g: &[f64], sign: f64, out: &mut [f64]) {
    let mg = iface.control.matvec(g);
    imap.scatter_add(side, &mg, sign, out);
}
