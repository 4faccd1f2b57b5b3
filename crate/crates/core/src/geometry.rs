//! Structured quadrilateral meshes and their two-subdomain decomposition.
//!
//! Nodes are numbered lexicographically with x running fastest: node `(i, j)`
//! (column `i`, row `j`) has index `j * (nx + 1) + i`. Elements are numbered
//! the same way and list their corners counterclockwise starting from the
//! lower-left corner.

use crate::error::{invalid, mismatch, Result};
use crate::Side;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let finite = [x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite());
        if !finite || x_max <= x_min || y_max <= y_min {
            return Err(invalid(format!(
                "degenerate rectangle [{x_min}, {x_max}] x [{y_min}, {y_max}]"
            )));
        }
        Ok(Self { x_min, x_max, y_min, y_max })
    }

    pub fn unit_square() -> Self {
        Self { x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 1.0 }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

/// Tensor-product mesh of Q1 elements.
#[derive(Clone, Debug)]
pub struct Mesh {
    xs: Vec<f64>,
    ys: Vec<f64>,
    nodes: Vec<[f64; 2]>,
    elements: Vec<[usize; 4]>,
    boundary: Vec<usize>,
}

impl Mesh {
    /// Uniform `nx` x `ny` partition of `bounds`.
    pub fn structured(nx: usize, ny: usize, bounds: Rect) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(invalid(format!("element counts must be positive, got {nx} x {ny}")));
        }
        let bounds = Rect::new(bounds.x_min, bounds.x_max, bounds.y_min, bounds.y_max)?;
        let line = |lo: f64, hi: f64, n: usize| -> Vec<f64> {
            (0..=n)
                .map(|k| if k == n { hi } else { lo + (hi - lo) * k as f64 / n as f64 })
                .collect()
        };
        Self::from_grid_lines(
            line(bounds.x_min, bounds.x_max, nx),
            line(bounds.y_min, bounds.y_max, ny),
        )
    }

    /// Mesh with the given strictly increasing grid lines.
    pub fn from_grid_lines(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        let increasing = |v: &[f64]| v.len() >= 2 && v.windows(2).all(|w| w[1] > w[0]);
        if !increasing(&xs) || !increasing(&ys) || xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(invalid("grid lines must be finite, strictly increasing, at least two per axis"));
        }
        let (nx, ny) = (xs.len() - 1, ys.len() - 1);
        let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
        let mut boundary = Vec::new();
        for (j, &y) in ys.iter().enumerate() {
            for (i, &x) in xs.iter().enumerate() {
                if i == 0 || i == nx || j == 0 || j == ny {
                    boundary.push(nodes.len());
                }
                nodes.push([x, y]);
            }
        }
        let idx = |i: usize, j: usize| j * (nx + 1) + i;
        let mut elements = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                elements.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            }
        }
        Ok(Self { xs, ys, nodes, elements, boundary })
    }

    pub fn nx(&self) -> usize {
        self.xs.len() - 1
    }

    pub fn ny(&self) -> usize {
        self.ys.len() - 1
    }

    pub fn grid_x(&self) -> &[f64] {
        &self.xs
    }

    pub fn grid_y(&self) -> &[f64] {
        &self.ys
    }

    pub fn bounds(&self) -> Rect {
        Rect {
            x_min: self.xs[0],
            x_max: self.xs[self.nx()],
            y_min: self.ys[0],
            y_max: self.ys[self.ny()],
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.nx() + 1) + i
    }

    pub fn node(&self, k: usize) -> [f64; 2] {
        self.nodes[k]
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn elements(&self) -> &[[usize; 4]] {
        &self.elements
    }

    /// Sorted indices of the nodes on the outer boundary.
    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary
    }

    /// Lower-left corner and edge lengths of element `e`.
    pub fn element_box(&self, e: usize) -> ([f64; 2], f64, f64) {
        let (i, j) = (e % self.nx(), e / self.nx());
        (
            [self.xs[i], self.ys[j]],
            self.xs[i + 1] - self.xs[i],
            self.ys[j + 1] - self.ys[j],
        )
    }

    /// Evaluates `f` at every node.
    pub fn interpolate(&self, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.nodes.iter().map(|p| f(p[0], p[1])).collect()
    }
}

/// Split of the nodes of a mesh into free and Dirichlet degrees of freedom.
///
/// Both index lists are sorted by node index, so the free numbering inherits
/// the lexicographic node order.
#[derive(Clone, Debug)]
pub struct DofMap {
    node_to_free: Vec<Option<usize>>,
    node_to_dirichlet: Vec<Option<usize>>,
    free: Vec<usize>,
    dirichlet: Vec<usize>,
}

impl DofMap {
    pub fn new(num_nodes: usize, dirichlet_nodes: &[usize]) -> Result<Self> {
        let mut is_dirichlet = vec![false; num_nodes];
        for &k in dirichlet_nodes {
            if k >= num_nodes {
                return Err(invalid(format!("Dirichlet node {k} out of range")));
            }
            is_dirichlet[k] = true;
        }
        let mut node_to_free = vec![None; num_nodes];
        let mut node_to_dirichlet = vec![None; num_nodes];
        let (mut free, mut dirichlet) = (Vec::new(), Vec::new());
        for (k, &d) in is_dirichlet.iter().enumerate() {
            if d {
                node_to_dirichlet[k] = Some(dirichlet.len());
                dirichlet.push(k);
            } else {
                node_to_free[k] = Some(free.len());
                free.push(k);
            }
        }
        Ok(Self { node_to_free, node_to_dirichlet, free, dirichlet })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_to_free.len()
    }

    pub fn num_free(&self) -> usize {
        self.free.len()
    }

    pub fn num_dirichlet(&self) -> usize {
        self.dirichlet.len()
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.free
    }

    pub fn dirichlet_nodes(&self) -> &[usize] {
        &self.dirichlet
    }

    pub fn free_index(&self, node: usize) -> Option<usize> {
        self.node_to_free[node]
    }

    pub fn dirichlet_index(&self, node: usize) -> Option<usize> {
        self.node_to_dirichlet[node]
    }

    pub fn restrict(&self, nodal: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&k| nodal[k]).collect()
    }

    pub fn restrict_dirichlet(&self, nodal: &[f64]) -> Vec<f64> {
        self.dirichlet.iter().map(|&k| nodal[k]).collect()
    }

    /// Nodal vector from free values and Dirichlet values (zero when `None`).
    pub fn extend(&self, free: &[f64], dirichlet: Option<&[f64]>) -> Vec<f64> {
        let mut out = vec![0.0; self.num_nodes()];
        for (&k, &v) in self.free.iter().zip(free) {
            out[k] = v;
        }
        if let Some(d) = dirichlet {
            for (&k, &v) in self.dirichlet.iter().zip(d) {
                out[k] = v;
            }
        }
        out
    }
}

/// One side of a decomposition, owning a full copy of its interface nodes.
#[derive(Clone, Debug)]
pub struct Subdomain {
    pub side: Side,
    pub mesh: Mesh,
    /// Parent-mesh node index of every subdomain node.
    pub parent_nodes: Vec<usize>,
    /// Parent-mesh element index of every subdomain element.
    pub parent_elements: Vec<usize>,
    /// All nodes on the interface line ordered by ascending y, endpoints included.
    pub interface_nodes: Vec<usize>,
    pub dofs: DofMap,
}

/// Correspondence between subdomain free DOFs on the interface and the control.
///
/// The control lives on the interior interface nodes of subdomain one, in
/// ascending y. Interface endpoints lie on the outer boundary and are
/// Dirichlet nodes of both subdomains.
#[derive(Clone, Debug)]
pub struct InterfaceMap {
    /// y coordinate of every interface node, endpoints included.
    pub ys: Vec<f64>,
    /// Subdomain-one node index of each control DOF.
    pub control_nodes: Vec<usize>,
    /// Per side: free DOF index feeding each control DOF.
    trace_free: [Vec<usize>; 2],
    /// Per side: Dirichlet index of the lower and upper interface endpoints.
    endpoints: [[usize; 2]; 2],
}

impl InterfaceMap {
    pub fn num_control(&self) -> usize {
        self.control_nodes.len()
    }

    /// Number of interface nodes including the two endpoints.
    pub fn num_interface(&self) -> usize {
        self.ys.len()
    }

    /// The index map `I_{i->0}` from side `i` free DOFs to control ordering.
    pub fn trace_indices(&self, side: Side) -> &[usize] {
        &self.trace_free[side.index()]
    }

    pub fn endpoint_dirichlet_indices(&self, side: Side) -> [usize; 2] {
        self.endpoints[side.index()]
    }

    /// Interface values of a free-DOF vector in control ordering.
    pub fn gather(&self, side: Side, free: &[f64]) -> Vec<f64> {
        self.trace_free[side.index()].iter().map(|&f| free[f]).collect()
    }

    /// Adds `scale * control` into the interface entries of a free-DOF vector.
    pub fn scatter_add(&self, side: Side, control: &[f64], scale: f64, free: &mut [f64]) {
        for (&f, &c) in self.trace_free[side.index()].iter().zip(control) {
            free[f] += scale * c;
        }
    }

    /// Full interface trace (endpoints included) from free values and the
    /// Dirichlet values of the subdomain, zero when `dirichlet` is `None`.
    pub fn full_trace(&self, side: Side, free: &[f64], dirichlet: Option<&[f64]>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_interface());
        let [lo, hi] = self.endpoints[side.index()];
        out.push(dirichlet.map_or(0.0, |d| d[lo]));
        out.extend(self.trace_free[side.index()].iter().map(|&f| free[f]));
        out.push(dirichlet.map_or(0.0, |d| d[hi]));
        out
    }
}

/// Parent mesh split at a vertical grid line into `Ω₁` (left) and `Ω₂` (right).
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub parent: Mesh,
    /// Homogeneous-Dirichlet DOF map of the parent (all boundary nodes fixed).
    pub parent_dofs: DofMap,
    pub interface_x: f64,
    pub subdomains: [Subdomain; 2],
    pub interface: InterfaceMap,
}

impl Decomposition {
    pub fn sub(&self, side: Side) -> &Subdomain {
        &self.subdomains[side.index()]
    }
}

/// Splits `mesh` at the vertical grid line `x = interface_x`.
pub fn decompose(mesh: &Mesh, interface_x: f64) -> Result<Decomposition> {
    let xs = mesh.grid_x();
    let width = xs[mesh.nx()] - xs[0];
    let split = (1..mesh.nx())
        .find(|&i| (xs[i] - interface_x).abs() <= 1e-12 * width)
        .ok_or_else(|| {
            invalid(format!("x = {interface_x} is not an interior vertical grid line of the mesh"))
        })?;
    let ys = mesh.grid_y().to_vec();
    let ny = mesh.ny();

    let build = |side: Side, cols: std::ops::RangeInclusive<usize>, iface_col: usize| -> Result<Subdomain> {
        let (c0, c1) = (*cols.start(), *cols.end());
        let sub = Mesh::from_grid_lines(xs[c0..=c1].to_vec(), ys.clone())?;
        let mut parent_nodes = Vec::with_capacity(sub.num_nodes());
        for j in 0..=ny {
            for i in c0..=c1 {
                parent_nodes.push(mesh.node_index(i, j));
            }
        }
        let mut parent_elements = Vec::with_capacity(sub.num_elements());
        for j in 0..ny {
            for i in c0..c1 {
                parent_elements.push(j * mesh.nx() + i);
            }
        }
        let local_col = iface_col - c0;
        let interface_nodes: Vec<usize> = (0..=ny).map(|j| sub.node_index(local_col, j)).collect();
        let interior_interface = &interface_nodes[1..ny];
        let dirichlet: Vec<usize> = sub
            .boundary_nodes()
            .iter()
            .copied()
            .filter(|k| !interior_interface.contains(k))
            .collect();
        let dofs = DofMap::new(sub.num_nodes(), &dirichlet)?;
        Ok(Subdomain { side, mesh: sub, parent_nodes, parent_elements, interface_nodes, dofs })
    };

    let sub1 = build(Side::One, 0..=split, split)?;
    let sub2 = build(Side::Two, split..=mesh.nx(), split)?;

    // Match the interface nodes of the second subdomain to the control
    // ordering by coordinates.
    let coords = |s: &Subdomain, k: usize| s.mesh.node(k);
    let mut order2: Vec<usize> = sub2.interface_nodes.clone();
    order2.sort_by(|a, b| coords(&sub2, *a)[1].total_cmp(&coords(&sub2, *b)[1]));
    for (&a, &b) in sub1.interface_nodes.iter().zip(&order2) {
        if coords(&sub1, a) != coords(&sub2, b) {
            return Err(mismatch("interface nodes of the two subdomains do not coincide"));
        }
    }

    let control_nodes = sub1.interface_nodes[1..ny].to_vec();
    let free_of = |s: &Subdomain, nodes: &[usize]| -> Result<Vec<usize>> {
        nodes
            .iter()
            .map(|&k| s.dofs.free_index(k).ok_or_else(|| invalid("interior interface node is not free")))
            .collect()
    };
    let trace1 = free_of(&sub1, &control_nodes)?;
    let trace2 = free_of(&sub2, &order2[1..ny])?;
    let ends = |s: &Subdomain, lo: usize, hi: usize| -> Result<[usize; 2]> {
        let d = |k: usize| s.dofs.dirichlet_index(k).ok_or_else(|| invalid("interface endpoint is not Dirichlet"));
        Ok([d(lo)?, d(hi)?])
    };
    let endpoints = [
        ends(&sub1, sub1.interface_nodes[0], sub1.interface_nodes[ny])?,
        ends(&sub2, order2[0], order2[ny])?,
    ];

    let interface = InterfaceMap {
        ys: sub1.interface_nodes.iter().map(|&k| sub1.mesh.node(k)[1]).collect(),
        control_nodes,
        trace_free: [trace1, trace2],
        endpoints,
    };
    let parent_dofs = DofMap::new(mesh.num_nodes(), mesh.boundary_nodes())?;
    Ok(Decomposition {
        parent: mesh.clone(),
        parent_dofs,
        interface_x: xs[split],
        subdomains: [sub1, sub2],
        interface,
    })
}
