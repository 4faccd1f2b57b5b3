//! Optimization-based coupling (OBC) of two non-overlapping subdomain models
//! of a transient advection-diffusion transmission problem.
//!
//! Each subdomain is either a Q1 finite element model or a POD reduced-order
//! model. The interface flux is the control of a PDE-constrained least-squares
//! problem that is solved by adjoint-based gradient descent once per backward
//! Euler time step. The crate also provides the two adjoint snapshot
//! collection strategies used to build reduced adjoint bases: gradient descent
//! on the coupled full-order problem (GDRA) and the timestep-independent
//! modified gradient descent (MGDmRA).
//!
//! Module map:
//!
//! * [`geometry`]: structured quad meshes, decomposition at a vertical grid line, DOF maps.
//! * [`linalg`]: CSR matrices, banded LU, dense LU and thin SVD.
//! * [`assembly`]: mass, stiffness, advection, SUPG and interface operators.
//! * [`fom`]: monolithic reference solver and subdomain state/adjoint solvers.
//! * [`rom`]: POD bases, Dirichlet lifting and reduced operators.
//! * [`coupling`]: objective, gradient, adaptive gradient descent and the transient driver.
//! * [`snapshots`]: snapshot extraction and collection, SNAP1 persistence.

pub mod assembly;
pub mod coupling;
pub mod error;
pub mod fom;
pub mod geometry;
pub mod linalg;
pub mod rom;
pub mod snapshots;

use std::sync::Arc;

pub use error::{Error, Result};

/// Scalar field `f(x, y, t)`.
pub type ScalarField = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// Vector field `a(x, y, t)`.
pub type VectorField = Arc<dyn Fn(f64, f64, f64) -> [f64; 2] + Send + Sync>;

/// Subdomain label. `One` is the subdomain left of the interface.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Side {
    One,
    Two,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::One, Side::Two];

    /// The factor `(-1)^i` multiplying the interface flux on subdomain `i`.
    pub fn sign(self) -> f64 {
        match self {
            Side::One => -1.0,
            Side::Two => 1.0,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Side::One => 0,
            Side::Two => 1,
        }
    }

    /// 1-based subdomain number, as used in file names and reports.
    pub fn number(self) -> usize {
        self.index() + 1
    }
}
