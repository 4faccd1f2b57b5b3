#![allow(dead_code)]

use std::sync::Arc;

use obc_core::assembly::AdjointForm;
use obc_core::fom::ProblemSpec;
use obc_core::geometry::{Mesh, Rect};

/// Gaussian pulse in the rotating field on an `n × n` unit square.
pub fn rotating_problem(n: usize, steps: usize, nu: f64, supg: bool) -> ProblemSpec {
    let mesh = Mesh::structured(n, n, Rect::unit_square()).unwrap();
    let initial = mesh.interpolate(|x, y| (-((x - 0.45).powi(2) + (y - 0.6).powi(2)) / 0.03).exp());
    let dt = 0.02;
    ProblemSpec {
        mesh,
        interface_x: 0.5,
        nu,
        velocity: Arc::new(|x, y, _| [0.5 - y, x - 0.5]),
        source: Arc::new(|_, _, _| 0.0),
        dirichlet: Arc::new(|_, _, _| 0.0),
        initial,
        dt,
        final_time: dt * steps as f64,
        supg,
        adjoint_form: AdjointForm::Transposed,
    }
}

pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if n == 0.0 {
        d
    } else {
        d / n
    }
}
