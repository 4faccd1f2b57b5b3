mod common;

use common::{rel_diff, rotating_problem};
use obc_core::coupling::{duality_pair, AdjointCollector, Backends, Coupler, CouplingConfig, NoObserver, Observer};
use obc_core::fom::{CoupledProblem, MonolithicSolver};
use obc_core::linalg::DenseMatrix;
use obc_core::rom::ReducedBasis;
use obc_core::Side;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn config(tol: f64, delta: f64) -> CouplingConfig {
    CouplingConfig { tol, delta, record_objectives: true, ..CouplingConfig::default() }
}

#[test]
fn gradient_matches_central_differences() {
    let p = rotating_problem(8, 1, 1e-3, false);
    let cp = CoupledProblem::new(&p).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for delta in [0.0, 1e-3] {
        let coupler = Coupler::new(&cp, Backends::full(), config(1e-12, delta)).unwrap();
        let b1 = random(&mut rng, cp.solver(Side::One).num_free());
        let b2 = random(&mut rng, cp.solver(Side::Two).num_free());
        let g = random(&mut rng, cp.num_control());
        let dirs: Vec<usize> = (0..cp.num_control()).collect();
        let chk = coupler.fd_gradient_check(1, [&b1, &b2], &g, 1e-6, &dirs).unwrap();
        assert!(chk.max_rel_error <= 1e-5, "delta {delta}: {}", chk.max_rel_error);
    }
}

#[test]
fn gradient_vanishes_at_the_optimum() {
    let p = rotating_problem(8, 1, 1e-3, false);
    let cp = CoupledProblem::new(&p).unwrap();
    let mono = MonolithicSolver::new(&p).unwrap();
    let u1m = mono.step(&mono.initial_state(), 1);
    let map1 = cp.parent_free_indices(Side::One, mono.dofs()).unwrap();
    let s1 = cp.solver(Side::One);
    let u0 = s1.initial_state(&p);
    let base1 = s1.base_rhs(&s1.forcing(&p, 1), &u0);
    let u1: Vec<f64> = map1.iter().map(|&k| u1m[k]).collect();
    let g = s1.implied_flux(&u1, &base1, cp.interface(), &cp.interface_mass);
    let coupler = Coupler::new(&cp, Backends::full(), config(1e-12, 0.0)).unwrap();
    let s2 = cp.solver(Side::Two);
    let base2 = s2.base_rhs(&s2.forcing(&p, 1), &s2.initial_state(&p));
    let v = coupler.evaluate(1, [&base1, &base2], &g);
    assert!(v <= 1e-20, "objective at the exact flux: {v}");
    let chk = coupler.fd_gradient_check(1, [&base1, &base2], &g, 1e-6, &[0, 3, 6]).unwrap();
    assert!(chk.analytic.iter().chain(&chk.fd).all(|d| d.abs() < 1e-9));
    let out = coupler.descent_timestep(1, [&base1, &base2], &g, &mut NoObserver).unwrap();
    assert_eq!(out.stats.iterations, 0);
    assert!(out.stats.converged);
}

#[test]
fn adjoint_duality_identity() {
    let p = rotating_problem(8, 1, 1e-3, false);
    let cp = CoupledProblem::new(&p).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let u1 = random(&mut rng, cp.solver(Side::One).num_free());
        let u2 = random(&mut rng, cp.solver(Side::Two).num_free());
        let gt = random(&mut rng, cp.num_control());
        let (l, r) = duality_pair(&cp, [&u1, &u2], &gt);
        assert!((l - r).abs() <= 1e-10 * l.abs().max(r.abs()), "{l} vs {r}");
    }
}

#[test]
fn coupled_fom_matches_monolithic() {
    let p = rotating_problem(8, 5, 1e-3, true);
    let cp = CoupledProblem::new(&p).unwrap();
    let mono = MonolithicSolver::new(&p).unwrap();
    let traj = mono.solve();
    let coupler = Coupler::new(&cp, Backends::full(), config(1e-12, 0.0)).unwrap();
    let res = coupler.run_transient(&mut NoObserver).unwrap();
    assert!(res.summary.converged());
    for side in Side::BOTH {
        let map = cp.parent_free_indices(side, mono.dofs()).unwrap();
        let want: Vec<f64> = map.iter().map(|&k| traj.states[5][k]).collect();
        let e = rel_diff(&res.final_states[side.index()], &want);
        assert!(e <= 1e-5, "side {side:?}: {e}");
    }
}

#[test]
fn accepted_objectives_never_increase() {
    let p = rotating_problem(8, 4, 1e-3, true);
    let cp = CoupledProblem::new(&p).unwrap();
    let coupler = Coupler::new(&cp, Backends::full(), config(1e-14, 1e-16)).unwrap();
    let res = coupler.run_transient(&mut NoObserver).unwrap();
    for s in &res.stats {
        assert!(s.monotone);
        assert!(s.objectives.windows(2).all(|w| w[1] <= w[0]), "step {}", s.step);
        assert_eq!(*s.objectives.last().unwrap(), s.final_objective);
    }
}

#[test]
fn zero_data_gives_zero_controls() {
    let mut p = rotating_problem(8, 3, 1e-3, true);
    p.initial.iter_mut().for_each(|v| *v = 0.0);
    let cp = CoupledProblem::new(&p).unwrap();
    let coupler = Coupler::new(&cp, Backends::full(), config(1e-14, 1e-16)).unwrap();
    let res = coupler.run_transient(&mut NoObserver).unwrap();
    assert!(res.controls.iter().flatten().all(|&g| g == 0.0));
    assert!(res.final_states.iter().flatten().all(|&u| u == 0.0));
    assert!(res.stats.iter().all(|s| s.iterations <= 1));
}

#[test]
fn update_with_zero_delta_is_plain_subtraction() {
    let alpha = 2.0f64;
    let g = [0.3f64, -1.7, 1e-300];
    let d = [0.1f64, 0.2, -0.3];
    for i in 0..3 {
        let a = (1.0 - alpha * 0.0) * g[i] - alpha * d[i];
        let b = g[i] - alpha * d[i];
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

struct Iterates(Vec<Vec<f64>>);

impl Observer for Iterates {
    fn wants_adjoints(&self) -> bool {
        true
    }
    fn adjoints(&mut self, _: usize, _: usize, mu: [&[f64]; 2]) {
        self.0.push(mu[0].iter().chain(mu[1]).copied().collect());
    }
}

#[test]
fn full_rank_rom_reproduces_fom_iterates() {
    let p = rotating_problem(8, 3, 1e-3, true);
    let cp = CoupledProblem::new(&p).unwrap();
    let full = Coupler::new(&cp, Backends::full(), config(1e-12, 1e-8)).unwrap();
    let mut fom_it = Iterates(Vec::new());
    let fom = full.run_transient(&mut fom_it).unwrap();

    // A rotated orthonormal basis, so the reduced path is really exercised.
    let bases: Vec<ReducedBasis> = Side::BOTH
        .iter()
        .map(|&s| {
            let n = cp.solver(s).num_free();
            let a = DenseMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) as f64 * 0.11).sin() + if i == j { 3.0 } else { 0.0 });
            let svd = obc_core::linalg::thin_svd(&a).unwrap();
            ReducedBasis { psi: svd.u, sigma: svd.sigma }
        })
        .collect();
    let backends = Backends::new(&cp, [Some(&bases[0]), Some(&bases[1])], [Some(&bases[0]), Some(&bases[1])]).unwrap();
    let rom = Coupler::new(&cp, backends, config(1e-12, 1e-8)).unwrap();
    let mut rom_it = Iterates(Vec::new());
    let res = rom.run_transient(&mut rom_it).unwrap();

    assert_eq!(fom_it.0.len(), rom_it.0.len());
    // Late iterates are tiny, so compare against the largest one.
    let scale = fom_it.0.iter().map(|a| obc_core::linalg::norm2(a)).fold(0.0, f64::max);
    for (a, b) in fom_it.0.iter().zip(&rom_it.0) {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        assert!(obc_core::linalg::norm2(&d) <= 1e-10 * scale);
    }
    for (a, b) in fom.controls.iter().zip(&res.controls) {
        assert!(rel_diff(b, a) <= 1e-10);
    }
    for s in 0..2 {
        assert!(rel_diff(&res.final_states[s], &fom.final_states[s]) <= 1e-10);
    }
}

#[test]
fn gdra_stores_one_pair_per_gradient() {
    let p = rotating_problem(8, 4, 1e-3, true);
    let cp = CoupledProblem::new(&p).unwrap();
    let coupler = Coupler::new(&cp, Backends::full(), config(1e-12, 1e-14)).unwrap();
    let ([a, b], res) = obc_core::snapshots::collect_gdra(&coupler).unwrap();
    assert_eq!(a.num_snapshots(), res.summary.total_iterations);
    assert_eq!(b.num_snapshots(), res.summary.total_iterations);
    let mut c = AdjointCollector::default();
    coupler.run_transient(&mut c).unwrap();
    assert_eq!(c.columns[0].len(), res.summary.total_iterations);
}

#[test]
fn converged_start_needs_no_iterations() {
    let p = rotating_problem(8, 1, 1e-3, false);
    let cp = CoupledProblem::new(&p).unwrap();
    let coupler = Coupler::new(&cp, Backends::full(), CouplingConfig { tol: 1e3, ..config(1.0, 0.0) }).unwrap();
    let z1 = vec![0.0; cp.solver(Side::One).num_free()];
    let z2 = vec![0.0; cp.solver(Side::Two).num_free()];
    let out = coupler.descent_timestep(1, [&z1, &z2], &vec![0.0; cp.num_control()], &mut NoObserver).unwrap();
    assert_eq!(out.stats.iterations, 0);
    assert!(out.states.iter().flatten().all(|&u| u == 0.0));
}

#[test]
fn invalid_settings_are_rejected() {
    let p = rotating_problem(4, 1, 1e-3, false);
    let cp = CoupledProblem::new(&p).unwrap();
    for bad in [
        CouplingConfig { delta: -1.0, ..CouplingConfig::default() },
        CouplingConfig { alpha: 0.0, ..CouplingConfig::default() },
        CouplingConfig { tol: 0.0, ..CouplingConfig::default() },
    ] {
        assert!(Coupler::new(&cp, Backends::full(), bad).is_err());
    }
}
