use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use obc_bench::{
    sci, write_results_csv, write_singular_values_csv, write_timing_csv, AdjointChoice, BenchmarkSpec, Experiment,
    ProjectionStats, RunSpec, StateChoice,
};
use obc_core::coupling::{Backends, Coupler, NoObserver};
use obc_core::rom::{snapshot_energy, PodBasis, SnapshotMatrix};
use obc_core::snapshots::{read_matrix, read_snapshots, write_matrix, write_snapshots, MgdConfig};
use obc_core::{Error, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "obc", version, about = "Optimization-based coupling of FOM/ROM advection-diffusion subdomains")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment description; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Elements per axis of the unit square mesh.
    #[arg(long, global = true)]
    level: Option<usize>,
    #[arg(long, global = true)]
    nu: Option<f64>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true)]
    final_time: Option<f64>,
    /// Number of time steps, overriding the final time.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Use the 64×64 full-rotation setting as the base configuration.
    #[arg(long, global = true)]
    full_rotation: bool,
    #[arg(long, global = true)]
    no_supg: bool,
    /// Output directory for snapshots and tables.
    #[arg(long, global = true, default_value = "obc-out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Monolithic reference run; writes state snapshots and the final state.
    Monolithic,
    /// Adjoint snapshot collection.
    CollectAdjoint {
        #[arg(long, value_enum)]
        method: Method,
        /// Adjoint pairs per time step (MGD only).
        #[arg(long, default_value_t = 1)]
        m: usize,
    },
    /// POD of a snapshot file.
    Pod {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        modes: usize,
    },
    /// One coupled run compared with the monolithic reference.
    Couple {
        #[arg(long, default_value = "fom")]
        state: String,
        #[arg(long, default_value = "full")]
        adjoint: String,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Exit with status 1 when any time step fails to converge.
        #[arg(long)]
        fail_on_nonconvergence: bool,
    },
    /// Runs every configured run and writes the result tables.
    Report {
        /// Write results, timing and singular value tables.
        #[arg(long)]
        tables: bool,
        /// Also tabulate adjoint projection errors onto the state and MGD bases.
        #[arg(long)]
        projections: bool,
    },
    /// Finite-difference gradient and duality checks on a small mesh.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Gdra,
    Mgd,
}

fn spec_from(common: &Common) -> obc_core::Result<BenchmarkSpec> {
    let mut spec = match &common.config {
        Some(p) => BenchmarkSpec::from_json_file(p)?,
        None if common.full_rotation => BenchmarkSpec::full_rotation(),
        None => BenchmarkSpec::default(),
    };
    if common.full_rotation && common.config.is_some() {
        spec.level = 64;
        spec.dt = obc_bench::ROTATION_DT;
    }
    if let Some(v) = common.level {
        spec.level = v;
    }
    if let Some(v) = common.nu {
        spec.nu = v;
    }
    if let Some(v) = common.dt {
        spec.dt = v;
    }
    if let Some(v) = common.final_time {
        spec.final_time = v;
    }
    if common.steps.is_some() {
        spec.steps = common.steps;
    }
    if common.no_supg {
        spec.supg = false;
    }
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    spec.validate()?;
    Ok(spec)
}

fn problem_meta(spec: &BenchmarkSpec, steps: usize) -> serde_json::Value {
    json!({
        "level": spec.level,
        "nu": spec.nu,
        "dt": spec.dt,
        "steps": steps,
        "supg": spec.supg,
    })
}

/// Loads saved monolithic data when it matches the problem, otherwise runs
/// and saves it.
fn monolithic(exp: &mut Experiment, out: &Path, force: bool) -> obc_core::Result<()> {
    let meta = problem_meta(&exp.spec, exp.num_steps());
    let paths = [out.join("state_1.snap"), out.join("state_2.snap"), out.join("reference.snap")];
    if !force && paths.iter().all(|p| p.exists()) {
        let (s1, m1) = read_snapshots(&paths[0])?;
        let (s2, _) = read_snapshots(&paths[1])?;
        let (r, _) = read_matrix(&paths[2])?;
        if m1.extra == meta {
            exp.set_monolithic([s1, s2], r.col(0).to_vec());
            return Ok(());
        }
    }
    std::fs::create_dir_all(out)?;
    exp.ensure_monolithic()?;
    let [s1, s2] = exp.state_snapshots()?.clone();
    write_snapshots(&paths[0], &s1, meta.clone())?;
    write_snapshots(&paths[1], &s2, meta.clone())?;
    let fin = exp.mono_final()?.to_vec();
    let n = fin.len();
    write_matrix(&paths[2], &obc_core::linalg::DenseMatrix::from_column_major(n, 1, fin)?, &meta)?;
    Ok(())
}

fn load_adjoint_pod(exp: &mut Experiment, out: &Path, key: &str) -> obc_core::Result<()> {
    let meta = problem_meta(&exp.spec, exp.num_steps());
    let paths = [out.join(format!("adjoint_{key}_1.snap")), out.join(format!("adjoint_{key}_2.snap"))];
    if paths.iter().all(|p| p.exists()) {
        let (a, ma) = read_snapshots(&paths[0])?;
        let (b, _) = read_snapshots(&paths[1])?;
        if ma.extra.get("problem") == Some(&meta) {
            exp.insert_adjoint_pod(key, [PodBasis::from_snapshots(&a.data)?, PodBasis::from_snapshots(&b.data)?]);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> obc_core::Result<ExitCode> {
    let spec = spec_from(&cli.common)?;
    let out = cli.common.out.clone();
    match cli.command {
        Command::Monolithic => {
            let mut exp = Experiment::new(spec)?;
            monolithic(&mut exp, &out, true)?;
            let steps = exp.num_steps();
            let s = &exp.state_snapshots()?[0];
            println!("monolithic: {steps} steps, {} x {} state snapshots per subdomain", s.num_dofs(), s.num_snapshots());
        }
        Command::CollectAdjoint { method, m } => {
            let mut exp = Experiment::new(spec)?;
            let meta = problem_meta(&exp.spec, exp.num_steps());
            let (key, snaps, extra) = match method {
                Method::Mgd => {
                    if m == 0 {
                        return Err(Error::InvalidArgument("--m must be positive".into()));
                    }
                    monolithic(&mut exp, &out, false)?;
                    let cfg = MgdConfig { m, delta: exp.spec.delta, alpha: exp.spec.alpha, threads: None };
                    let snaps = exp.mgd_snapshots(m)?;
                    (format!("mgd{m}"), snaps, json!({"problem": meta, "method": "mgd", "config": cfg, "initial_control": "zero"}))
                }
                Method::Gdra => {
                    let (snaps, result) = exp.gdra_snapshots()?;
                    println!("gdra: {:.1} iterations per step", result.summary.average_iterations);
                    let extra = json!({
                        "problem": meta,
                        "method": "gdra",
                        "delta": exp.spec.gdra_delta,
                        "tol": exp.spec.gdra_tol,
                    });
                    ("gdra".to_string(), snaps, extra)
                }
            };
            std::fs::create_dir_all(&out)?;
            for s in &snaps {
                let path = out.join(format!("adjoint_{key}_{}.snap", s.side.number()));
                write_snapshots(&path, s, extra.clone())?;
                println!("{}: {} x {}", path.display(), s.num_dofs(), s.num_snapshots());
            }
        }
        Command::Pod { input, modes } => {
            if modes == 0 {
                return Err(Error::InvalidArgument("--modes must be positive".into()));
            }
            let (snaps, meta) = read_snapshots(&input)?;
            let pod = PodBasis::from_snapshots(&snaps.data)?;
            let basis = pod.truncate(modes)?;
            let energy = snapshot_energy(&pod.sigma)?;
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("snapshots");
            let dir = input.parent().unwrap_or(Path::new("."));
            let path = dir.join(format!("{stem}_pod{modes}.snap"));
            let extra = json!({"source": input.display().to_string(), "modes": modes, "source_meta": meta.extra});
            let sm = SnapshotMatrix::new(basis.psi, snaps.kind, snaps.side)?;
            write_snapshots(&path, &sm, extra)?;
            write_singular_values_csv(&dir.join(format!("{stem}_sigma.csv")), &[(stem.to_string(), &pod)])?;
            println!("{}: {modes} modes, energy {:.15}", path.display(), energy[modes - 1]);
        }
        Command::Couple { state, adjoint, delta, tol, alpha, fail_on_nonconvergence } => {
            let state: StateChoice = state.parse()?;
            let adjoint: AdjointChoice = adjoint.parse()?;
            let mut spec = spec;
            if let Some(a) = alpha {
                spec.alpha = a;
            }
            let mut rs = RunSpec::new(state, adjoint);
            rs.delta = delta;
            rs.tol = tol;
            spec.runs = vec![rs.clone()];
            spec.validate()?;
            let mut exp = Experiment::new(spec)?;
            monolithic(&mut exp, &out, false)?;
            match adjoint {
                AdjointChoice::Mgd { m, .. } => load_adjoint_pod(&mut exp, &out, &format!("mgd{m}"))?,
                AdjointChoice::Gdra(_) => load_adjoint_pod(&mut exp, &out, "gdra")?,
                _ => {}
            }
            let (row, _) = exp.run(&rs, &mut NoObserver)?;
            std::fs::create_dir_all(&out)?;
            write_results_csv(&out.join("couple.csv"), std::slice::from_ref(&row))?;
            println!(
                "{}: rel L2 {} rel H1 {} avg iterations {} converged {}",
                row.method,
                sci(row.rel_l2),
                sci(row.rel_h1),
                row.avg_iterations,
                row.converged
            );
            if fail_on_nonconvergence && !row.converged {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Report { tables, projections } => {
            let mut exp = Experiment::new(spec)?;
            monolithic(&mut exp, &out, false)?;
            std::fs::create_dir_all(&out)?;
            let rows = exp.run_all();
            for r in &rows {
                println!("{:<10} {:>6} {:>6} {} {}", r.method, fmt_modes(r.state_modes), fmt_modes(r.adjoint_modes), sci(r.rel_l2), r.avg_iterations);
            }
            if tables {
                write_results_csv(&out.join("results.csv"), &rows)?;
                write_timing_csv(&out.join("timing.csv"), &rows)?;
                let state = exp.state_pod()?;
                let mut bases = vec![("state_1".to_string(), &state[0]), ("state_2".to_string(), &state[1])];
                let mgd = if exp.spec.runs.iter().any(|r| matches!(r.adjoint, AdjointChoice::Mgd { m: 1, .. })) {
                    Some(exp.mgd_pod(1)?)
                } else {
                    None
                };
                if let Some(p) = &mgd {
                    bases.push(("mgd1_1".to_string(), &p[0]));
                    bases.push(("mgd1_2".to_string(), &p[1]));
                }
                write_singular_values_csv(&out.join("singular_values.csv"), &bases)?;
            }
            if projections {
                let counts = exp.spec.projection_modes.clone();
                let state = exp.state_pod()?;
                let mgd1 = exp.mgd_pod(1)?;
                let mgd2 = exp.mgd_pod(2)?;
                let clip = |p: &PodBasis| counts.iter().copied().filter(|&c| c <= p.max_modes()).collect::<Vec<_>>();
                let mut stats = ProjectionStats::new(vec![
                    ("state".into(), state.clone(), clip(&state[0])),
                    ("mgd1".into(), mgd1.clone(), clip(&mgd1[0])),
                    ("mgd2".into(), mgd2.clone(), clip(&mgd2[0])),
                ]);
                let coupler = Coupler::new(&exp.coupled, Backends::full(), exp.spec.coupling_config(None))?;
                coupler.run_transient(&mut stats)?;
                stats.write_csv(&out.join("projection.csv"))?;
            }
            if rows.iter().any(|r| r.error.is_some()) {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Gradcheck { instances } => {
            let mut small = spec.clone();
            small.level = 8;
            small.supg = false;
            small.steps = Some(1);
            let problem = small.problem()?;
            let cp = obc_core::fom::CoupledProblem::new(&problem)?;
            let mut rng = ChaCha8Rng::seed_from_u64(small.seed);
            let nc = cp.num_control();
            let mut cfg = small.coupling_config(None);
            cfg.delta = 1e-3;
            let coupler = Coupler::new(&cp, Backends::full(), cfg)?;
            let (mut worst_fd, mut worst_dual) = (0.0f64, 0.0f64);
            for _ in 0..instances.max(1) {
                let rand_vec = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
                let b1 = rand_vec(&mut rng, cp.solver(Side::One).num_free());
                let b2 = rand_vec(&mut rng, cp.solver(Side::Two).num_free());
                let g = rand_vec(&mut rng, nc);
                let dirs: Vec<usize> = (0..nc).collect();
                let chk = coupler.fd_gradient_check(1, [&b1, &b2], &g, 1e-6, &dirs)?;
                worst_fd = worst_fd.max(chk.max_rel_error);
                let gt = rand_vec(&mut rng, nc);
                let (l, r) = obc_core::coupling::duality_pair(&cp, [&b1, &b2], &gt);
                worst_dual = worst_dual.max((l - r).abs() / l.abs().max(r.abs()).max(f64::MIN_POSITIVE));
            }
            println!("fd gradient max relative error {}", sci(worst_fd));
            println!("duality max relative residual {}", sci(worst_dual));
            if worst_fd > 1e-5 || worst_dual > 1e-10 {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn fmt_modes(m: Option<usize>) -> String {
    m.map_or_else(|| "full".into(), |n| n.to_string())
}

fn main() -> ExitCode {
    if let Ok(t) = std::env::var("OBC_THREADS") {
        match t.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("OBC_THREADS must be a positive integer, got `{t}`");
                return ExitCode::from(2);
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidArgument(_) | Error::DimensionMismatch(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
