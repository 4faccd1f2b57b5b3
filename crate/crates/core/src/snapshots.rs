//! Snapshot extraction, adjoint snapshot collection and SNAP1 persistence.
//!
//! SNAP1 layout, all integers little-endian:
//!
//! ```text
//! b"SNAP1"  u8 version (1)  u32 rows  u32 cols  u32 meta_len  meta_len bytes of JSON
//! rows*cols f64, column-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::{AdjointCollector, Coupler, TransientResult};
use crate::error::{invalid, mismatch, Error, Result};
use crate::fom::{parent_free_indices, CoupledProblem, Trajectory};
use crate::linalg::DenseMatrix;
use crate::rom::{SnapshotKind, SnapshotMatrix};
use crate::Side;

pub const MAGIC: &[u8; 5] = b"SNAP1";
pub const VERSION: u8 = 1;

/// Splits monolithic free-DOF vectors into the free DOFs of each subdomain.
/// Interface values appear in both.
pub fn split_monolithic_snapshots(traj: &Trajectory, cp: &CoupledProblem) -> Result<[SnapshotMatrix; 2]> {
    let dec = &cp.decomposition;
    let n_parent = dec.parent_dofs.num_free();
    if let Some(bad) = traj.states.iter().find(|s| s.len() != n_parent) {
        return Err(invalid(format!("snapshot of length {}, parent mesh has {n_parent} free DOFs", bad.len())));
    }
    let build = |side: Side| -> Result<SnapshotMatrix> {
        let map = parent_free_indices(dec, side, &dec.parent_dofs)?;
        let mut data = Vec::with_capacity(map.len() * traj.len());
        for s in &traj.states {
            data.extend(map.iter().map(|&k| s[k]));
        }
        SnapshotMatrix::new(DenseMatrix::from_column_major(map.len(), traj.len(), data)?, SnapshotKind::State, side)
    };
    Ok([build(Side::One)?, build(Side::Two)?])
}

/// Settings of the modified gradient descent collection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MgdConfig {
    /// Adjoint pairs stored per time level.
    pub m: usize,
    pub delta: f64,
    /// Fixed step size; the collection does not adapt it.
    pub alpha: f64,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for MgdConfig {
    fn default() -> Self {
        Self { m: 1, delta: 1e-16, alpha: 2.0, threads: None }
    }
}

/// The `m` adjoint pairs of time level `n`, computed from the stored states of
/// level `n − 1` with a zero initial control.
pub fn mgd_timestep(cp: &CoupledProblem, n: usize, prev: [&[f64]; 2], cfg: &MgdConfig) -> Vec<[Vec<f64>; 2]> {
    let imap = cp.interface();
    let iface = &cp.interface_mass;
    let bases: Vec<Vec<f64>> = Side::BOTH
        .iter()
        .map(|&s| {
            let solver = cp.solver(s);
            solver.base_rhs(&solver.forcing(&cp.problem, n), prev[s.index()])
        })
        .collect();
    let mut g = vec![0.0; cp.num_control()];
    let mut out = Vec::with_capacity(cfg.m);
    for _ in 0..cfg.m {
        let u1 = cp.solver(Side::One).solve_with_control(&bases[0], &g, imap, iface);
        let u2 = cp.solver(Side::Two).solve_with_control(&bases[1], &g, imap, iface);
        let j1 = cp.full_trace(Side::One, &u1, n);
        let j2 = cp.full_trace(Side::Two, &u2, n);
        let jump: Vec<f64> = j1.iter().zip(&j2).map(|(a, b)| a - b).collect();
        let w = iface.weighted_jump(&jump);
        let mu1 = cp.solver(Side::One).adjoint_solve(&w, imap);
        let mu2 = cp.solver(Side::Two).adjoint_solve(&w, imap);
        let t1 = imap.gather(Side::One, &mu1);
        let t2 = imap.gather(Side::Two, &mu2);
        let shrink = 1.0 - cfg.alpha * cfg.delta;
        for (gi, (a, b)) in g.iter_mut().zip(t1.iter().zip(&t2)) {
            *gi = shrink * *gi - cfg.alpha * (a - b);
        }
        out.push([mu1, mu2]);
    }
    out
}

/// MGDmRA adjoint snapshots: `m` pairs for every time level `1..=N`, where
/// `N + 1` is the number of state snapshot columns. Time levels are
/// independent and run in parallel; columns are ordered by time level.
pub fn collect_mgd(cp: &CoupledProblem, states: [&SnapshotMatrix; 2], cfg: &MgdConfig) -> Result<[SnapshotMatrix; 2]> {
    if cfg.m == 0 {
        return Err(invalid("MGD needs at least one iteration per time level"));
    }
    for side in Side::BOTH {
        let s = states[side.index()];
        if s.num_dofs() != cp.solver(side).num_free() {
            return Err(mismatch(format!(
                "state snapshots of subdomain {} have {} rows, expected {}",
                side.number(),
                s.num_dofs(),
                cp.solver(side).num_free()
            )));
        }
    }
    let cols = states[0].num_snapshots();
    if cols != states[1].num_snapshots() || cols < 2 {
        return Err(invalid("state snapshots must hold at least two matching columns"));
    }
    let levels = cols - 1;
    let work = |n: usize| mgd_timestep(cp, n, [states[0].data.col(n - 1), states[1].data.col(n - 1)], cfg);
    let per_level: Vec<Vec<[Vec<f64>; 2]>> = match cfg.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .map_err(|e| invalid(format!("thread pool: {e}")))?;
            pool.install(|| (1..=levels).into_par_iter().map(work).collect())
        }
        None => (1..=levels).into_par_iter().map(work).collect(),
    };
    let mut out = Vec::with_capacity(2);
    for side in Side::BOTH {
        let rows = cp.solver(side).num_free();
        let mut data = Vec::with_capacity(rows * levels * cfg.m);
        for pairs in &per_level {
            for p in pairs {
                data.extend_from_slice(&p[side.index()]);
            }
        }
        let m = DenseMatrix::from_column_major(rows, levels * cfg.m, data)?;
        out.push(SnapshotMatrix::new(m, SnapshotKind::AdjointMgd { m: cfg.m }, side)?);
    }
    let two = out.pop().expect("two sides");
    let one = out.pop().expect("two sides");
    Ok([one, two])
}

/// GDRA adjoint snapshots: every adjoint pair of a full transient coupled run.
pub fn collect_gdra(coupler: &Coupler<'_>) -> Result<([SnapshotMatrix; 2], TransientResult)> {
    let mut collector = AdjointCollector::default();
    let result = coupler.run_transient(&mut collector)?;
    let cp = coupler.problem();
    let [c1, c2] = collector.columns;
    let mk = |side: Side, cols: Vec<Vec<f64>>| -> Result<SnapshotMatrix> {
        let rows = cp.solver(side).num_free();
        let data = DenseMatrix::from_columns(rows, &cols)?;
        SnapshotMatrix::new(data, SnapshotKind::AdjointGdra, side)
    };
    Ok(([mk(Side::One, c1)?, mk(Side::Two, c2)?], result))
}

/// Metadata stored with every snapshot matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub kind: SnapshotKind,
    pub side: Side,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Encodes a matrix and its JSON metadata in SNAP1 format.
pub fn encode(m: &DenseMatrix, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.n_rows()).map_err(|_| invalid("row count exceeds u32"))?;
    let cols = u32::try_from(m.n_cols()).map_err(|_| invalid("column count exceeds u32"))?;
    let meta = serde_json::to_vec(meta)?;
    let meta_len = u32::try_from(meta.len()).map_err(|_| invalid("metadata exceeds u32"))?;
    let mut out = Vec::with_capacity(18 + meta.len() + 8 * m.data().len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(&meta);
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated file while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Decodes a SNAP1 stream.
pub fn decode(r: &mut impl Read) -> Result<(DenseMatrix, serde_json::Value)> {
    let mut magic = [0u8; 5];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut version = [0u8; 1];
    read_exact(r, &mut version, "version")?;
    if version[0] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", version[0])));
    }
    let rows = read_u32(r, "row count")? as usize;
    let cols = read_u32(r, "column count")? as usize;
    let meta_len = read_u32(r, "metadata length")? as usize;
    let mut meta = vec![0u8; meta_len];
    read_exact(r, &mut meta, "metadata")?;
    let meta: serde_json::Value = serde_json::from_slice(&meta)?;
    let count = rows.checked_mul(cols).ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let bytes = count.checked_mul(8).ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let mut raw = vec![0u8; bytes];
    read_exact(r, &mut raw, "values")?;
    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Ok((DenseMatrix::from_column_major(rows, cols, data)?, meta))
}

pub fn write_matrix(path: &Path, m: &DenseMatrix, meta: &serde_json::Value) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&encode(m, meta)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<(DenseMatrix, serde_json::Value)> {
    decode(&mut BufReader::new(fs::File::open(path)?))
}

pub fn write_snapshots(path: &Path, s: &SnapshotMatrix, extra: serde_json::Value) -> Result<()> {
    let meta = SnapshotMeta { kind: s.kind, side: s.side, extra };
    write_matrix(path, &s.data, &serde_json::to_value(meta)?)
}

pub fn read_snapshots(path: &Path) -> Result<(SnapshotMatrix, SnapshotMeta)> {
    let (data, meta) = read_matrix(path)?;
    let meta: SnapshotMeta =
        serde_json::from_value(meta).map_err(|e| Error::Format(format!("snapshot metadata: {e}")))?;
    Ok((SnapshotMatrix::new(data, meta.kind, meta.side)?, meta))
}

/// Named snapshot matrices, persisted as one SNAP1 file per entry in a directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SnapshotStore {
    pub entries: BTreeMap<String, (SnapshotMatrix, serde_json::Value)>,
}

impl SnapshotStore {
    pub fn insert(&mut self, name: impl Into<String>, s: SnapshotMatrix, extra: serde_json::Value) {
        self.entries.insert(name.into(), (s, extra));
    }

    pub fn get(&self, name: &str) -> Option<&SnapshotMatrix> {
        self.entries.get(name).map(|e| &e.0)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, (s, extra)) in &self.entries {
            write_snapshots(&dir.join(format!("{name}.snap")), s, extra.clone())?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mut store = Self::default();
        let mut paths: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "snap"))
            .collect();
        paths.sort();
        for p in paths {
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let (s, meta) = read_snapshots(&p)?;
            store.insert(name, s, meta.extra);
        }
        Ok(store)
    }
}
