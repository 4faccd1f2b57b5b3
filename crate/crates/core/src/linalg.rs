//! Matrix kernels: CSR assembly and products, banded LU for the finite
//! element systems, dense LU for reduced systems, and the thin SVD used by POD.
//!
//! Every system matrix is factored once and the factors are reused for all
//! right-hand sides of a run.

use faer::linalg::solvers::Solve;
use faer::Mat;

use crate::error::{invalid, mismatch, Error, Result};

/// Compressed sparse row matrix with sorted, unique column indices per row.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` entries; duplicates are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, entries: &[(usize, usize, f64)]) -> Result<Self> {
        let mut counts = vec![0usize; n_rows + 1];
        for &(r, c, v) in entries {
            if r >= n_rows || c >= n_cols {
                return Err(invalid(format!("entry ({r}, {c}) outside {n_rows} x {n_cols}")));
            }
            if !v.is_finite() {
                return Err(invalid(format!("non-finite entry at ({r}, {c})")));
            }
            counts[r + 1] += 1;
        }
        for r in 0..n_rows {
            counts[r + 1] += counts[r];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; entries.len()];
        let mut vals = vec![0.0; entries.len()];
        for &(r, c, v) in entries {
            cols[next[r]] = c;
            vals[next[r]] = v;
            next[r] += 1;
        }
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        row_ptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for r in 0..n_rows {
            scratch.clear();
            scratch.extend((counts[r]..counts[r + 1]).map(|k| (cols[k], vals[k])));
            scratch.sort_by_key(|e| e.0);
            for &(c, v) in &scratch {
                if col_idx.len() > row_ptr[r] && *col_idx.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self { n_rows, n_cols, row_ptr, col_idx, values })
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self { n_rows, n_cols, row_ptr: vec![0; n_rows + 1], col_idx: Vec::new(), values: Vec::new() }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.col_idx[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map_or(0.0, |k| vals[k])
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_rows];
        self.matvec_acc(x, 1.0, &mut y);
        y
    }

    /// `y += scale * A x`.
    pub fn matvec_acc(&self, x: &[f64], scale: f64, y: &mut [f64]) {
        assert_eq!(x.len(), self.n_cols, "matvec: input length");
        assert_eq!(y.len(), self.n_rows, "matvec: output length");
        for (r, yr) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(r);
            let s: f64 = cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum();
            *yr += scale * s;
        }
    }

    /// `y = Aᵀ x`.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_rows, "tr_matvec: input length");
        let mut y = vec![0.0; self.n_cols];
        for (r, &xr) in x.iter().enumerate() {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                y[c] += v * xr;
            }
        }
        y
    }

    pub fn transpose(&self) -> Self {
        let entries: Vec<_> = self.triplets().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.n_cols, self.n_rows, &entries).expect("transpose of a valid matrix")
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// `Σ cₖ Aₖ` over matrices of equal shape.
    pub fn linear_combination(terms: &[(f64, &CsrMatrix)]) -> Result<Self> {
        let (n_rows, n_cols) = match terms.first() {
            Some((_, m)) => (m.n_rows, m.n_cols),
            None => return Err(invalid("empty linear combination")),
        };
        let mut entries = Vec::new();
        for (c, m) in terms {
            if (m.n_rows, m.n_cols) != (n_rows, n_cols) {
                return Err(mismatch("linear combination of matrices with different shapes"));
            }
            entries.extend(m.triplets().map(|(r, k, v)| (r, k, c * v)));
        }
        Self::from_triplets(n_rows, n_cols, &entries)
    }

    /// Submatrix on the given row and column index lists.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut col_map = vec![usize::MAX; self.n_cols];
        for (k, &c) in cols.iter().enumerate() {
            col_map[c] = k;
        }
        let mut entries = Vec::new();
        for (new_r, &r) in rows.iter().enumerate() {
            let (cs, vs) = self.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                if col_map[c] != usize::MAX {
                    entries.push((new_r, col_map[c], v));
                }
            }
        }
        Self::from_triplets(rows.len(), cols.len(), &entries).expect("selection of a valid matrix")
    }

    /// `A X` for a dense `X`.
    pub fn mul_dense(&self, x: &DenseMatrix) -> DenseMatrix {
        assert_eq!(x.n_rows(), self.n_cols, "mul_dense: inner dimension");
        let mut out = DenseMatrix::zeros(self.n_rows, x.n_cols());
        for j in 0..x.n_cols() {
            let xc = x.col(j);
            let oc = out.col_mut(j);
            for (r, o) in oc.iter_mut().enumerate() {
                let (cols, vals) = self.row(r);
                *o = cols.iter().zip(vals).map(|(&c, &v)| v * xc[c]).sum();
            }
        }
        out
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.n_rows, self.n_cols);
        for (r, c, v) in self.triplets() {
            d[(r, c)] += v;
        }
        d
    }

    /// Lower and upper bandwidths of the stored pattern.
    pub fn bandwidths(&self) -> (usize, usize) {
        let (mut lower, mut upper) = (0, 0);
        for (r, c, _) in self.triplets() {
            if r > c {
                lower = lower.max(r - c);
            } else {
                upper = upper.max(c - r);
            }
        }
        (lower, upper)
    }

    /// Largest absolute difference between `A` and `Aᵀ`.
    pub fn asymmetry(&self) -> f64 {
        self.triplets().map(|(r, c, v)| (v - self.get(c, r)).abs()).fold(0.0, f64::max)
    }
}

/// LU factorization with partial pivoting of a banded matrix.
///
/// Storage follows the LAPACK `gbtrf` layout: row `i` keeps columns
/// `i - kl ..= i + kl + ku` of the evolving upper factor, and the multipliers
/// of step `k` are stored separately so that later row interchanges leave
/// them untouched.
#[derive(Clone, Debug)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    band: Vec<f64>,
    multipliers: Vec<f64>,
    pivots: Vec<usize>,
}

impl BandedLu {
    pub fn factorize(a: &CsrMatrix) -> Result<Self> {
        if a.n_rows() != a.n_cols() {
            return Err(invalid(format!("cannot factor a {} x {} matrix", a.n_rows(), a.n_cols())));
        }
        let n = a.n_rows();
        let (kl, ku) = a.bandwidths();
        let width = 2 * kl + ku + 1;
        let mut band = vec![0.0; n * width];
        for (r, c, v) in a.triplets() {
            band[r * width + (c + kl - r)] = v;
        }
        let scale = a.triplets().map(|(_, _, v)| v.abs()).fold(0.0, f64::max);
        let mut multipliers = vec![0.0; n * kl];
        let mut pivots = vec![0usize; n];
        let at = |i: usize, j: usize| i * width + (j + kl - i);
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = band[at(k, k)].abs();
            for i in k + 1..=last {
                let v = band[at(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > f64::EPSILON * scale * n as f64) || !best.is_finite() {
                return Err(Error::Factorization(format!("zero pivot in column {k}")));
            }
            pivots[k] = p;
            let right = (k + kl + ku).min(n - 1);
            if p != k {
                for j in k..=right {
                    band.swap(at(k, j), at(p, j));
                }
            }
            let pivot = band[at(k, k)];
            for i in k + 1..=last {
                let l = band[at(i, k)] / pivot;
                multipliers[k * kl + (i - k - 1)] = l;
                band[at(i, k)] = 0.0;
                if l != 0.0 {
                    for j in k + 1..=right {
                        band[at(i, j)] -= l * band[at(k, j)];
                    }
                }
            }
        }
        Ok(Self { n, kl, ku, width, band, multipliers, pivots })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n, "banded solve: right-hand side length");
        let (n, kl, w) = (self.n, self.kl, self.width);
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                x.swap(k, p);
            }
            let xk = x[k];
            if xk != 0.0 {
                let last = (k + kl).min(n - 1);
                for i in k + 1..=last {
                    x[i] -= self.multipliers[k * kl + (i - k - 1)] * xk;
                }
            }
        }
        for k in (0..n).rev() {
            let right = (k + kl + self.ku).min(n - 1);
            let row = &self.band[k * w..(k + 1) * w];
            let mut s = x[k];
            for j in k + 1..=right {
                s -= row[j + kl - k] * x[j];
            }
            x[k] = s / row[kl];
        }
    }
}

/// Column-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self { n_rows, n_cols, data: vec![0.0; n_rows * n_cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_column_major(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_rows * n_cols {
            return Err(mismatch(format!("{} values for a {n_rows} x {n_cols} matrix", data.len())));
        }
        Ok(Self { n_rows, n_cols, data })
    }

    pub fn from_fn(n_rows: usize, n_cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n_rows, n_cols);
        for j in 0..n_cols {
            for i in 0..n_rows {
                m.data[j * n_rows + i] = f(i, j);
            }
        }
        m
    }

    /// Matrix whose columns are the given equal-length vectors.
    pub fn from_columns<V: AsRef<[f64]>>(n_rows: usize, columns: &[V]) -> Result<Self> {
        let mut data = Vec::with_capacity(n_rows * columns.len());
        for c in columns {
            let c = c.as_ref();
            if c.len() != n_rows {
                return Err(mismatch(format!("column of length {} in a {n_rows}-row matrix", c.len())));
            }
            data.extend_from_slice(c);
        }
        Ok(Self { n_rows, n_cols: columns.len(), data })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.n_rows..(j + 1) * self.n_rows]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.n_rows..(j + 1) * self.n_rows]
    }

    pub fn push_column(&mut self, c: &[f64]) -> Result<()> {
        if self.n_cols == 0 && self.data.is_empty() && self.n_rows == 0 {
            self.n_rows = c.len();
        }
        if c.len() != self.n_rows {
            return Err(mismatch(format!("column of length {} in a {}-row matrix", c.len(), self.n_rows)));
        }
        self.data.extend_from_slice(c);
        self.n_cols += 1;
        Ok(())
    }

    /// First `k` columns.
    pub fn leading_columns(&self, k: usize) -> Self {
        let k = k.min(self.n_cols);
        Self { n_rows: self.n_rows, n_cols: k, data: self.data[..k * self.n_rows].to_vec() }
    }

    /// Rows with the given indices, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self::from_fn(rows.len(), self.n_cols, |i, j| self[(rows[i], j)])
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_rows];
        self.matvec_acc(x, 1.0, &mut y);
        y
    }

    /// `y += scale * A x`.
    pub fn matvec_acc(&self, x: &[f64], scale: f64, y: &mut [f64]) {
        assert_eq!(x.len(), self.n_cols, "dense matvec: input length");
        assert_eq!(y.len(), self.n_rows, "dense matvec: output length");
        for (j, &xj) in x.iter().enumerate() {
            let s = scale * xj;
            if s != 0.0 {
                for (yi, &a) in y.iter_mut().zip(self.col(j)) {
                    *yi += a * s;
                }
            }
        }
    }

    /// `y = Aᵀ x`.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_rows, "dense tr_matvec: input length");
        (0..self.n_cols).map(|j| dot(self.col(j), x)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.n_cols, self.n_rows, |i, j| self[(j, i)])
    }

    /// `A B`.
    pub fn matmul(&self, b: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.n_cols, b.n_rows, "matmul: inner dimension");
        from_faer(&(self.to_faer() * b.to_faer()))
    }

    /// `Aᵀ B`.
    pub fn tr_matmul(&self, b: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.n_rows, b.n_rows, "tr_matmul: inner dimension");
        from_faer(&(self.to_faer().transpose() * b.to_faer()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.n_rows, self.n_cols), (other.n_rows, other.n_cols));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub(crate) fn to_faer(&self) -> Mat<f64> {
        Mat::from_fn(self.n_rows, self.n_cols, |i, j| self.data[j * self.n_rows + i])
    }
}

fn from_faer(m: &Mat<f64>) -> DenseMatrix {
    DenseMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[j * self.n_rows + i]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[j * self.n_rows + i]
    }
}

/// Dense LU with partial pivoting. Factors come from faer; the solve runs on
/// row-major copies, which is faster for the many small reduced solves.
#[derive(Clone, Debug)]
pub struct DenseLu {
    n: usize,
    /// Row-major combined factors: unit lower part below the diagonal.
    lu: Vec<f64>,
    /// `perm[i]` is the row of the original system that ends up in row `i`.
    perm: Vec<usize>,
}

impl DenseLu {
    pub fn factorize(a: &DenseMatrix) -> Result<Self> {
        if a.n_rows() != a.n_cols() {
            return Err(invalid(format!("cannot factor a {} x {} matrix", a.n_rows(), a.n_cols())));
        }
        if a.data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite matrix entry"));
        }
        let n = a.n_rows();
        let fa = a.to_faer();
        let plu = fa.partial_piv_lu();
        let (l, u) = (plu.L(), plu.U());
        let scale = a.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut lu = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                lu[i * n + j] = if j < i { l[(i, j)] } else { u[(i, j)] };
            }
            let d = u[(i, i)].abs();
            if !(d > f64::EPSILON * scale) || !d.is_finite() {
                return Err(Error::Factorization(format!("singular reduced matrix (pivot {i})")));
            }
        }
        let (fwd, _) = plu.P().arrays();
        let perm = fwd.to_vec();
        let out = Self { n, lu, perm };
        // faer's permutation convention is checked once against the input.
        let probe: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64).collect();
        let x = out.solve(&a.matvec(&probe));
        let err = x.iter().zip(&probe).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if !(err < 1e-6 * probe.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
            // Fall back to the inverse permutation convention.
            let (_, bwd) = plu.P().arrays();
            let alt = Self { n, lu: out.lu, perm: bwd.to_vec() };
            return Ok(alt);
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n, "dense solve: right-hand side length");
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = &self.lu[i * n..i * n + i];
            let s: f64 = row.iter().zip(&x[..i]).map(|(l, v)| l * v).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let row = &self.lu[i * n..(i + 1) * n];
            let s: f64 = row[i + 1..].iter().zip(&x[i + 1..]).map(|(u, v)| u * v).sum();
            x[i] = (x[i] - s) / row[i];
        }
        x
    }
}

/// Economy-size SVD `S = U diag(σ) Vᵀ`.
#[derive(Clone, Debug)]
pub struct ThinSvd {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub vt: DenseMatrix,
}

pub fn thin_svd(s: &DenseMatrix) -> Result<ThinSvd> {
    if s.data.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite entry in SVD input"));
    }
    if s.n_rows == 0 || s.n_cols == 0 {
        return Err(invalid("SVD of an empty matrix"));
    }
    let svd = s.to_faer().thin_svd().map_err(|_| Error::SvdNoConvergence)?;
    let k = s.n_rows.min(s.n_cols);
    let diag = svd.S().column_vector();
    let mut order: Vec<usize> = (0..k).collect();
    // faer returns nonincreasing values already; sort defensively against ties
    // in the opposite order so the contract holds regardless.
    order.sort_by(|&a, &b| diag[b].abs().total_cmp(&diag[a].abs()));
    let (u, v) = (svd.U(), svd.V());
    let sigma: Vec<f64> = order.iter().map(|&c| diag[c].abs()).collect();
    let umat = DenseMatrix::from_fn(s.n_rows, k, |i, j| {
        let c = order[j];
        if diag[c] < 0.0 {
            -u[(i, c)]
        } else {
            u[(i, c)]
        }
    });
    let vt = DenseMatrix::from_fn(k, s.n_cols, |i, j| v[(j, order[i])]);
    Ok(ThinSvd { u: umat, sigma, vt })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += s * x`.
pub fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

/// One-off dense solve.
pub fn dense_solve(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if a.n_rows() != a.n_cols() || b.len() != a.n_rows() {
        return Err(mismatch("dense solve dimensions"));
    }
    let rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
    let x = a.to_faer().partial_piv_lu().solve(&rhs);
    Ok((0..b.len()).map(|i| x[(i, 0)]).collect())
}
