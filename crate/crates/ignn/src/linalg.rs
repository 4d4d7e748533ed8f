//! Dense and sparse matrix primitives.
//!
//! A minimal, row-major dense matrix type plus a CSR sparse adjacency type,
//! with the norms and the Perron-Frobenius eigenvalue estimation the rest of
//! the crate is built on. All arithmetic is 64-bit; every exported operation
//! runs sequentially so results are bit-reproducible across runs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;
use thiserror::Error;

/// Default tolerance for [`pf_eigen`].
pub const PF_TOL: f64 = 1e-8;
/// Default iteration cap for [`pf_eigen`].
pub const PF_MAX_ITER: usize = 10_000;
/// Kronecker products larger than this many entries are refused.
pub const KRON_ENTRY_GUARD: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: {op} expects {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("matrix data length {got} does not match {rows}x{cols}")]
    InvalidDataLength { rows: usize, cols: usize, got: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFiniteEntry { row: usize, col: usize },
    #[error("negative entry at ({row}, {col}): Perron-Frobenius theory requires a nonnegative matrix")]
    NegativeEntry { row: usize, col: usize },
    #[error("invalid CSR structure: {0}")]
    InvalidCsr(String),
    #[error("Kronecker product would have {entries} entries (guard is {KRON_ENTRY_GUARD})")]
    KronTooLarge { entries: usize },
    #[error("power iteration did not converge within {iterations} iterations (last estimate {estimate})")]
    PowerIterationStalled { iterations: usize, estimate: f64 },
}

/// Row-major dense matrix of `f64` values.
///
/// Invariants: `data.len() == rows * cols` and every entry is finite. Both are
/// checked on construction; the arithmetic in this crate preserves them.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::InvalidDataLength {
                rows,
                cols,
                got: data.len(),
            });
        }
        let m = Self { rows, cols, data };
        m.check_finite()?;
        Ok(m)
    }

    /// Builds from row slices; panics on ragged input (test/fixture helper).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data).expect("finite row data")
    }

    fn check_finite(&self) -> Result<(), LinalgError> {
        for (idx, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(LinalgError::NonFiniteEntry {
                    row: idx / self.cols.max(1),
                    col: idx % self.cols.max(1),
                });
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn abs(&self) -> DenseMatrix {
        self.map(f64::abs)
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn sub(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// self += s * other
    pub fn add_scaled_in_place(&mut self, other: &DenseMatrix, s: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn hadamard(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// Largest absolute entry (the vectorized infinity norm).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Max-row-sum norm.
    pub fn inf_norm(&self) -> f64 {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Max-column-sum norm.
    pub fn one_norm(&self) -> f64 {
        let mut sums = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r).iter().enumerate() {
                sums[c] += v.abs();
            }
        }
        sums.into_iter().fold(0.0, f64::max)
    }

    /// Column-stacking vectorization.
    pub fn vectorize(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.data[r * self.cols + c]);
            }
        }
        out
    }

    pub fn from_vectorized(rows: usize, cols: usize, vec: &[f64]) -> Result<Self, LinalgError> {
        if vec.len() != rows * cols {
            return Err(LinalgError::InvalidDataLength {
                rows,
                cols,
                got: vec.len(),
            });
        }
        let mut m = Self::zeros(rows, cols);
        for c in 0..cols {
            for r in 0..rows {
                m.data[r * cols + c] = vec[c * rows + r];
            }
        }
        m.check_finite()?;
        Ok(m)
    }
}

/// Dense product `L * R`.
pub fn matmul(l: &DenseMatrix, r: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    if l.cols != r.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul",
            expected: format!("inner dims equal ({}x{} * ?x?)", l.rows, l.cols),
            got: format!("{}x{}", r.rows, r.cols),
        });
    }
    let mut out = DenseMatrix::zeros(l.rows, r.cols);
    for i in 0..l.rows {
        for k in 0..l.cols {
            let lik = l.data[i * l.cols + k];
            if lik == 0.0 {
                continue;
            }
            let rrow = &r.data[k * r.cols..(k + 1) * r.cols];
            let orow = &mut out.data[i * r.cols..(i + 1) * r.cols];
            for (o, rv) in orow.iter_mut().zip(rrow) {
                *o += lik * rv;
            }
        }
    }
    Ok(out)
}

/// Compressed-sparse-row square nonnegative matrix, used for graph adjacency.
///
/// The max-column-sum norm is cached eagerly; the Perron-Frobenius eigenvalue
/// is computed lazily on first use and cached.
#[derive(Debug, Clone)]
pub struct SparseAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    cached_one_norm: f64,
    cached_pf: OnceLock<f64>,
}

impl PartialEq for SparseAdjacency {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
            && self.row_ptr == other.row_ptr
            && self.col_idx == other.col_idx
            && self.values == other.values
    }
}

impl SparseAdjacency {
    /// Builds CSR from (row, col, value) triplets. Duplicate coordinates are
    /// summed; zero values are dropped.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self, LinalgError> {
        for &(r, c, v) in triplets {
            if r >= n || c >= n {
                return Err(LinalgError::InvalidCsr(format!(
                    "index ({r}, {c}) out of range for n = {n}"
                )));
            }
            if !v.is_finite() {
                return Err(LinalgError::NonFiniteEntry { row: r, col: c });
            }
            if v < 0.0 {
                return Err(LinalgError::NegativeEntry { row: r, col: c });
            }
        }
        let mut sorted: Vec<(usize, usize, f64)> = triplets
            .iter()
            .copied()
            .filter(|&(_, _, v)| v != 0.0)
            .collect();
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(sorted.len());
        for (r, c, v) in sorted {
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        let mut row_ptr = vec![0usize; n + 1];
        for &(r, _, _) in &merged {
            row_ptr[r + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx = merged.iter().map(|t| t.1).collect();
        let values = merged.iter().map(|t| t.2).collect();
        Self::from_csr(n, row_ptr, col_idx, values)
    }

    /// Builds directly from CSR arrays, validating the structure.
    pub fn from_csr(
        n: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self, LinalgError> {
        if row_ptr.len() != n + 1 {
            return Err(LinalgError::InvalidCsr(format!(
                "row_ptr length {} != n + 1 = {}",
                row_ptr.len(),
                n + 1
            )));
        }
        if row_ptr[0] != 0 || row_ptr[n] != col_idx.len() || col_idx.len() != values.len() {
            return Err(LinalgError::InvalidCsr(
                "row_ptr endpoints must bracket the nonzero arrays".into(),
            ));
        }
        for w in row_ptr.windows(2) {
            if w[1] < w[0] {
                return Err(LinalgError::InvalidCsr("row_ptr not monotone".into()));
            }
        }
        for (k, &c) in col_idx.iter().enumerate() {
            if c >= n {
                return Err(LinalgError::InvalidCsr(format!(
                    "column index {c} out of range at position {k}"
                )));
            }
        }
        for (k, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(LinalgError::NonFiniteEntry {
                    row: 0,
                    col: col_idx[k],
                });
            }
            if v < 0.0 {
                return Err(LinalgError::NegativeEntry {
                    row: 0,
                    col: col_idx[k],
                });
            }
        }
        let mut col_sums = vec![0.0; n];
        for (k, &c) in col_idx.iter().enumerate() {
            col_sums[c] += values[k];
        }
        let cached_one_norm = col_sums.into_iter().fold(0.0, f64::max);
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            values,
            cached_one_norm,
            cached_pf: OnceLock::new(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let triplets: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 1.0)).collect();
        Self::from_triplets(n, &triplets).expect("identity is valid CSR")
    }

    pub fn empty(n: usize) -> Self {
        Self::from_csr(n, vec![0; n + 1], Vec::new(), Vec::new()).expect("empty CSR")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates (row, col, value) in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (r, self.col_idx[k], self.values[k]))
        })
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (self.col_idx[k], self.values[k]))
    }

    /// Max-column-sum norm (cached at construction).
    pub fn one_norm(&self) -> f64 {
        self.cached_one_norm
    }

    /// Max-row-sum norm.
    pub fn inf_norm(&self) -> f64 {
        (0..self.n)
            .map(|r| self.row_entries(r).map(|(_, v)| v).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Perron-Frobenius eigenvalue with default tolerances, cached after the
    /// first successful computation.
    pub fn lambda_pf(&self) -> Result<f64, LinalgError> {
        if let Some(&v) = self.cached_pf.get() {
            return Ok(v);
        }
        let (lambda, _) = pf_eigen(self, PF_TOL, PF_MAX_ITER)?;
        Ok(*self.cached_pf.get_or_init(|| lambda))
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.n, self.n);
        for (r, c, v) in self.iter() {
            out.data[r * self.n + c] += v;
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        let dense = self.to_dense();
        for r in 0..self.n {
            for c in (r + 1)..self.n {
                if dense.get(r, c) != dense.get(c, r) {
                    return false;
                }
            }
        }
        true
    }
}

/// `X * A` with dense `X` (m x n) and sparse `A` (n x n).
///
/// Matches `matmul(X, A.to_dense())` up to floating-point association order;
/// accumulation within each output row is sequential so results are
/// deterministic.
pub fn rmul_sparse(x: &DenseMatrix, a: &SparseAdjacency) -> Result<DenseMatrix, LinalgError> {
    if x.cols != a.n {
        return Err(LinalgError::DimensionMismatch {
            op: "rmul_sparse",
            expected: format!("X cols = {}", a.n),
            got: format!("{}", x.cols),
        });
    }
    let mut out = DenseMatrix::zeros(x.rows, a.n);
    for r in 0..x.rows {
        let xrow = &x.data[r * x.cols..(r + 1) * x.cols];
        let orow = &mut out.data[r * a.n..(r + 1) * a.n];
        for i in 0..a.n {
            let xi = xrow[i];
            if xi == 0.0 {
                continue;
            }
            for k in a.row_ptr[i]..a.row_ptr[i + 1] {
                orow[a.col_idx[k]] += xi * a.values[k];
            }
        }
    }
    Ok(out)
}

/// `X * A^T` with dense `X` (m x n) and sparse `A` (n x n).
pub fn rmul_sparse_transposed(
    x: &DenseMatrix,
    a: &SparseAdjacency,
) -> Result<DenseMatrix, LinalgError> {
    if x.cols != a.n {
        return Err(LinalgError::DimensionMismatch {
            op: "rmul_sparse_transposed",
            expected: format!("X cols = {}", a.n),
            got: format!("{}", x.cols),
        });
    }
    let mut out = DenseMatrix::zeros(x.rows, a.n);
    for r in 0..x.rows {
        let xrow = &x.data[r * x.cols..(r + 1) * x.cols];
        let orow = &mut out.data[r * a.n..(r + 1) * a.n];
        for (j, o) in orow.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in a.row_ptr[j]..a.row_ptr[j + 1] {
                acc += xrow[a.col_idx[k]] * a.values[k];
            }
            *o = acc;
        }
    }
    Ok(out)
}

/// Kronecker product `A (x) B`, materialized densely.
///
/// Intended for small test instances; refuses products beyond
/// [`KRON_ENTRY_GUARD`] entries.
pub fn kron_materialize(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    let entries = a
        .rows
        .saturating_mul(b.rows)
        .saturating_mul(a.cols)
        .saturating_mul(b.cols);
    if entries > KRON_ENTRY_GUARD {
        return Err(LinalgError::KronTooLarge { entries });
    }
    let (rows, cols) = (a.rows * b.rows, a.cols * b.cols);
    let mut out = DenseMatrix::zeros(rows, cols);
    for i in 0..a.rows {
        for j in 0..a.cols {
            let aij = a.data[i * a.cols + j];
            if aij == 0.0 {
                continue;
            }
            for r in 0..b.rows {
                for c in 0..b.cols {
                    out.data[(i * b.rows + r) * cols + (j * b.cols + c)] =
                        aij * b.data[r * b.cols + c];
                }
            }
        }
    }
    Ok(out)
}

/// A square nonnegative matrix that power iteration can drive.
pub trait PerronOperand {
    fn dim(&self) -> usize;
    /// y = S x; `y` is zeroed by the caller.
    fn matvec_into(&self, x: &[f64], y: &mut [f64]);
    /// Visits the (row, col) pattern of structurally nonzero entries.
    fn visit_pattern(&self, f: &mut dyn FnMut(usize, usize));
    /// Max-row-sum norm, used to scale the diagonal shift.
    fn scale_norm(&self) -> f64;
    /// Errors if any entry is negative.
    fn ensure_nonnegative(&self) -> Result<(), LinalgError>;
}

impl PerronOperand for DenseMatrix {
    fn dim(&self) -> usize {
        self.rows
    }

    fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (v, xv) in row.iter().zip(x) {
                acc += v * xv;
            }
            y[r] = acc;
        }
    }

    fn visit_pattern(&self, f: &mut dyn FnMut(usize, usize)) {
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.data[r * self.cols + c] != 0.0 {
                    f(r, c);
                }
            }
        }
    }

    fn scale_norm(&self) -> f64 {
        self.inf_norm()
    }

    fn ensure_nonnegative(&self) -> Result<(), LinalgError> {
        if self.rows != self.cols {
            return Err(LinalgError::DimensionMismatch {
                op: "pf_eigen",
                expected: "square matrix".into(),
                got: format!("{}x{}", self.rows, self.cols),
            });
        }
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.data[r * self.cols + c] < 0.0 {
                    return Err(LinalgError::NegativeEntry { row: r, col: c });
                }
            }
        }
        Ok(())
    }
}

impl PerronOperand for SparseAdjacency {
    fn dim(&self) -> usize {
        self.n
    }

    fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[r] = acc;
        }
    }

    fn visit_pattern(&self, f: &mut dyn FnMut(usize, usize)) {
        for (r, c, _) in self.iter() {
            f(r, c);
        }
    }

    fn scale_norm(&self) -> f64 {
        self.inf_norm()
    }

    fn ensure_nonnegative(&self) -> Result<(), LinalgError> {
        Ok(())
    }
}

/// Kahn's algorithm on the nonzero pattern. A nonnegative matrix is nilpotent
/// exactly when its digraph is acyclic, in which case the spectral radius is 0.
fn pattern_is_acyclic<S: PerronOperand + ?Sized>(s: &S) -> bool {
    let n = s.dim();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut has_self_loop = false;
    s.visit_pattern(&mut |r, c| {
        if r == c {
            has_self_loop = true;
        } else {
            edges.push((r, c));
        }
    });
    if has_self_loop {
        return false;
    }
    let mut indegree = vec![0usize; n];
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(r, c) in &edges {
        adj[r].push(c);
        indegree[c] += 1;
    }
    let mut queue: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = queue.pop() {
        seen += 1;
        for &j in &adj[i] {
            indegree[j] -= 1;
            if indegree[j] == 0 {
                queue.push(j);
            }
        }
    }
    seen == n
}

/// Estimates the Perron-Frobenius eigenvalue (spectral radius) of a
/// nonnegative square matrix by shifted power iteration.
///
/// Nilpotent operands (acyclic nonzero pattern) short-circuit to exactly 0
/// with the uniform vector. Otherwise the iteration runs on `S + delta*I`
/// with `delta` proportional to the matrix scale, which breaks the
/// oscillation that plain power iteration exhibits on bipartite and cyclic
/// patterns; the estimate is reported shifted back. Iteration stops once
/// either the Collatz-Wielandt enclosure or the eigen-equation residual is
/// within `tol`.
///
/// Returns the estimate and the final iterate normalized to unit 1-norm.
pub fn pf_eigen<S: PerronOperand + ?Sized>(
    s: &S,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, Vec<f64>), LinalgError> {
    s.ensure_nonnegative()?;
    let n = s.dim();
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    if pattern_is_acyclic(s) {
        return Ok((0.0, vec![1.0 / n as f64; n]));
    }
    let delta = 0.05 * s.scale_norm();

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_1a7e);
    let mut v: Vec<f64> = (0..n).map(|_| 0.5 + rng.random::<f64>()).collect();
    let vsum: f64 = v.iter().sum();
    for x in &mut v {
        *x /= vsum;
    }

    let mut y = vec![0.0; n];
    let mut estimate = 0.0;
    for _ in 0..max_iter {
        s.matvec_into(&v, &mut y);
        for i in 0..n {
            y[i] += delta * v[i];
        }
        let lambda: f64 = y.iter().map(|x| x.abs()).sum();
        if lambda < 1e-300 {
            return Ok((0.0, vec![1.0 / n as f64; n]));
        }
        let mut residual = 0.0;
        let mut quot_min = f64::INFINITY;
        let mut quot_max = 0.0f64;
        for i in 0..n {
            residual += (y[i] - lambda * v[i]).abs();
            let q = y[i] / v[i];
            quot_min = quot_min.min(q);
            quot_max = quot_max.max(q);
        }
        for i in 0..n {
            v[i] = y[i] / lambda;
        }
        estimate = lambda - delta;
        let scale = lambda.max(1.0);
        if residual <= tol * scale || (quot_max - quot_min) <= tol * scale {
            return Ok((estimate.max(0.0), v));
        }
    }
    Err(LinalgError::PowerIterationStalled {
        iterations: max_iter,
        estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> DenseMatrix {
        let data = (0..rows * cols)
            .map(|_| lo + (hi - lo) * rng.random::<f64>())
            .collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_identity_returns_operand() {
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let got = matmul(&DenseMatrix::identity(2), &m).unwrap();
        assert_eq!(got, m);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let got = matmul(&DenseMatrix::zeros(2, 2), &m).unwrap();
        assert_eq!(got, DenseMatrix::zeros(2, 2));
    }

    #[test]
    fn matmul_hand_example() {
        let l = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let r = DenseMatrix::from_rows(&[&[1.0], &[1.0]]);
        let got = matmul(&l, &r).unwrap();
        assert_eq!(got, DenseMatrix::from_rows(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn matmul_rejects_dimension_mismatch() {
        let l = DenseMatrix::zeros(2, 3);
        let r = DenseMatrix::zeros(2, 2);
        assert!(matches!(
            matmul(&l, &r),
            Err(LinalgError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rmul_sparse_identity_and_zero() {
        let x = DenseMatrix::from_rows(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, -1.0]]);
        let id = SparseAdjacency::identity(3);
        assert_eq!(rmul_sparse(&x, &id).unwrap(), x);
        let zero = SparseAdjacency::empty(3);
        assert_eq!(rmul_sparse(&x, &zero).unwrap(), DenseMatrix::zeros(2, 3));
    }

    #[test]
    fn rmul_sparse_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let x = random_matrix(&mut rng, 3, 3, -1.0, 1.0);
            let mut triplets = Vec::new();
            for r in 0..3 {
                for c in 0..3 {
                    if rng.random::<f64>() < 0.6 {
                        triplets.push((r, c, rng.random::<f64>()));
                    }
                }
            }
            let a = SparseAdjacency::from_triplets(3, &triplets).unwrap();
            let got = rmul_sparse(&x, &a).unwrap();
            let want = matmul(&x, &a.to_dense()).unwrap();
            assert!(got.max_abs_diff(&want) <= 1e-12);
            let got_t = rmul_sparse_transposed(&x, &a).unwrap();
            let want_t = matmul(&x, &a.to_dense().transpose()).unwrap();
            assert!(got_t.max_abs_diff(&want_t) <= 1e-12);
        }
    }

    #[test]
    fn inf_norm_hand_values() {
        // rows sum to |1|+|-2| = 3 and |3|+|0| = 3
        let m = DenseMatrix::from_rows(&[&[1.0, -2.0], &[3.0, 0.0]]);
        assert_eq!(m.inf_norm(), 3.0);
        assert_eq!(DenseMatrix::identity(4).inf_norm(), 1.0);
        assert_eq!(DenseMatrix::zeros(3, 3).inf_norm(), 0.0);
        assert_eq!(DenseMatrix::zeros(0, 0).inf_norm(), 0.0);
    }

    #[test]
    fn one_norm_hand_values_and_transpose_relation() {
        let m = DenseMatrix::from_rows(&[&[1.0, -2.0], &[3.0, 0.0]]);
        assert_eq!(m.one_norm(), 4.0);
        assert_eq!(DenseMatrix::identity(4).one_norm(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let m = random_matrix(&mut rng, 4, 4, -2.0, 2.0);
            assert!((m.one_norm() - m.transpose().inf_norm()).abs() <= 1e-14);
        }
    }

    #[test]
    fn pf_identity_is_one() {
        for n in [1usize, 3, 6] {
            let (lambda, v) = pf_eigen(&DenseMatrix::identity(n), 1e-10, 1000).unwrap();
            assert!((lambda - 1.0).abs() <= 1e-9, "n={n}: {lambda}");
            let vsum: f64 = v.iter().sum();
            assert!((vsum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn pf_nilpotent_is_zero() {
        // strictly upper-triangular = DAG adjacency
        let m = DenseMatrix::from_rows(&[
            &[0.0, 2.0, 1.0],
            &[0.0, 0.0, 3.0],
            &[0.0, 0.0, 0.0],
        ]);
        let (lambda, v) = pf_eigen(&m, 1e-10, 1000).unwrap();
        assert_eq!(lambda, 0.0);
        assert_eq!(v, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn pf_four_cycle_is_two() {
        let edges = [(0usize, 1usize), (1, 2), (2, 3), (3, 0)];
        let mut triplets = Vec::new();
        for &(a, b) in &edges {
            triplets.push((a, b, 1.0));
            triplets.push((b, a, 1.0));
        }
        let a = SparseAdjacency::from_triplets(4, &triplets).unwrap();
        let (lambda, _) = pf_eigen(&a, 1e-8, PF_MAX_ITER).unwrap();
        assert!((lambda - 2.0).abs() <= 1e-6, "{lambda}");
    }

    #[test]
    fn pf_nonconvergence_reports_last_estimate() {
        let edges = [(0usize, 1usize), (1, 2), (2, 3), (3, 0)];
        let mut triplets = Vec::new();
        for &(a, b) in &edges {
            triplets.push((a, b, 1.0));
            triplets.push((b, a, 1.0));
        }
        let a = SparseAdjacency::from_triplets(4, &triplets).unwrap();
        match pf_eigen(&a, 1e-14, 2) {
            Err(LinalgError::PowerIterationStalled { iterations, estimate }) => {
                assert_eq!(iterations, 2);
                assert!(estimate > 0.0);
            }
            other => panic!("expected stall, got {other:?}"),
        }
    }

    #[test]
    fn pf_bounded_by_inf_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..30 {
            let n = 2 + (rng.random::<u32>() % 4) as usize;
            let m = random_matrix(&mut rng, n, n, 0.0, 1.0);
            let (lambda, _) = pf_eigen(&m, 1e-10, PF_MAX_ITER).unwrap();
            assert!(lambda <= m.inf_norm() + 1e-8);
        }
    }

    #[test]
    fn kron_identity_blocks() {
        let got = kron_materialize(&DenseMatrix::identity(2), &DenseMatrix::identity(2)).unwrap();
        assert_eq!(got, DenseMatrix::identity(4));
        let m = DenseMatrix::from_rows(&[&[1.0, -1.0], &[0.5, 2.0]]);
        let got = kron_materialize(&DenseMatrix::from_rows(&[&[2.0]]), &m).unwrap();
        assert_eq!(got, m.scale(2.0));
    }

    #[test]
    fn kron_size_guard() {
        let big = DenseMatrix::zeros(1001, 1001);
        assert!(matches!(
            kron_materialize(&big, &big),
            Err(LinalgError::KronTooLarge { .. })
        ));
    }

    #[test]
    fn kron_vec_identity() {
        // (A^T (x) W) vec(X) = vec(W X A), both sides computed independently
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 3, 3, -1.0, 1.0);
            let w = random_matrix(&mut rng, 3, 3, -1.0, 1.0);
            let x = random_matrix(&mut rng, 3, 3, -1.0, 1.0);
            let kron = kron_materialize(&a.transpose(), &w).unwrap();
            let vx = x.vectorize();
            let mut lhs = vec![0.0; 9];
            kron.matvec_into(&vx, &mut lhs);
            let rhs = matmul(&matmul(&w, &x).unwrap(), &a).unwrap().vectorize();
            for (l, r) in lhs.iter().zip(&rhs) {
                assert!((l - r).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn pf_kron_product_identity() {
        // lambda_pf(|A^T (x) W|) = lambda_pf(A) * lambda_pf(|W|)
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        for _ in 0..10 {
            let n = 2 + (rng.random::<u32>() % 4) as usize;
            let m = 2 + (rng.random::<u32>() % 4) as usize;
            let a = random_matrix(&mut rng, n, n, 0.0, 1.0);
            let w = random_matrix(&mut rng, m, m, -1.0, 1.0);
            let kron = kron_materialize(&a.transpose(), &w).unwrap().abs();
            let (lk, _) = pf_eigen(&kron, 1e-10, PF_MAX_ITER).unwrap();
            let (la, _) = pf_eigen(&a, 1e-10, PF_MAX_ITER).unwrap();
            let (lw, _) = pf_eigen(&w.abs(), 1e-10, PF_MAX_ITER).unwrap();
            assert!((lk - la * lw).abs() <= 1e-6, "{lk} vs {}", la * lw);
        }
    }

    #[test]
    fn kron_norm_identity() {
        // ||A^T (x) W||_inf = ||A||_1 ||W||_inf
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 4, 4, 0.0, 1.0);
            let w = random_matrix(&mut rng, 3, 3, -1.0, 1.0);
            let kron = kron_materialize(&a.transpose(), &w).unwrap();
            assert!((kron.inf_norm() - a.one_norm() * w.inf_norm()).abs() <= 1e-10);
        }
    }

    #[test]
    fn csr_duplicate_triplets_sum() {
        let a = SparseAdjacency::from_triplets(2, &[(0, 1, 1.0), (0, 1, 2.0)]).unwrap();
        assert_eq!(a.nnz(), 1);
        assert_eq!(a.to_dense().get(0, 1), 3.0);
        assert_eq!(a.one_norm(), 3.0);
    }

    #[test]
    fn csr_rejects_negative_and_out_of_range() {
        assert!(SparseAdjacency::from_triplets(2, &[(0, 1, -1.0)]).is_err());
        assert!(SparseAdjacency::from_triplets(2, &[(0, 2, 1.0)]).is_err());
    }

    #[test]
    fn dense_rejects_non_finite() {
        assert!(DenseMatrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(DenseMatrix::from_vec(1, 2, vec![1.0, f64::INFINITY]).is_err());
    }
}
