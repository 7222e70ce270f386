//! Row-compressed square matrices with diagonal-dominance classification.
//!
//! The graph of a matrix has an edge `i -> j` whenever `a_ij != 0` (stored
//! zeros are ignored). A matrix is weakly chained diagonally dominant
//! (WCDD) when every row is weakly diagonally dominant and every row has a
//! path in that graph to a strictly diagonally dominant row. For Z-matrices
//! with positive diagonals this is exactly the class of WDD M-matrices.

use std::collections::VecDeque;
use std::fmt::Write as _;

use thiserror::Error;

use crate::dense::{DenseLu, DenseMatrix};

/// Largest dimension accepted by the dense oracles.
pub const ORACLE_CAP: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatrixError {
    #[error("column index {col} out of range for dimension {n} (row {row})")]
    ColumnOutOfRange { row: usize, col: usize, n: usize },
    #[error("expected {expected} rows, got {got}")]
    RowCount { expected: usize, got: usize },
    #[error("matrix of dimension {n} exceeds the dense oracle cap {cap}")]
    TooLargeForOracle { n: usize, cap: usize },
    #[error("malformed triplet line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Square real matrix in compressed sparse row form.
///
/// Column indices inside a row are strictly increasing; duplicates are
/// merged by summation at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

/// Scratch buffer for building one sparse row.
#[derive(Debug, Default, Clone)]
pub struct RowBuf {
    entries: Vec<(usize, f64)>,
}

impl RowBuf {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn push(&mut self, col: usize, val: f64) {
        self.entries.push((col, val));
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorts by column and merges duplicate columns.
    pub fn normalize(&mut self) {
        normalize_entries(&mut self.entries);
    }

    /// Sets the diagonal to `sum_{j != row} |a_ij| + extra`, summing in
    /// increasing column order so the slack seen by [`classify_rows`] is
    /// exactly `extra`.
    pub fn balance_diagonal(&mut self, row: usize, extra: f64) {
        self.normalize();
        self.entries.retain(|&(c, _)| c != row);
        let mut sum = 0.0;
        for &(_, v) in &self.entries {
            if v != 0.0 {
                sum += v.abs();
            }
        }
        let diag = sum + extra;
        let pos = self.entries.partition_point(|&(c, _)| c < row);
        self.entries.insert(pos, (row, diag));
    }

    /// Removes and returns the (merged) entry in column `col`.
    pub fn remove(&mut self, col: usize) -> f64 {
        let mut x = 0.0;
        self.entries.retain(|&(c, v)| {
            if c == col {
                x += v;
                false
            } else {
                true
            }
        });
        x
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    /// Multiplies every stored value by `factor`.
    pub fn scale(&mut self, factor: f64) {
        for e in self.entries.iter_mut() {
            e.1 *= factor;
        }
    }

    /// `sum_j a_ij v_j` over the stored entries.
    pub fn dot(&self, v: &[f64]) -> f64 {
        self.entries.iter().map(|&(c, a)| a * v[c]).sum()
    }
}

fn normalize_entries(entries: &mut Vec<(usize, f64)>) {
    entries.sort_by_key(|e| e.0);
    let mut out = 0;
    for k in 0..entries.len() {
        if out > 0 && entries[out - 1].0 == entries[k].0 {
            entries[out - 1].1 += entries[k].1;
        } else {
            entries[out] = entries[k];
            out += 1;
        }
    }
    entries.truncate(out);
}

/// Incremental CSR builder; rows must be pushed in order.
#[derive(Debug, Clone)]
pub struct CsrBuilder {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrBuilder {
    pub fn new(n: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        Self {
            n,
            row_ptr,
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn with_capacity(n: usize, nnz: usize) -> Self {
        let mut b = Self::new(n);
        b.cols.reserve(nnz);
        b.vals.reserve(nnz);
        b
    }

    /// Appends the next row. Entries need not be sorted.
    pub fn push_row(&mut self, row: &mut RowBuf) -> Result<(), MatrixError> {
        row.normalize();
        let r = self.row_ptr.len() - 1;
        for &(c, v) in row.entries() {
            if c >= self.n {
                return Err(MatrixError::ColumnOutOfRange {
                    row: r,
                    col: c,
                    n: self.n,
                });
            }
            self.cols.push(c);
            self.vals.push(v);
        }
        self.row_ptr.push(self.cols.len());
        Ok(())
    }

    pub fn finish(self) -> Result<SparseMatrix, MatrixError> {
        let got = self.row_ptr.len() - 1;
        if got != self.n {
            return Err(MatrixError::RowCount {
                expected: self.n,
                got,
            });
        }
        Ok(SparseMatrix {
            n: self.n,
            row_ptr: self.row_ptr,
            cols: self.cols,
            vals: self.vals,
        })
    }
}

impl SparseMatrix {
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            row_ptr: (0..=n).collect(),
            cols: (0..n).collect(),
            vals: vec![1.0; n],
        }
    }

    /// Builds a matrix from per-row entry lists.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Result<Self, MatrixError> {
        let n = rows.len();
        let mut b = CsrBuilder::new(n);
        for entries in rows {
            let mut buf = RowBuf { entries };
            b.push_row(&mut buf)?;
        }
        b.finish()
    }

    /// Builds a matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self, MatrixError> {
        let mut rows = vec![Vec::new(); n];
        for &(r, c, v) in triplets {
            if r >= n {
                return Err(MatrixError::RowCount {
                    expected: n,
                    got: r + 1,
                });
            }
            rows[r].push((c, v));
        }
        Self::from_rows(rows)
    }

    /// Stores every nonzero of a dense row-major matrix.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self, MatrixError> {
        let n = rows.len();
        let mut out = Vec::with_capacity(n);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(MatrixError::ColumnOutOfRange {
                    row: i,
                    col: r.len().saturating_sub(1),
                    n,
                });
            }
            out.push(
                r.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(j, v)| (j, *v))
                    .collect(),
            );
        }
        Self::from_rows(out)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Column indices and values of row `i`.
    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (c, v) = self.row(i);
        match c.binary_search(&j) {
            Ok(k) => v[k],
            Err(_) => 0.0,
        }
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.get(i, i)
    }

    /// `y = A x`.
    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let (c, v) = self.row(i);
            let mut acc = 0.0;
            for k in 0..c.len() {
                acc += v[k] * x[c[k]];
            }
            *yi = acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.n);
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for k in 0..c.len() {
                d[(i, c[k])] += v[k];
            }
        }
        d
    }

    /// Simultaneous row/column permutation: `B[p(i), p(j)] = A[i, j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut rows = vec![Vec::new(); self.n];
        for i in 0..self.n {
            let (c, v) = self.row(i);
            rows[perm[i]] = c.iter().zip(v).map(|(&j, &x)| (perm[j], x)).collect();
        }
        Self::from_rows(rows).expect("permutation preserves shape")
    }

    /// True when every nonzero lies on the three central diagonals.
    pub fn is_tridiagonal(&self) -> bool {
        (0..self.n).all(|i| {
            let (c, v) = self.row(i);
            c.iter()
                .zip(v)
                .all(|(&j, &x)| x == 0.0 || j + 1 >= i && j <= i + 1)
        })
    }

    /// Plain-text coordinate dump, one `row col value` line per stored
    /// entry, sorted by `(row, col)`.
    pub fn dump_triplets(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for k in 0..c.len() {
                let _ = writeln!(s, "{} {} {:e}", i, c[k], v[k]);
            }
        }
        s
    }

    /// Parses the output of [`SparseMatrix::dump_triplets`].
    pub fn parse_triplets(n: usize, text: &str) -> Result<Self, MatrixError> {
        let mut trips = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = |reason: &str| MatrixError::Parse {
                line: lineno + 1,
                reason: reason.to_string(),
            };
            if parts.len() != 3 {
                return Err(bad("expected three fields"));
            }
            let r = parts[0].parse::<usize>().map_err(|_| bad("bad row"))?;
            let c = parts[1].parse::<usize>().map_err(|_| bad("bad column"))?;
            let v = parts[2].parse::<f64>().map_err(|_| bad("bad value"))?;
            trips.push((r, c, v));
        }
        Self::from_triplets(n, &trips)
    }
}

/// Dominance label of a single row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowClass {
    Sdd,
    WddNotSdd,
    NotWdd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowDominance {
    pub labels: Vec<RowClass>,
    /// `|a_ii| - sum_{j != i} |a_ij|`.
    pub slack: Vec<f64>,
}

impl RowDominance {
    pub fn all_wdd(&self) -> bool {
        self.labels.iter().all(|l| *l != RowClass::NotWdd)
    }

    pub fn all_sdd(&self) -> bool {
        self.labels.iter().all(|l| *l == RowClass::Sdd)
    }

    pub fn rows_with(&self, class: RowClass) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == class)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Off-diagonal magnitudes are summed in increasing column order.
pub fn row_slack(a: &SparseMatrix, i: usize) -> f64 {
    let (c, v) = a.row(i);
    let mut diag = 0.0;
    let mut off = 0.0;
    for k in 0..c.len() {
        if c[k] == i {
            diag = v[k].abs();
        } else if v[k] != 0.0 {
            off += v[k].abs();
        }
    }
    diag - off
}

pub fn classify_rows(a: &SparseMatrix) -> RowDominance {
    let slack: Vec<f64> = (0..a.dim()).map(|i| row_slack(a, i)).collect();
    let labels = slack
        .iter()
        .map(|&s| {
            if s > 0.0 {
                RowClass::Sdd
            } else if s == 0.0 {
                RowClass::WddNotSdd
            } else {
                RowClass::NotWdd
            }
        })
        .collect();
    RowDominance { labels, slack }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WcddReport {
    pub is_wcdd: bool,
    pub dominance: RowDominance,
    /// Rows with no path to an SDD row.
    pub non_reaching_rows: Vec<usize>,
    /// Successor of each row on a shortest path to an SDD row
    /// (`usize::MAX` if none; SDD rows point to themselves).
    next: Vec<usize>,
}

impl WcddReport {
    /// Row indices from `i` to an SDD row along nonzero off-diagonals.
    pub fn witness_path(&self, i: usize) -> Option<Vec<usize>> {
        if self.next[i] == usize::MAX {
            return None;
        }
        let mut path = vec![i];
        let mut cur = i;
        while self.next[cur] != cur {
            cur = self.next[cur];
            path.push(cur);
        }
        Some(path)
    }
}

/// One reverse breadth-first search seeded at every SDD row.
pub fn is_wcdd(a: &SparseMatrix) -> WcddReport {
    let n = a.dim();
    let dominance = classify_rows(a);

    if dominance.all_sdd() {
        return WcddReport {
            is_wcdd: true,
            dominance,
            non_reaching_rows: Vec::new(),
            next: (0..n).collect(),
        };
    }

    // Reverse adjacency: j -> i for every stored nonzero a_ij, i != j.
    let mut indeg = vec![0usize; n + 1];
    for i in 0..n {
        let (c, v) = a.row(i);
        for k in 0..c.len() {
            if c[k] != i && v[k] != 0.0 {
                indeg[c[k] + 1] += 1;
            }
        }
    }
    for j in 0..n {
        indeg[j + 1] += indeg[j];
    }
    let mut rev = vec![0usize; indeg[n]];
    let mut fill = indeg.clone();
    for i in 0..n {
        let (c, v) = a.row(i);
        for k in 0..c.len() {
            if c[k] != i && v[k] != 0.0 {
                rev[fill[c[k]]] = i;
                fill[c[k]] += 1;
            }
        }
    }

    const UNSEEN: usize = usize::MAX;
    let mut next = vec![UNSEEN; n];
    let mut queue = VecDeque::new();
    for i in 0..n {
        if dominance.labels[i] == RowClass::Sdd {
            next[i] = i;
            queue.push_back(i);
        }
    }
    while let Some(j) = queue.pop_front() {
        for &i in &rev[indeg[j]..indeg[j + 1]] {
            if next[i] == UNSEEN {
                next[i] = j;
                queue.push_back(i);
            }
        }
    }

    let non_reaching_rows: Vec<usize> = (0..n).filter(|&i| next[i] == UNSEEN).collect();
    WcddReport {
        is_wcdd: dominance.all_wdd() && non_reaching_rows.is_empty(),
        dominance,
        non_reaching_rows,
        next,
    }
}

pub fn is_z_matrix(a: &SparseMatrix) -> bool {
    (0..a.dim()).all(|i| {
        let (c, v) = a.row(i);
        c.iter().zip(v).all(|(&j, &x)| j == i || x <= 0.0)
    })
}

pub fn has_positive_diagonal(a: &SparseMatrix) -> bool {
    (0..a.dim()).all(|i| a.diag(i) > 0.0)
}

/// WCDD Z-matrix with positive diagonals, equivalently a WDD M-matrix.
pub fn is_nonsingular_wdd_m_matrix(a: &SparseMatrix) -> bool {
    is_z_matrix(a) && has_positive_diagonal(a) && is_wcdd(a).is_wcdd
}

/// Why a matrix failed [`is_nonsingular_wdd_m_matrix`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MMatrixDiagnostic {
    pub zero_rows: Vec<usize>,
    pub not_wdd_rows: Vec<usize>,
    pub positive_offdiagonal_rows: Vec<usize>,
    pub nonpositive_diagonal_rows: Vec<usize>,
    pub non_reaching_rows: Vec<usize>,
}

impl MMatrixDiagnostic {
    pub fn is_clean(&self) -> bool {
        self.zero_rows.is_empty()
            && self.not_wdd_rows.is_empty()
            && self.positive_offdiagonal_rows.is_empty()
            && self.nonpositive_diagonal_rows.is_empty()
            && self.non_reaching_rows.is_empty()
    }
}

/// Full WDD M-matrix check that also reports what failed.
impl std::fmt::Display for MMatrixDiagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let groups = [
            ("zero rows", &self.zero_rows),
            ("non-WDD rows", &self.not_wdd_rows),
            (
                "rows with positive off-diagonals",
                &self.positive_offdiagonal_rows,
            ),
            (
                "rows with nonpositive diagonal",
                &self.nonpositive_diagonal_rows,
            ),
            ("rows without a path to an SDD row", &self.non_reaching_rows),
        ];
        let mut first = true;
        for (name, rows) in groups {
            if rows.is_empty() {
                continue;
            }
            if !first {
                write!(f, "; ")?;
            }
            first = false;
            let shown: Vec<String> = rows.iter().take(8).map(|r| r.to_string()).collect();
            write!(f, "{name} [{}", shown.join(", "))?;
            if rows.len() > 8 {
                write!(f, ", ... ({} total)", rows.len())?;
            }
            write!(f, "]")?;
        }
        if first {
            write!(f, "no defects")?;
        }
        Ok(())
    }
}

pub fn diagnose_wdd_m_matrix(a: &SparseMatrix) -> (WcddReport, MMatrixDiagnostic) {
    let report = is_wcdd(a);
    let mut d = MMatrixDiagnostic {
        not_wdd_rows: report.dominance.rows_with(RowClass::NotWdd),
        non_reaching_rows: report.non_reaching_rows.clone(),
        ..Default::default()
    };
    for i in 0..a.dim() {
        let (c, v) = a.row(i);
        if v.iter().all(|x| *x == 0.0) {
            d.zero_rows.push(i);
        }
        if c.iter().zip(v).any(|(&j, &x)| j != i && x > 0.0) {
            d.positive_offdiagonal_rows.push(i);
        }
        if a.diag(i) <= 0.0 {
            d.nonpositive_diagonal_rows.push(i);
        }
    }
    (report, d)
}

/// Outcome of the dense monotonicity oracle.
#[derive(Debug, Clone, PartialEq)]
pub enum Monotonicity {
    /// Nonsingular with an entrywise nonnegative inverse.
    Monotone,
    Singular,
    NegativeInverseEntry {
        row: usize,
        col: usize,
        value: f64,
    },
}

impl Monotonicity {
    pub fn is_monotone(&self) -> bool {
        matches!(self, Monotonicity::Monotone)
    }
}

/// Dense LU inversion; a matrix is monotone iff `A^{-1} >= 0`.
///
/// Inverse entries are compared against `-1e-12 * (row 1-norm of A^{-1})`.
pub fn monotonicity_oracle(a: &SparseMatrix) -> Result<Monotonicity, MatrixError> {
    let n = a.dim();
    if n > ORACLE_CAP {
        return Err(MatrixError::TooLargeForOracle { n, cap: ORACLE_CAP });
    }
    let lu = match DenseLu::factor(&a.to_dense()) {
        Ok(lu) => lu,
        Err(_) => return Ok(Monotonicity::Singular),
    };
    let inv = lu.inverse();
    for i in 0..n {
        let norm: f64 = (0..n).map(|j| inv[(i, j)].abs()).sum();
        for j in 0..n {
            if inv[(i, j)] < -1e-12 * norm {
                return Ok(Monotonicity::NegativeInverseEntry {
                    row: i,
                    col: j,
                    value: inv[(i, j)],
                });
            }
        }
    }
    Ok(Monotonicity::Monotone)
}
