//! Linear solvers: ILUT-preconditioned BiCGSTAB and Thomas elimination.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::matrix::SparseMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("BiCGSTAB breakdown after {iterations} iterations (relative residual {residual:e})")]
    Breakdown { iterations: usize, residual: f64 },
    #[error(
        "BiCGSTAB did not converge in {iterations} iterations (relative residual {residual:e})"
    )]
    MaxIterations { iterations: usize, residual: f64 },
    #[error("zero pivot in tridiagonal elimination at row {row}")]
    ZeroPivot { row: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveStats {
    /// Zero iff the initial guess already met the residual criterion.
    pub iterations: usize,
    pub final_relative_residual: f64,
    /// A breakdown occurred (and was recovered by a restart).
    pub breakdown: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IlutConfig {
    /// Extra entries kept per factor row beyond the original count.
    pub fill: usize,
    /// Entries smaller than `drop_tol * ||a_i||_2` are discarded.
    pub drop_tol: f64,
}

impl Default for IlutConfig {
    fn default() -> Self {
        Self {
            fill: 10,
            drop_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BicgstabConfig {
    pub rtol: f64,
    pub max_iterations: usize,
    /// Convergence test is `||b - Ax|| <= rtol * max(||b||, floor)`.
    pub residual_floor: f64,
    pub ilut: IlutConfig,
}

impl Default for BicgstabConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            max_iterations: 1000,
            residual_floor: 1.0,
            ilut: IlutConfig::default(),
        }
    }
}

pub trait Preconditioner {
    /// `out = M^{-1} r`.
    fn apply(&self, r: &[f64], out: &mut [f64]);
}

pub struct IdentityPreconditioner;

impl Preconditioner for IdentityPreconditioner {
    fn apply(&self, r: &[f64], out: &mut [f64]) {
        out.copy_from_slice(r);
    }
}

/// Threshold incomplete LU with a per-row fill cap (Saad's ILUT).
#[derive(Debug, Clone)]
pub struct IlutPreconditioner {
    n: usize,
    l_ptr: Vec<usize>,
    l_cols: Vec<usize>,
    l_vals: Vec<f64>,
    u_ptr: Vec<usize>,
    u_cols: Vec<usize>,
    u_vals: Vec<f64>,
    u_diag: Vec<f64>,
}

impl IlutPreconditioner {
    pub fn factor(a: &SparseMatrix, cfg: IlutConfig) -> Self {
        let n = a.dim();
        let mut l_ptr = Vec::with_capacity(n + 1);
        let mut u_ptr = Vec::with_capacity(n + 1);
        l_ptr.push(0);
        u_ptr.push(0);
        let mut l_cols = Vec::new();
        let mut l_vals = Vec::new();
        let mut u_cols: Vec<usize> = Vec::new();
        let mut u_vals: Vec<f64> = Vec::new();
        let mut u_diag = vec![0.0; n];

        let mut work = vec![0.0; n];
        let mut live = vec![false; n];
        let mut heap: BinaryHeap<Reverse<usize>> = BinaryHeap::new();
        let mut upper: Vec<usize> = Vec::new();
        let mut lower_keep: Vec<(usize, f64)> = Vec::new();
        let mut upper_keep: Vec<(usize, f64)> = Vec::new();

        for i in 0..n {
            let (cols, vals) = a.row(i);
            let norm = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
            let tol = cfg.drop_tol * norm;
            let mut n_lower = 0;
            let mut n_upper = 0;
            upper.clear();
            live[i] = true;
            work[i] = 0.0;
            for (&j, &v) in cols.iter().zip(vals) {
                if j != i && !live[j] {
                    live[j] = true;
                    work[j] = 0.0;
                    if j < i {
                        heap.push(Reverse(j));
                    } else {
                        upper.push(j);
                    }
                }
                if j < i {
                    n_lower += 1;
                } else if j > i {
                    n_upper += 1;
                }
                work[j] += v;
            }

            lower_keep.clear();
            while let Some(Reverse(k)) = heap.pop() {
                live[k] = false;
                let wk = work[k] / u_diag[k];
                work[k] = 0.0;
                if wk.abs() < tol || wk == 0.0 {
                    continue;
                }
                lower_keep.push((k, wk));
                for p in u_ptr[k]..u_ptr[k + 1] {
                    let j: usize = u_cols[p];
                    if !live[j] {
                        live[j] = true;
                        work[j] = 0.0;
                        if j < i {
                            heap.push(Reverse(j));
                        } else if j != i {
                            upper.push(j);
                        }
                    }
                    work[j] -= wk * u_vals[p];
                }
            }

            upper_keep.clear();
            for &j in &upper {
                let v = work[j];
                live[j] = false;
                work[j] = 0.0;
                if v.abs() >= tol && v != 0.0 {
                    upper_keep.push((j, v));
                }
            }
            let mut d = work[i];
            live[i] = false;
            work[i] = 0.0;
            if d == 0.0 {
                d = if tol > 0.0 { tol } else { 1e-12 };
            }
            u_diag[i] = d;

            keep_largest(&mut lower_keep, n_lower + cfg.fill);
            keep_largest(&mut upper_keep, n_upper + cfg.fill);
            for &(c, v) in lower_keep.iter() {
                l_cols.push(c);
                l_vals.push(v);
            }
            for &(c, v) in upper_keep.iter() {
                u_cols.push(c);
                u_vals.push(v);
            }
            l_ptr.push(l_cols.len());
            u_ptr.push(u_cols.len());
        }
        Self {
            n,
            l_ptr,
            l_cols,
            l_vals,
            u_ptr,
            u_cols,
            u_vals,
            u_diag,
        }
    }

    /// Stored entries in row `i` of the unit lower factor (diagonal excluded).
    pub fn lower_row_len(&self, i: usize) -> usize {
        self.l_ptr[i + 1] - self.l_ptr[i]
    }

    /// Stored off-diagonal entries in row `i` of the upper factor.
    pub fn upper_row_len(&self, i: usize) -> usize {
        self.u_ptr[i + 1] - self.u_ptr[i]
    }
}

fn keep_largest(v: &mut Vec<(usize, f64)>, cap: usize) {
    if v.len() > cap {
        v.select_nth_unstable_by(cap, |a, b| b.1.abs().total_cmp(&a.1.abs()));
        v.truncate(cap);
    }
    v.sort_unstable_by_key(|e| e.0);
}

impl Preconditioner for IlutPreconditioner {
    fn apply(&self, r: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let mut s = r[i];
            for p in self.l_ptr[i]..self.l_ptr[i + 1] {
                s -= self.l_vals[p] * out[self.l_cols[p]];
            }
            out[i] = s;
        }
        for i in (0..self.n).rev() {
            let mut s = out[i];
            for p in self.u_ptr[i]..self.u_ptr[i + 1] {
                s -= self.u_vals[p] * out[self.u_cols[p]];
            }
            out[i] = s / self.u_diag[i];
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn residual(a: &SparseMatrix, b: &[f64], x: &[f64], r: &mut [f64]) {
    a.mul_vec_into(x, r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
}

/// Residual check against `rtol * max(||b||, floor)` without solving.
pub fn meets_criterion(
    a: &SparseMatrix,
    b: &[f64],
    x: &[f64],
    cfg: &BicgstabConfig,
) -> (bool, f64) {
    let mut r = vec![0.0; b.len()];
    residual(a, b, x, &mut r);
    let scale = norm2(b).max(cfg.residual_floor);
    let rel = norm2(&r) / scale;
    (rel <= cfg.rtol, rel)
}

/// Preconditioned BiCGSTAB (right preconditioning, so the monitored
/// residual is the true one).
pub fn solve_bicgstab(
    a: &SparseMatrix,
    b: &[f64],
    x0: &[f64],
    m: &dyn Preconditioner,
    cfg: &BicgstabConfig,
) -> Result<(Vec<f64>, SolveStats), SolveError> {
    let n = a.dim();
    if b.len() != n || x0.len() != n {
        return Err(SolveError::Dimension {
            expected: n,
            got: if b.len() != n { b.len() } else { x0.len() },
        });
    }
    let scale = norm2(b).max(cfg.residual_floor);
    let threshold = cfg.rtol * scale;
    let mut x = x0.to_vec();
    let mut total = 0;
    let mut broke = false;
    for attempt in 0..2 {
        match bicgstab_pass(
            a,
            b,
            &mut x,
            m,
            threshold,
            cfg.max_iterations - total.min(cfg.max_iterations),
        ) {
            Pass::Converged { iterations, rnorm } => {
                return Ok((
                    x,
                    SolveStats {
                        iterations: total + iterations,
                        final_relative_residual: rnorm / scale,
                        breakdown: broke,
                    },
                ));
            }
            Pass::MaxIterations { iterations, rnorm } => {
                return Err(SolveError::MaxIterations {
                    iterations: total + iterations,
                    residual: rnorm / scale,
                });
            }
            Pass::Breakdown {
                iterations,
                r,
                rnorm,
            } => {
                total += iterations;
                broke = true;
                if attempt == 1 {
                    return Err(SolveError::Breakdown {
                        iterations: total,
                        residual: rnorm / scale,
                    });
                }
                // Restart from x + M^{-1} r.
                let mut z = vec![0.0; n];
                m.apply(&r, &mut z);
                for (xi, zi) in x.iter_mut().zip(&z) {
                    *xi += zi;
                }
            }
        }
    }
    unreachable!("loop returns on the second attempt")
}

/// Factors an ILUT preconditioner only if `x0` does not already satisfy
/// the residual criterion.
pub fn solve_bicgstab_ilut(
    a: &SparseMatrix,
    b: &[f64],
    x0: &[f64],
    cfg: &BicgstabConfig,
) -> Result<(Vec<f64>, SolveStats), SolveError> {
    if b.len() == a.dim() && x0.len() == a.dim() {
        let (ok, rel) = meets_criterion(a, b, x0, cfg);
        if ok {
            return Ok((
                x0.to_vec(),
                SolveStats {
                    iterations: 0,
                    final_relative_residual: rel,
                    breakdown: false,
                },
            ));
        }
    }
    let m = IlutPreconditioner::factor(a, cfg.ilut);
    solve_bicgstab(a, b, x0, &m, cfg)
}

enum Pass {
    Converged {
        iterations: usize,
        rnorm: f64,
    },
    MaxIterations {
        iterations: usize,
        rnorm: f64,
    },
    Breakdown {
        iterations: usize,
        r: Vec<f64>,
        rnorm: f64,
    },
}

fn bicgstab_pass(
    a: &SparseMatrix,
    b: &[f64],
    x: &mut [f64],
    m: &dyn Preconditioner,
    threshold: f64,
    maxit: usize,
) -> Pass {
    let n = b.len();
    let mut r = vec![0.0; n];
    residual(a, b, x, &mut r);
    let mut rnorm = norm2(&r);
    if rnorm <= threshold {
        return Pass::Converged {
            iterations: 0,
            rnorm,
        };
    }
    let r_hat = r.clone();
    let r_hat_norm = rnorm;
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut p_hat = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut s_hat = vec![0.0; n];
    let mut t = vec![0.0; n];
    let (mut rho, mut alpha, mut omega) = (1.0f64, 1.0f64, 1.0f64);
    let tiny = 1e-30;

    for it in 1..=maxit {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() <= tiny * r_hat_norm * rnorm {
            return Pass::Breakdown {
                iterations: it - 1,
                r,
                rnorm,
            };
        }
        let beta = (rho_new / rho) * (alpha / omega);
        for k in 0..n {
            p[k] = r[k] + beta * (p[k] - omega * v[k]);
        }
        m.apply(&p, &mut p_hat);
        a.mul_vec_into(&p_hat, &mut v);
        let denom = dot(&r_hat, &v);
        if denom.abs() <= tiny * r_hat_norm * norm2(&v) || denom == 0.0 {
            return Pass::Breakdown {
                iterations: it - 1,
                r,
                rnorm,
            };
        }
        alpha = rho_new / denom;
        for k in 0..n {
            s[k] = r[k] - alpha * v[k];
        }
        let snorm = norm2(&s);
        if snorm <= threshold {
            for k in 0..n {
                x[k] += alpha * p_hat[k];
            }
            return Pass::Converged {
                iterations: it,
                rnorm: snorm,
            };
        }
        m.apply(&s, &mut s_hat);
        a.mul_vec_into(&s_hat, &mut t);
        let tt = dot(&t, &t);
        if tt == 0.0 {
            return Pass::Breakdown {
                iterations: it - 1,
                r,
                rnorm,
            };
        }
        omega = dot(&t, &s) / tt;
        if omega.abs() <= tiny {
            for k in 0..n {
                x[k] += alpha * p_hat[k];
            }
            return Pass::Breakdown {
                iterations: it,
                r: s,
                rnorm: snorm,
            };
        }
        for k in 0..n {
            x[k] += alpha * p_hat[k] + omega * s_hat[k];
            r[k] = s[k] - omega * t[k];
        }
        rnorm = norm2(&r);
        if rnorm <= threshold {
            return Pass::Converged {
                iterations: it,
                rnorm,
            };
        }
        rho = rho_new;
    }
    Pass::MaxIterations {
        iterations: maxit,
        rnorm,
    }
}

/// Thomas algorithm. `lower[i]` multiplies `x[i-1]` in row `i` (so
/// `lower[0]` is ignored) and `upper[i]` multiplies `x[i+1]`.
pub fn solve_tridiagonal(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    b: &[f64],
) -> Result<Vec<f64>, SolveError> {
    let n = diag.len();
    for len in [lower.len(), upper.len(), b.len()] {
        if len != n {
            return Err(SolveError::Dimension {
                expected: n,
                got: len,
            });
        }
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut piv = diag[0];
    if piv == 0.0 {
        return Err(SolveError::ZeroPivot { row: 0 });
    }
    c[0] = upper[0] / piv;
    d[0] = b[0] / piv;
    for i in 1..n {
        piv = diag[i] - lower[i] * c[i - 1];
        if piv == 0.0 {
            return Err(SolveError::ZeroPivot { row: i });
        }
        c[i] = if i + 1 < n { upper[i] / piv } else { 0.0 };
        d[i] = (b[i] - lower[i] * d[i - 1]) / piv;
    }
    let mut x = d;
    for i in (0..n - 1).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    Ok(x)
}

/// Splits a tridiagonal sparse matrix into its three diagonals.
pub fn tridiagonal_bands(a: &SparseMatrix) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if !a.is_tridiagonal() {
        return None;
    }
    let n = a.dim();
    let mut lo = vec![0.0; n];
    let mut di = vec![0.0; n];
    let mut up = vec![0.0; n];
    for i in 0..n {
        let (c, v) = a.row(i);
        for (&j, &x) in c.iter().zip(v) {
            if j + 1 == i {
                lo[i] = x;
            } else if j == i {
                di[i] = x;
            } else if j == i + 1 {
                up[i] = x;
            }
        }
    }
    Some((lo, di, up))
}

/// Which linear solver backs a policy-evaluation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LinearSolverKind {
    /// Thomas for tridiagonal systems, otherwise ILUT-BiCGSTAB with a
    /// dense LU fallback for small systems.
    #[default]
    Auto,
    Bicgstab,
    Tridiagonal,
    DenseLu,
}

/// Solves `A x = b` starting from `x0` with the requested solver.
pub fn solve_linear(
    a: &SparseMatrix,
    b: &[f64],
    x0: &[f64],
    kind: LinearSolverKind,
    cfg: &BicgstabConfig,
) -> Result<(Vec<f64>, SolveStats), SolveError> {
    let kind = match kind {
        LinearSolverKind::Auto if a.is_tridiagonal() => LinearSolverKind::Tridiagonal,
        k => k,
    };
    match kind {
        LinearSolverKind::Tridiagonal | LinearSolverKind::DenseLu => {
            if x0.len() == a.dim() && b.len() == a.dim() {
                let (ok, rel) = meets_criterion(a, b, x0, cfg);
                if ok {
                    return Ok((
                        x0.to_vec(),
                        SolveStats {
                            iterations: 0,
                            final_relative_residual: rel,
                            breakdown: false,
                        },
                    ));
                }
            }
            let x = if kind == LinearSolverKind::Tridiagonal {
                let (lo, di, up) = tridiagonal_bands(a).ok_or(SolveError::Dimension {
                    expected: 3,
                    got: 0,
                })?;
                solve_tridiagonal(&lo, &di, &up, b)?
            } else {
                solve_dense(a, b)?
            };
            let (_, rel) = meets_criterion(a, b, &x, cfg);
            Ok((
                x,
                SolveStats {
                    iterations: 1,
                    final_relative_residual: rel,
                    breakdown: false,
                },
            ))
        }
        _ => match solve_bicgstab_ilut(a, b, x0, cfg) {
            Ok(r) => Ok(r),
            Err(e) if kind == LinearSolverKind::Auto && a.dim() <= crate::matrix::ORACLE_CAP => {
                let x = solve_dense(a, b).map_err(|_| e)?;
                let (_, rel) = meets_criterion(a, b, &x, cfg);
                Ok((
                    x,
                    SolveStats {
                        iterations: 1,
                        final_relative_residual: rel,
                        breakdown: true,
                    },
                ))
            }
            Err(e) => Err(e),
        },
    }
}

fn solve_dense(a: &SparseMatrix, b: &[f64]) -> Result<Vec<f64>, SolveError> {
    crate::dense::solve_dense_lu(&a.to_dense(), b).map_err(|e| match e {
        crate::dense::DenseError::Singular { column, .. } => SolveError::ZeroPivot { row: column },
        crate::dense::DenseError::Dimension { n, len } => SolveError::Dimension {
            expected: n,
            got: len,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::solve_dense_lu;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_wcdd(n: usize, rng: &mut ChaCha8Rng) -> SparseMatrix {
        let mut rows = Vec::new();
        for i in 0..n {
            let mut row = Vec::new();
            let mut sum = 0.0;
            for j in 0..n {
                // Every row links to its predecessor, so row 0 reaches all.
                let v = if i > 0 && j + 1 == i {
                    -0.5
                } else if j != i && rng.gen_bool(0.15) {
                    -rng.gen_range(0.1..1.0)
                } else {
                    continue;
                };
                sum -= v;
                row.push((j, v));
            }
            let slack = if i == 0 {
                1.0
            } else if rng.gen_bool(0.3) {
                rng.gen_range(0.1..1.0)
            } else {
                0.0
            };
            row.push((i, sum + slack));
            rows.push(row);
        }
        SparseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_with_exact_guess_takes_zero_iterations() {
        let a = SparseMatrix::identity(4);
        let b = vec![1.0, 2.0, -3.0, 0.5];
        let (x, st) = solve_bicgstab_ilut(&a, &b, &b, &BicgstabConfig::default()).unwrap();
        assert_eq!(x, b);
        assert_eq!(st.iterations, 0);
    }

    #[test]
    fn small_symmetric_system() {
        let a = SparseMatrix::from_rows(vec![vec![(0, 2.0), (1, -1.0)], vec![(0, -1.0), (1, 2.0)]])
            .unwrap();
        let (x, st) = solve_bicgstab(
            &a,
            &[1.0, 1.0],
            &[0.0, 0.0],
            &IdentityPreconditioner,
            &BicgstabConfig::default(),
        )
        .unwrap();
        assert!(st.iterations >= 1);
        assert!((x[0] - 1.0).abs() < 1e-9 && (x[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn random_wcdd_matches_dense_lu() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_wcdd(50, &mut rng);
        assert!(crate::matrix::is_wcdd(&a).is_wcdd);
        let b: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = BicgstabConfig::default();
        let (x, st) = solve_bicgstab_ilut(&a, &b, &vec![0.0; 50], &cfg).unwrap();
        let (ok, _) = meets_criterion(&a, &b, &x, &cfg);
        assert!(ok, "{st:?}");
        let xd = solve_dense_lu(&a.to_dense(), &b).unwrap();
        let err = x
            .iter()
            .zip(&xd)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "err {err}");
        // A converged solution used as the next guess needs no iterations.
        let (_, again) = solve_bicgstab_ilut(&a, &b, &x, &cfg).unwrap();
        assert_eq!(again.iterations, 0);
    }

    #[test]
    fn ilut_respects_fill_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_wcdd(40, &mut rng);
        let cfg = IlutConfig {
            fill: 2,
            drop_tol: 0.0,
        };
        let m = IlutPreconditioner::factor(&a, cfg);
        for i in 0..40 {
            let (c, _) = a.row(i);
            let lo = c.iter().filter(|&&j| j < i).count();
            let up = c.iter().filter(|&&j| j > i).count();
            assert!(m.lower_row_len(i) <= lo + 2);
            assert!(m.upper_row_len(i) <= up + 2);
        }
    }

    #[test]
    fn full_fill_ilut_is_exact_lu() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_wcdd(20, &mut rng);
        let m = IlutPreconditioner::factor(
            &a,
            IlutConfig {
                fill: 40,
                drop_tol: 0.0,
            },
        );
        let b: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let mut x = vec![0.0; 20];
        m.apply(&b, &mut x);
        let xd = solve_dense_lu(&a.to_dense(), &b).unwrap();
        for (p, q) in x.iter().zip(&xd) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn maxit_is_reported_with_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_wcdd(30, &mut rng);
        let cfg = BicgstabConfig {
            max_iterations: 1,
            rtol: 1e-14,
            ..Default::default()
        };
        let b = vec![1.0; 30];
        match solve_bicgstab(&a, &b, &vec![0.0; 30], &IdentityPreconditioner, &cfg) {
            Err(SolveError::MaxIterations {
                iterations,
                residual,
            }) => {
                assert_eq!(iterations, 1);
                assert!(residual > 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tridiagonal_identity_and_laplacian() {
        let b = vec![1.0, 2.0, 3.0];
        assert_eq!(
            solve_tridiagonal(&[0.0; 3], &[1.0; 3], &[0.0; 3], &b).unwrap(),
            b
        );

        let n = 10;
        let lo = vec![-1.0; n];
        let up = vec![-1.0; n];
        let di = vec![2.0; n];
        let ones = vec![1.0; n];
        let x = solve_tridiagonal(&lo, &di, &up, &ones).unwrap();
        let mut rows = Vec::new();
        for i in 0..n {
            let mut r = vec![0.0; n];
            r[i] = 2.0;
            if i > 0 {
                r[i - 1] = -1.0;
            }
            if i + 1 < n {
                r[i + 1] = -1.0;
            }
            rows.push(r);
        }
        let xd = solve_dense_lu(&crate::dense::DenseMatrix::from_rows(&rows), &ones).unwrap();
        for (p, q) in x.iter().zip(&xd) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn tridiagonal_zero_pivot_errors() {
        assert_eq!(
            solve_tridiagonal(&[0.0, 0.0], &[0.0, 1.0], &[0.0, 0.0], &[1.0, 1.0]),
            Err(SolveError::ZeroPivot { row: 0 })
        );
    }

    #[test]
    fn auto_solver_picks_thomas_for_tridiagonal() {
        let a = SparseMatrix::from_rows(vec![
            vec![(0, 2.0), (1, -1.0)],
            vec![(0, -1.0), (1, 2.0), (2, -1.0)],
            vec![(1, -1.0), (2, 2.0)],
        ])
        .unwrap();
        let b = [1.0, 0.0, 1.0];
        let cfg = BicgstabConfig::default();
        let (x, st) = solve_linear(&a, &b, &[0.0; 3], LinearSolverKind::Auto, &cfg).unwrap();
        assert_eq!(st.iterations, 1);
        let (y, _) = solve_linear(&a, &b, &[0.0; 3], LinearSolverKind::Bicgstab, &cfg).unwrap();
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-10 && (p - 1.0).abs() < 1e-12);
        }
        let (_, again) = solve_linear(&a, &b, &x, LinearSolverKind::Auto, &cfg).unwrap();
        assert_eq!(again.iterations, 0);
    }

    #[test]
    fn bidiagonal_is_exact() {
        let x = solve_tridiagonal(
            &[0.0, -1.0, -1.0],
            &[1.0, 1.0, 1.0],
            &[0.0; 3],
            &[1.0, 0.0, 0.0],
        )
        .unwrap();
        assert_eq!(x, vec![1.0, 1.0, 1.0]);
    }
}
