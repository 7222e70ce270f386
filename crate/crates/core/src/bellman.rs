//! Row-decoupled Bellman problems `sup_P { -A(P) v + b(P) } = 0` and
//! their solution by (epsilon-)policy iteration.

use std::fmt::Debug;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dense::{DenseLu, DenseMatrix};
use crate::matrix::{
    diagnose_wdd_m_matrix, has_positive_diagonal, is_wcdd, is_z_matrix, CsrBuilder,
    MMatrixDiagnostic, RowBuf, SparseMatrix,
};
use crate::solvers::{solve_linear, BicgstabConfig, LinearSolverKind, SolveError, SolveStats};

/// Largest global policy count accepted by [`brute_force_bellman`].
pub const BRUTE_FORCE_CAP: usize = 100_000;

/// Scratch space reused across row evaluations.
#[derive(Debug, Clone)]
pub struct RowScratch<C> {
    pub controls: Vec<C>,
    pub row: RowBuf,
}

impl<C> Default for RowScratch<C> {
    fn default() -> Self {
        Self {
            controls: Vec::new(),
            row: RowBuf::new(),
        }
    }
}

pub trait BellmanProblem: Sync {
    type Control: Copy + PartialEq + Debug + Send + Sync;

    fn size(&self) -> usize;

    /// Appends the finite control set of row `i` to `out`. Ties in the
    /// argmax go to the earliest control, so continuation controls
    /// should come first.
    fn controls(&self, i: usize, out: &mut Vec<Self::Control>);

    /// Writes row `i` of `A(P)` into `row` (already cleared) and returns
    /// `b_i(P)`.
    fn row(&self, i: usize, control: &Self::Control, row: &mut RowBuf) -> f64;

    /// `-[A(P) v]_i + b_i(P)`.
    fn row_value(&self, i: usize, control: &Self::Control, v: &[f64], row: &mut RowBuf) -> f64 {
        row.clear();
        let b = self.row(i, control, row);
        b - row.dot(v)
    }

    /// Exact argmax over the controls of row `i`.
    fn improve_row(
        &self,
        i: usize,
        v: &[f64],
        scratch: &mut RowScratch<Self::Control>,
    ) -> (Self::Control, f64) {
        scratch.controls.clear();
        self.controls(i, &mut scratch.controls);
        let mut best: Option<(Self::Control, f64)> = None;
        for k in 0..scratch.controls.len() {
            let c = scratch.controls[k];
            let val = self.row_value(i, &c, v, &mut scratch.row);
            if best.map_or(true, |(_, b)| val > b) {
                best = Some((c, val));
            }
        }
        best.expect("control set is empty")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy<C> {
    pub controls: Vec<C>,
}

impl<C> Policy<C> {
    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Tolerance,
    PolicyRepeat,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiStats {
    /// Number of policy evaluations (linear solves).
    pub iterations: usize,
    /// Number of policy improvement steps.
    pub improvements: usize,
    pub linear: Vec<SolveStats>,
    /// Stopping-rule quantity after each evaluation.
    pub residuals: Vec<f64>,
    pub termination: Termination,
    /// Every evaluated matrix was an SDD Z-matrix.
    pub all_sdd_z: bool,
    /// Populated when [`PiConfig::record_iterates`] is set.
    pub iterates: Vec<Vec<f64>>,
}

impl PiStats {
    fn new() -> Self {
        Self {
            iterations: 0,
            improvements: 0,
            linear: Vec::new(),
            residuals: Vec::new(),
            termination: Termination::MaxIterations,
            all_sdd_z: true,
            iterates: Vec::new(),
        }
    }

    pub fn linear_iterations(&self) -> usize {
        self.linear.iter().map(|s| s.iterations).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiConfig {
    pub tol: f64,
    pub scale: f64,
    pub max_iterations: usize,
    /// Refuse to solve systems that are not WCDD Z-matrices with positive
    /// diagonals.
    pub guard: bool,
    pub solver: LinearSolverKind,
    pub linear: BicgstabConfig,
    pub record_iterates: bool,
}

impl Default for PiConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            scale: 1.0,
            max_iterations: 200,
            guard: true,
            solver: LinearSolverKind::Auto,
            linear: BicgstabConfig::default(),
            record_iterates: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PiOutcome<C> {
    pub v: Vec<f64>,
    pub policy: Policy<C>,
    pub stats: PiStats,
}

#[derive(Debug, Clone, Error)]
pub enum PiError<C: Debug> {
    #[error("singular matrix at iteration {iteration}: {diagnostic}")]
    SingularMatrix {
        iteration: usize,
        diagnostic: MMatrixDiagnostic,
        policy: Policy<C>,
    },
    #[error("linear solve failed at iteration {iteration}: {source}")]
    LinearSolver {
        iteration: usize,
        source: SolveError,
        policy: Policy<C>,
    },
    #[error("initial guess has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
}

impl<C: Debug> PiError<C> {
    pub fn iteration(&self) -> usize {
        match self {
            PiError::SingularMatrix { iteration, .. } | PiError::LinearSolver { iteration, .. } => {
                *iteration
            }
            PiError::Dimension { .. } => 0,
        }
    }
}

/// Exact row-wise argmax of `-A(P) v + b(P)`.
pub fn improve_policy<P: BellmanProblem>(problem: &P, v: &[f64]) -> Policy<P::Control> {
    improve_with_values(problem, v).0
}

/// Policy improvement that also returns the row maxima.
pub fn improve_with_values<P: BellmanProblem>(
    problem: &P,
    v: &[f64],
) -> (Policy<P::Control>, Vec<f64>) {
    let n = problem.size();
    let pairs: Vec<(P::Control, f64)> = (0..n)
        .into_par_iter()
        .with_min_len(512)
        .map_init(RowScratch::default, |s, i| problem.improve_row(i, v, s))
        .collect();
    let (controls, values) = pairs.into_iter().unzip();
    (Policy { controls }, values)
}

/// `sup_P { -A(P) v + b(P) }` row by row.
pub fn bellman_residual<P: BellmanProblem>(problem: &P, v: &[f64]) -> Vec<f64> {
    improve_with_values(problem, v).1
}

/// Every control of row `i` with its value `-[A(P) v]_i + b_i(P)`.
pub fn row_candidates<P: BellmanProblem>(
    problem: &P,
    i: usize,
    v: &[f64],
) -> Vec<(P::Control, f64)> {
    let mut controls = Vec::new();
    problem.controls(i, &mut controls);
    let mut row = RowBuf::new();
    controls
        .into_iter()
        .map(|c| {
            let val = problem.row_value(i, &c, v, &mut row);
            (c, val)
        })
        .collect()
}

pub fn assemble_policy<P: BellmanProblem>(
    problem: &P,
    policy: &Policy<P::Control>,
) -> (SparseMatrix, Vec<f64>) {
    let n = problem.size();
    let mut builder = CsrBuilder::with_capacity(n, 5 * n);
    let mut row = RowBuf::new();
    let mut b = Vec::with_capacity(n);
    for (i, c) in policy.controls.iter().enumerate() {
        row.clear();
        b.push(problem.row(i, c, &mut row));
        builder
            .push_row(&mut row)
            .expect("row columns within range");
    }
    (builder.finish().expect("square by construction"), b)
}

/// Howard's policy iteration from `v0`.
pub fn policy_iteration<P: BellmanProblem>(
    problem: &P,
    v0: &[f64],
    cfg: &PiConfig,
) -> Result<PiOutcome<P::Control>, PiError<P::Control>> {
    run_iteration(problem, v0, cfg, |v, _| improve_policy(problem, v))
}

/// How an approximate argmax picks among near-optimal controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ApproxArgmax {
    Exact,
    /// Lowest-index control within `eps` of the row maximum.
    FirstWithin,
    /// A pseudo-random control within `eps` of the row maximum.
    Seeded(u64),
}

/// Policy iteration where row `i` accepts any control whose value is
/// within `eps(l)` of the maximum at iteration `l`.
pub fn epsilon_policy_iteration<P: BellmanProblem>(
    problem: &P,
    v0: &[f64],
    eps: &dyn Fn(usize) -> f64,
    selector: ApproxArgmax,
    cfg: &PiConfig,
) -> Result<PiOutcome<P::Control>, PiError<P::Control>> {
    if selector == ApproxArgmax::Exact {
        return policy_iteration(problem, v0, cfg);
    }
    run_iteration(problem, v0, cfg, |v, l| {
        let e = eps(l);
        let controls = (0..problem.size())
            .map(|i| {
                let cands = row_candidates(problem, i, v);
                let max = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
                let within: Vec<usize> = (0..cands.len())
                    .filter(|&k| cands[k].1 >= max - e)
                    .collect();
                let k = match selector {
                    ApproxArgmax::Seeded(seed) => {
                        let mut rng =
                            ChaCha8Rng::seed_from_u64(seed ^ ((l as u64) << 32) ^ i as u64);
                        within[rng.gen_range(0..within.len())]
                    }
                    _ => within[0],
                };
                cands[k].0
            })
            .collect();
        Policy { controls }
    })
}

/// Default summable tolerance sequence `eps0 * 2^-l`.
pub fn geometric_eps(eps0: f64) -> impl Fn(usize) -> f64 {
    move |l| eps0 * 0.5f64.powi(l as i32)
}

fn run_iteration<P, F>(
    problem: &P,
    v0: &[f64],
    cfg: &PiConfig,
    mut improve: F,
) -> Result<PiOutcome<P::Control>, PiError<P::Control>>
where
    P: BellmanProblem,
    F: FnMut(&[f64], usize) -> Policy<P::Control>,
{
    let n = problem.size();
    if v0.len() != n {
        return Err(PiError::Dimension {
            expected: n,
            got: v0.len(),
        });
    }
    let mut stats = PiStats::new();
    let mut v = v0.to_vec();
    let mut prev: Option<Policy<P::Control>> = None;
    for l in 1..=cfg.max_iterations {
        let policy = improve(&v, l);
        stats.improvements += 1;
        if prev.as_ref() == Some(&policy) {
            stats.termination = Termination::PolicyRepeat;
            return Ok(PiOutcome { v, policy, stats });
        }
        let (a, b) = assemble_policy(problem, &policy);
        let report = is_wcdd(&a);
        let z = is_z_matrix(&a);
        stats.all_sdd_z &= z && report.dominance.all_sdd();
        if cfg.guard && !(z && report.is_wcdd && has_positive_diagonal(&a)) {
            let (_, diagnostic) = diagnose_wdd_m_matrix(&a);
            return Err(PiError::SingularMatrix {
                iteration: l,
                diagnostic,
                policy,
            });
        }
        let (next, lin) = match solve_linear(&a, &b, &v, cfg.solver, &cfg.linear) {
            Ok(r) => r,
            Err(source) => {
                return Err(PiError::LinearSolver {
                    iteration: l,
                    source,
                    policy,
                })
            }
        };
        stats.linear.push(lin);
        stats.iterations = l;
        let change = next
            .iter()
            .zip(&v)
            .map(|(x, y)| (x - y).abs() / x.abs().max(cfg.scale))
            .fold(0.0, f64::max);
        stats.residuals.push(change);
        if cfg.record_iterates {
            stats.iterates.push(next.clone());
        }
        v = next;
        if change < cfg.tol {
            stats.termination = Termination::Tolerance;
            return Ok(PiOutcome { v, policy, stats });
        }
        prev = Some(policy);
    }
    stats.termination = Termination::MaxIterations;
    let policy = prev.expect("at least one iteration");
    Ok(PiOutcome { v, policy, stats })
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BruteForceError {
    #[error("{count} global policies exceed the cap of {BRUTE_FORCE_CAP}")]
    TooManyPolicies { count: usize },
    #[error("no policy yields a solution of the Bellman problem")]
    NoCandidate,
    #[error("solutions are not unique (two candidates differ by {distance:e})")]
    NotUnique { distance: f64 },
}

/// Enumerates every global policy, solves each nonsingular system densely
/// and returns the unique vector satisfying the Bellman equation.
pub fn brute_force_bellman<P: BellmanProblem>(problem: &P) -> Result<Vec<f64>, BruteForceError> {
    let n = problem.size();
    let sets: Vec<Vec<P::Control>> = (0..n)
        .map(|i| {
            let mut c = Vec::new();
            problem.controls(i, &mut c);
            c
        })
        .collect();
    let mut count: usize = 1;
    for s in &sets {
        count = count.saturating_mul(s.len());
        if count > BRUTE_FORCE_CAP {
            return Err(BruteForceError::TooManyPolicies { count });
        }
    }
    // Cache each (row, control) pair once.
    let mut rows: Vec<Vec<(Vec<f64>, f64)>> = Vec::with_capacity(n);
    let mut buf = RowBuf::new();
    for (i, s) in sets.iter().enumerate() {
        let mut per = Vec::with_capacity(s.len());
        for c in s {
            buf.clear();
            let bi = problem.row(i, c, &mut buf);
            let mut dense = vec![0.0; n];
            for &(j, x) in buf.entries() {
                dense[j] += x;
            }
            per.push((dense, bi));
        }
        rows.push(per);
    }
    let mut idx = vec![0usize; n];
    let mut found: Option<Vec<f64>> = None;
    for _ in 0..count {
        let mut a = DenseMatrix::zeros(n);
        let mut b = vec![0.0; n];
        for i in 0..n {
            let (r, bi) = &rows[i][idx[i]];
            for j in 0..n {
                a[(i, j)] = r[j];
            }
            b[i] = *bi;
        }
        if let Ok(lu) = DenseLu::factor(&a) {
            let v = lu.solve(&b).expect("dimension matches");
            let ok = (0..n).all(|i| {
                let sup = rows[i]
                    .iter()
                    .map(|(r, bi)| bi - r.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max);
                sup.abs() <= 1e-9
            });
            if ok {
                match &found {
                    None => found = Some(v),
                    Some(f) => {
                        let d = f
                            .iter()
                            .zip(&v)
                            .map(|(x, y)| (x - y).abs())
                            .fold(0.0, f64::max);
                        if d > 1e-7 {
                            return Err(BruteForceError::NotUnique { distance: d });
                        }
                    }
                }
            }
        }
        for k in 0..n {
            idx[k] += 1;
            if idx[k] < sets[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
    found.ok_or(BruteForceError::NoCandidate)
}

/// Fixed-point value iteration `v <- v + sup_P{-A(P)v + b(P)}`, for small
/// contractive test problems only.
pub fn value_iteration<P: BellmanProblem>(
    problem: &P,
    v0: &[f64],
    tol: f64,
    max_iterations: usize,
) -> Vec<f64> {
    let mut v = v0.to_vec();
    for _ in 0..max_iterations {
        let r = bellman_residual(problem, &v);
        let mut delta: f64 = 0.0;
        for (x, d) in v.iter_mut().zip(&r) {
            *x += d;
            delta = delta.max(d.abs());
        }
        if delta < tol {
            break;
        }
    }
    v
}
