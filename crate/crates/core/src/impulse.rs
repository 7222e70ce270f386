//! Combined stochastic/impulse fixed-point problems
//! `max(sup_w {L(w)v + c(w) - v}, delta * sup_z {B(z)v + k(z) - v}) = 0`.

use std::sync::Arc;

use crate::bellman::{
    bellman_residual, policy_iteration, BellmanProblem, PiConfig, PiError, PiOutcome, Policy,
    RowScratch,
};
use crate::matrix::{RowBuf, SparseMatrix};

/// Tolerance under which a transition row counts as stochastic.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Per-row control: continue with stochastic control `w`, or apply
/// impulse `z` (both are indices into the row's finite sets).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ImpulseControl {
    Continue { w: usize },
    Impulse { z: usize },
}

impl ImpulseControl {
    pub fn psi(&self) -> u8 {
        match self {
            ImpulseControl::Continue { .. } => 0,
            ImpulseControl::Impulse { .. } => 1,
        }
    }
}

/// Row evaluators for `L(w)`, `c(w)`, `B(z)`, `k(z)`.
pub trait ImpulseModel: Sync + Send {
    fn size(&self) -> usize;

    /// `|W_i|` if continuation is allowed at `i`, otherwise 0.
    fn num_continuation(&self, i: usize) -> usize;

    /// `|Z_i|` if impulses are allowed at `i`, otherwise 0.
    fn num_impulse(&self, i: usize) -> usize;

    /// Writes row `i` of `L(w)` and returns `c_i(w)`.
    fn continuation_row(&self, i: usize, w: usize, row: &mut RowBuf) -> f64;

    /// Writes row `i` of `B(z)` and returns `k_i(z)`.
    fn impulse_row(&self, i: usize, z: usize, row: &mut RowBuf) -> f64;

    /// `[L(w) v]_i + c_i(w)`.
    fn continuation_value(&self, i: usize, w: usize, v: &[f64], row: &mut RowBuf) -> f64 {
        row.clear();
        let c = self.continuation_row(i, w, row);
        row.dot(v) + c
    }

    /// First maximizer of [`ImpulseModel::continuation_value`] over `w`,
    /// for models that can find it without enumerating.
    fn best_continuation(&self, _i: usize, _v: &[f64], _row: &mut RowBuf) -> Option<(usize, f64)> {
        None
    }

    /// `[B(z) v]_i + k_i(z)`.
    fn impulse_value(&self, i: usize, z: usize, v: &[f64], row: &mut RowBuf) -> f64 {
        row.clear();
        let k = self.impulse_row(i, z, row);
        row.dot(v) + k
    }
}

pub type KeepFn<'a> = Arc<dyn Fn(usize, &ImpulseControl) -> bool + Send + Sync + 'a>;

/// An impulse model with scaling `delta` and an optional control
/// restriction.
#[derive(Clone)]
pub struct ImpulseControlProblem<'a, M> {
    model: Arc<M>,
    delta: f64,
    keep: Option<KeepFn<'a>>,
}

impl<'a, M: ImpulseModel> std::fmt::Debug for ImpulseControlProblem<'a, M> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImpulseControlProblem")
            .field("size", &self.model.size())
            .field("delta", &self.delta)
            .field("restricted", &self.keep.is_some())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ImpulseError {
    #[error("control set at state {state} is empty")]
    EmptyControlSet { state: usize },
    #[error("delta must be positive")]
    NonPositiveDelta,
}

impl<'a, M: ImpulseModel> ImpulseControlProblem<'a, M> {
    pub fn new(model: M, delta: f64) -> Result<Self, ImpulseError> {
        Self::from_arc(Arc::new(model), delta)
    }

    pub fn from_arc(model: Arc<M>, delta: f64) -> Result<Self, ImpulseError> {
        if !(delta > 0.0) {
            return Err(ImpulseError::NonPositiveDelta);
        }
        let p = Self {
            model,
            delta,
            keep: None,
        };
        p.check_nonempty()?;
        Ok(p)
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn is_restricted(&self) -> bool {
        self.keep.is_some()
    }

    fn allowed(&self, i: usize, c: &ImpulseControl) -> bool {
        self.keep.as_ref().map_or(true, |k| k(i, c))
    }

    fn check_nonempty(&self) -> Result<(), ImpulseError> {
        let mut buf = Vec::new();
        for i in 0..self.model.size() {
            buf.clear();
            self.controls(i, &mut buf);
            if buf.is_empty() {
                return Err(ImpulseError::EmptyControlSet { state: i });
            }
        }
        Ok(())
    }

    /// Restricts the control set to controls passing `keep` (composed with
    /// any existing restriction).
    pub fn restrict<F>(&self, keep: F) -> Result<Self, ImpulseError>
    where
        F: Fn(usize, &ImpulseControl) -> bool + Send + Sync + 'a,
    {
        let keep: KeepFn<'a> = match &self.keep {
            None => Arc::new(keep),
            Some(old) => {
                let old = old.clone();
                Arc::new(move |i, c| old(i, c) && keep(i, c))
            }
        };
        let p = Self {
            model: self.model.clone(),
            delta: self.delta,
            keep: Some(keep),
        };
        p.check_nonempty()?;
        Ok(p)
    }

    /// The same problem without any restriction.
    pub fn unrestricted(&self) -> Self {
        Self {
            model: self.model.clone(),
            delta: self.delta,
            keep: None,
        }
    }

    /// Identical data with `delta` replaced.
    pub fn delta_rescale(&self, delta: f64) -> Result<Self, ImpulseError> {
        if !(delta > 0.0) {
            return Err(ImpulseError::NonPositiveDelta);
        }
        Ok(Self {
            model: self.model.clone(),
            delta,
            keep: self.keep.clone(),
        })
    }
}

impl<'a, M: ImpulseModel> BellmanProblem for ImpulseControlProblem<'a, M> {
    type Control = ImpulseControl;

    fn size(&self) -> usize {
        self.model.size()
    }

    fn controls(&self, i: usize, out: &mut Vec<ImpulseControl>) {
        for w in 0..self.model.num_continuation(i) {
            let c = ImpulseControl::Continue { w };
            if self.allowed(i, &c) {
                out.push(c);
            }
        }
        for z in 0..self.model.num_impulse(i) {
            let c = ImpulseControl::Impulse { z };
            if self.allowed(i, &c) {
                out.push(c);
            }
        }
    }

    fn row(&self, i: usize, control: &ImpulseControl, row: &mut RowBuf) -> f64 {
        match *control {
            ImpulseControl::Continue { w } => {
                let c = self.model.continuation_row(i, w, row);
                identity_minus(row, i, 1.0);
                c
            }
            ImpulseControl::Impulse { z } => {
                let k = self.model.impulse_row(i, z, row);
                identity_minus(row, i, self.delta);
                self.delta * k
            }
        }
    }

    fn row_value(&self, i: usize, control: &ImpulseControl, v: &[f64], row: &mut RowBuf) -> f64 {
        match *control {
            ImpulseControl::Continue { w } => self.model.continuation_value(i, w, v, row) - v[i],
            ImpulseControl::Impulse { z } => {
                self.delta * (self.model.impulse_value(i, z, v, row) - v[i])
            }
        }
    }

    fn improve_row(
        &self,
        i: usize,
        v: &[f64],
        s: &mut RowScratch<ImpulseControl>,
    ) -> (ImpulseControl, f64) {
        let mut best: Option<(ImpulseControl, f64)> = None;
        if let Some((w, val)) = self.model.best_continuation(i, v, &mut s.row) {
            let c = ImpulseControl::Continue { w };
            if self.allowed(i, &c) {
                best = Some((c, val - v[i]));
            }
        }
        let enumerate = best.is_none();
        for w in (0..self.model.num_continuation(i)).filter(|_| enumerate) {
            let c = ImpulseControl::Continue { w };
            if !self.allowed(i, &c) {
                continue;
            }
            let val = self.model.continuation_value(i, w, v, &mut s.row) - v[i];
            if best.map_or(true, |(_, b)| val > b) {
                best = Some((c, val));
            }
        }
        for z in 0..self.model.num_impulse(i) {
            let c = ImpulseControl::Impulse { z };
            if !self.allowed(i, &c) {
                continue;
            }
            let val = self.delta * (self.model.impulse_value(i, z, v, &mut s.row) - v[i]);
            if best.map_or(true, |(_, b)| val > b) {
                best = Some((c, val));
            }
        }
        best.expect("control set is empty")
    }
}

/// Turns the stored row `r` of `L` or `B` into `scale * (e_i - r)`. Rows
/// summing to one get a balanced diagonal so their slack is exactly zero.
fn identity_minus(row: &mut RowBuf, i: usize, scale: f64) {
    row.normalize();
    let sum: f64 = row.entries().iter().map(|e| e.1).sum();
    let stochastic =
        (sum - 1.0).abs() <= STOCHASTIC_TOL && row.entries().iter().all(|e| e.1 >= 0.0);
    let rii = row.remove(i);
    row.scale(-scale);
    if stochastic {
        row.balance_diagonal(i, 0.0);
    } else {
        row.push(i, scale * (1.0 - rii));
        row.normalize();
    }
}

/// `A(P)` and `b(P)` for a given policy.
pub fn assemble<M: ImpulseModel>(
    problem: &ImpulseControlProblem<'_, M>,
    policy: &Policy<ImpulseControl>,
) -> (SparseMatrix, Vec<f64>) {
    crate::bellman::assemble_policy(problem, policy)
}

/// Policy iteration on the (possibly restricted) problem.
pub fn solve_impulse<M: ImpulseModel>(
    problem: &ImpulseControlProblem<'_, M>,
    v0: &[f64],
    cfg: &PiConfig,
) -> Result<PiOutcome<ImpulseControl>, PiError<ImpulseControl>> {
    policy_iteration(problem, v0, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub holds: bool,
    /// `max_i |sup_P {-A(P)v + b(P)}_i|` over the full control set.
    pub residual: f64,
    /// Row attaining the residual.
    pub worst_row: usize,
}

/// Evaluates the Bellman residual over the unrestricted control set.
pub fn verify_original<M: ImpulseModel>(
    problem: &ImpulseControlProblem<'_, M>,
    v: &[f64],
    tol: f64,
) -> Certificate {
    let full = problem.unrestricted();
    let r = bellman_residual(&full, v);
    let mut residual: f64 = 0.0;
    let mut worst_row = 0;
    for (i, x) in r.iter().enumerate() {
        if x.abs() > residual {
            residual = x.abs();
            worst_row = i;
        }
    }
    Certificate {
        holds: residual <= tol,
        residual,
        worst_row,
    }
}

/// `[Bv]_i = max_z {B(z)v + k(z)}_i`; `-inf` where no impulse exists.
pub fn impulse_operator<M: ImpulseModel>(model: &M, v: &[f64]) -> Vec<f64> {
    let mut row = RowBuf::new();
    (0..model.size())
        .map(|i| {
            (0..model.num_impulse(i))
                .map(|z| model.impulse_value(i, z, v, &mut row))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubidempotenceReport {
    /// First pair `(m, n)` with `n < m` and `[B^m v]_i < [B^n v]_i`.
    pub witnesses: Vec<Option<(usize, usize)>>,
}

impl SubidempotenceReport {
    pub fn all_found(&self) -> bool {
        self.witnesses.iter().all(Option::is_some)
    }

    pub fn failures(&self) -> Vec<usize> {
        (0..self.witnesses.len())
            .filter(|&i| self.witnesses[i].is_none())
            .collect()
    }

    pub fn max_m(&self) -> Option<usize> {
        self.witnesses.iter().flatten().map(|w| w.0).max()
    }
}

/// Searches `m = 1..=horizon`, then `n = m-1` down to 0, for a strict
/// decrease of the iterated impulse operator at each state.
pub fn check_subidempotence<M: ImpulseModel>(
    model: &M,
    v: &[f64],
    horizon: usize,
) -> SubidempotenceReport {
    let mut powers = vec![v.to_vec()];
    for _ in 0..horizon {
        let next = impulse_operator(model, powers.last().unwrap());
        powers.push(next);
    }
    let witnesses = (0..model.size())
        .map(|i| {
            for m in 1..=horizon {
                for n in (0..m).rev() {
                    if powers[m][i] < powers[n][i] {
                        return Some((m, n));
                    }
                }
            }
            None
        })
        .collect();
    SubidempotenceReport { witnesses }
}

#[derive(Debug, Clone, PartialEq)]
pub enum H3Violation {
    /// `I - L(w)` row is not an SDD Z-row with positive diagonal.
    Continuation { state: usize, w: usize },
    /// `I - B(z)` row is not a WDD Z-row or `B_ii` is outside `[0, 1]`.
    Impulse { state: usize, z: usize },
}

/// Row-wise check of the structural assumption on `L` and `B`.
pub fn check_h3<M: ImpulseModel>(model: &M) -> Vec<H3Violation> {
    let mut out = Vec::new();
    let mut row = RowBuf::new();
    for i in 0..model.size() {
        for w in 0..model.num_continuation(i) {
            row.clear();
            model.continuation_row(i, w, &mut row);
            identity_minus(&mut row, i, 1.0);
            let (diag, off, z_ok) = row_parts(&row, i);
            if !(z_ok && diag > 0.0 && diag - off > 0.0) {
                out.push(H3Violation::Continuation { state: i, w });
            }
        }
        for z in 0..model.num_impulse(i) {
            row.clear();
            model.impulse_row(i, z, &mut row);
            row.normalize();
            let bii = row.entries().iter().find(|e| e.0 == i).map_or(0.0, |e| e.1);
            identity_minus(&mut row, i, 1.0);
            let (diag, off, z_ok) = row_parts(&row, i);
            if !(z_ok && diag - off >= 0.0 && (0.0..=1.0).contains(&bii)) {
                out.push(H3Violation::Impulse { state: i, z });
            }
        }
    }
    out
}

fn row_parts(row: &RowBuf, i: usize) -> (f64, f64, bool) {
    let mut diag = 0.0;
    let mut off = 0.0;
    let mut z_ok = true;
    for &(j, x) in row.entries() {
        if j == i {
            diag = x;
        } else if x != 0.0 {
            off += x.abs();
            z_ok &= x < 0.0;
        }
    }
    (diag, off, z_ok)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bellman::{brute_force_bellman, Termination};
    use crate::matrix::{classify_rows, RowClass};

    /// Two states; state 0 continues only, state 1 may jump to 0 or to itself.
    struct Toy;

    impl ImpulseModel for Toy {
        fn size(&self) -> usize {
            2
        }
        fn num_continuation(&self, _: usize) -> usize {
            1
        }
        fn num_impulse(&self, i: usize) -> usize {
            if i == 1 {
                2
            } else {
                0
            }
        }
        fn continuation_row(&self, i: usize, _: usize, row: &mut RowBuf) -> f64 {
            row.push(i, 0.5);
            if i == 1 {
                -3.0
            } else {
                1.0
            }
        }
        fn impulse_row(&self, _: usize, z: usize, row: &mut RowBuf) -> f64 {
            row.push(z, 1.0);
            if z == 1 {
                -0.1
            } else {
                -0.25
            }
        }
    }

    #[test]
    fn assembly_branches() {
        let p = ImpulseControlProblem::new(Toy, 2.0).unwrap();
        let pol = Policy {
            controls: vec![
                ImpulseControl::Continue { w: 0 },
                ImpulseControl::Impulse { z: 0 },
            ],
        };
        let (a, b) = assemble(&p, &pol);
        assert_eq!(a.to_dense()[(0, 0)], 0.5);
        assert_eq!(a.get(1, 0), -2.0);
        assert_eq!(a.get(1, 1), 2.0);
        assert_eq!(b, vec![1.0, -0.5]);
        let self_jump = Policy {
            controls: vec![
                ImpulseControl::Continue { w: 0 },
                ImpulseControl::Impulse { z: 1 },
            ],
        };
        let (a, _) = assemble(&p, &self_jump);
        assert_eq!(a.row(1).1.iter().filter(|x| **x != 0.0).count(), 0);
    }

    #[test]
    fn balanced_impulse_rows_have_zero_slack() {
        let p = ImpulseControlProblem::new(Toy, 1.0 / 3.0).unwrap();
        let pol = Policy {
            controls: vec![
                ImpulseControl::Continue { w: 0 },
                ImpulseControl::Impulse { z: 0 },
            ],
        };
        let (a, _) = assemble(&p, &pol);
        let d = classify_rows(&a);
        assert_eq!(d.slack[1], 0.0);
        assert_eq!(d.labels[1], RowClass::WddNotSdd);
    }

    #[test]
    fn delta_does_not_change_the_solution() {
        let cfg = PiConfig::default();
        let p = ImpulseControlProblem::new(Toy, 1.0).unwrap();
        let p = p
            .restrict(|i, c| !(i == 1 && *c == ImpulseControl::Impulse { z: 1 }))
            .unwrap();
        let a = solve_impulse(&p, &[0.0, 0.0], &cfg).unwrap();
        let b = solve_impulse(&p.delta_rescale(100.0).unwrap(), &[0.0, 0.0], &cfg).unwrap();
        assert!((a.v[0] - 2.0).abs() < 1e-12);
        assert!((a.v[1] - 1.75).abs() < 1e-12);
        for i in 0..2 {
            assert!((a.v[i] - b.v[i]).abs() < 1e-10);
        }
        assert!(verify_original(&p, &a.v, 1e-9).holds);
        let mut bad = a.v.clone();
        bad[0] += 0.1;
        assert!(!verify_original(&p, &bad, 1e-9).holds);
        let bf = brute_force_bellman(&p).unwrap();
        assert!((bf[1] - a.v[1]).abs() < 1e-10);
    }

    #[test]
    fn restriction_composes_and_rejects_empty_sets() {
        let p = ImpulseControlProblem::new(Toy, 1.0).unwrap();
        let q = p.restrict(|_, _| true).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        p.controls(1, &mut a);
        q.controls(1, &mut b);
        assert_eq!(a, b);
        let only_impulse = p.restrict(|_, c| c.psi() == 1);
        assert_eq!(
            only_impulse.unwrap_err(),
            ImpulseError::EmptyControlSet { state: 0 }
        );
        let r = p
            .restrict(|_, c| *c != ImpulseControl::Impulse { z: 1 })
            .unwrap();
        let r = r
            .restrict(|_, c| *c != ImpulseControl::Impulse { z: 0 })
            .unwrap();
        let mut c = Vec::new();
        r.controls(1, &mut c);
        assert_eq!(c, vec![ImpulseControl::Continue { w: 0 }]);
    }

    #[test]
    fn unrestricted_self_jump_is_singular() {
        // At v = 0 row 1 prefers the self jump (-0.25 > -3).
        let p = ImpulseControlProblem::new(Toy, 1.0).unwrap();
        match solve_impulse(&p, &[0.0, 0.0], &PiConfig::default()) {
            Err(PiError::SingularMatrix {
                iteration: 1,
                diagnostic,
                ..
            }) => {
                assert_eq!(diagnostic.zero_rows, vec![1])
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn subidempotence_witnesses() {
        struct Fixed;
        impl ImpulseModel for Fixed {
            fn size(&self) -> usize {
                2
            }
            fn num_continuation(&self, _: usize) -> usize {
                1
            }
            fn num_impulse(&self, _: usize) -> usize {
                1
            }
            fn continuation_row(&self, _: usize, _: usize, _: &mut RowBuf) -> f64 {
                0.0
            }
            fn impulse_row(&self, _: usize, _: usize, row: &mut RowBuf) -> f64 {
                row.push(0, 1.0);
                -1.0
            }
        }
        let r = check_subidempotence(&Fixed, &[0.0, -1.0], 8);
        assert_eq!(r.witnesses, vec![Some((1, 0)), Some((2, 1))]);
        assert!(r.all_found());

        struct Idle;
        impl ImpulseModel for Idle {
            fn size(&self) -> usize {
                2
            }
            fn num_continuation(&self, _: usize) -> usize {
                1
            }
            fn num_impulse(&self, _: usize) -> usize {
                1
            }
            fn continuation_row(&self, _: usize, _: usize, _: &mut RowBuf) -> f64 {
                0.0
            }
            fn impulse_row(&self, i: usize, _: usize, row: &mut RowBuf) -> f64 {
                row.push(i, 1.0);
                0.0
            }
        }
        let r = check_subidempotence(&Idle, &[1.0, 2.0], 8);
        assert_eq!(r.failures(), vec![0, 1]);
    }

    #[test]
    fn h3_detects_bad_rows() {
        assert!(check_h3(&Toy).is_empty());
        struct Bad;
        impl ImpulseModel for Bad {
            fn size(&self) -> usize {
                1
            }
            fn num_continuation(&self, _: usize) -> usize {
                1
            }
            fn num_impulse(&self, _: usize) -> usize {
                1
            }
            fn continuation_row(&self, _: usize, _: usize, row: &mut RowBuf) -> f64 {
                row.push(0, 1.0);
                0.0
            }
            fn impulse_row(&self, _: usize, _: usize, row: &mut RowBuf) -> f64 {
                row.push(0, 1.5);
                0.0
            }
        }
        assert_eq!(
            check_h3(&Bad),
            vec![
                H3Violation::Continuation { state: 0, w: 0 },
                H3Violation::Impulse { state: 0, z: 0 }
            ]
        );
        let p = ImpulseControlProblem::new(Toy, 1.0).unwrap();
        let p = p
            .restrict(|i, c| !(i == 1 && *c == ImpulseControl::Impulse { z: 1 }))
            .unwrap();
        let out = solve_impulse(&p, &[0.0; 2], &PiConfig::default()).unwrap();
        assert_ne!(out.stats.termination, Termination::MaxIterations);
    }
}
