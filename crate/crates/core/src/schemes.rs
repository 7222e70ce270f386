//! Implicit timestepping schemes for HJB quasi-variational inequalities.
//!
//! Each backward timestep is reduced to a Bellman problem: the direct
//! control scheme hands an [`ImpulseControlProblem`] to policy iteration,
//! the penalized scheme adds the impulse operator as a penalty, and the
//! semi-Lagrangian scheme maximizes explicitly and solves once.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::bellman::{policy_iteration, BellmanProblem, PiConfig, PiError, RowScratch};
use crate::grid::{interp_row, Grid};
use crate::impulse::{
    verify_original, ImpulseControl, ImpulseControlProblem, ImpulseError, ImpulseModel,
};
use crate::matrix::{CsrBuilder, MMatrixDiagnostic, RowBuf, SparseMatrix};
use crate::solvers::{
    meets_criterion, solve_bicgstab, solve_tridiagonal, tridiagonal_bands, BicgstabConfig,
    IlutPreconditioner, LinearSolverKind, SolveError, SolveStats,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Direct,
    Penalized,
    SemiLagrangian,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Direct, Scheme::Penalized, Scheme::SemiLagrangian];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Direct => "direct",
            Scheme::Penalized => "penalized",
            Scheme::SemiLagrangian => "semi-lagrangian",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "direct" => Ok(Scheme::Direct),
            "penalized" | "penalty" => Ok(Scheme::Penalized),
            "semi-lagrangian" | "sl" => Ok(Scheme::SemiLagrangian),
            _ => Err(format!("unknown scheme '{s}'")),
        }
    }
}

/// Which solution surfaces a run keeps.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum KeepTimes {
    /// `t = 0` and `t = T`.
    #[default]
    Ends,
    All,
    /// Every k-th time node plus both ends.
    Every(usize),
    /// Time nodes nearest to the listed times.
    Times(Vec<f64>),
}

impl FromStr for KeepTimes {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        match s {
            "ends" | "" => Ok(KeepTimes::Ends),
            "all" => Ok(KeepTimes::All),
            _ => {
                if let Some(k) = s.strip_prefix("every:") {
                    let k: usize = k.parse().map_err(|_| format!("bad stride '{k}'"))?;
                    if k == 0 {
                        return Err("stride must be positive".into());
                    }
                    return Ok(KeepTimes::Every(k));
                }
                s.split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<f64>()
                            .map_err(|_| format!("bad time '{t}'"))
                    })
                    .collect::<Result<Vec<_>, _>>()
                    .map(KeepTimes::Times)
            }
        }
    }
}

impl KeepTimes {
    fn selected(&self, times: &[f64]) -> Vec<bool> {
        let n = times.len();
        let mut keep = vec![false; n];
        match self {
            KeepTimes::Ends => {
                keep[0] = true;
                keep[n - 1] = true;
            }
            KeepTimes::All => keep.iter_mut().for_each(|k| *k = true),
            KeepTimes::Every(k) => {
                for (i, flag) in keep.iter_mut().enumerate() {
                    *flag = i % k == 0;
                }
                keep[n - 1] = true;
            }
            KeepTimes::Times(ts) => {
                for &t in ts {
                    let j = (0..n)
                        .min_by(|&a, &b| (times[a] - t).abs().total_cmp(&(times[b] - t).abs()))
                        .unwrap_or(0);
                    keep[j] = true;
                }
            }
        }
        keep
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    /// `epsilon = d * dt`, `delta = 1 / epsilon`.
    pub d: f64,
    /// Replaces `delta` in the direct scheme.
    pub delta: Option<f64>,
    pub tol: f64,
    pub scale: f64,
    pub max_policy_iterations: usize,
    pub solver: LinearSolverKind,
    pub linear: BicgstabConfig,
    /// Apply the problem's direct-scheme control restriction.
    pub restrict: bool,
    /// Check the Bellman residual over the unrestricted set after each
    /// direct step.
    pub certify: bool,
    /// Fail if a penalized iterate matrix is not an SDD Z-matrix.
    pub assert_sdd: bool,
    pub keep: KeepTimes,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Direct,
            d: 1e-2,
            delta: None,
            tol: 1e-6,
            scale: 1.0,
            max_policy_iterations: 200,
            solver: LinearSolverKind::Auto,
            linear: BicgstabConfig::default(),
            restrict: true,
            certify: false,
            assert_sdd: true,
            keep: KeepTimes::Ends,
        }
    }
}

impl SchemeConfig {
    pub fn new(scheme: Scheme) -> Self {
        Self {
            scheme,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SchemeError> {
        if !(self.d > 0.0) || !self.d.is_finite() {
            return Err(SchemeError::Config(format!(
                "D must be positive, got {}",
                self.d
            )));
        }
        if let Some(delta) = self.delta {
            if !(delta > 0.0) {
                return Err(SchemeError::Config(format!(
                    "delta must be positive, got {delta}"
                )));
            }
        }
        if !(self.tol > 0.0) || !(self.scale > 0.0) {
            return Err(SchemeError::Config("tol and scale must be positive".into()));
        }
        if self.max_policy_iterations == 0 {
            return Err(SchemeError::Config(
                "need at least one policy iteration".into(),
            ));
        }
        Ok(())
    }

    fn pi_config(&self) -> PiConfig {
        PiConfig {
            tol: self.tol,
            scale: self.scale,
            max_iterations: self.max_policy_iterations,
            guard: true,
            solver: self.solver,
            linear: self.linear,
            record_iterates: false,
        }
    }
}

/// Reaction coefficient and forcing of one generator row.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RowTerms {
    /// Coefficient of `u_i` in `L_h u` beyond the balancing diagonal.
    pub reaction: f64,
    pub forcing: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpulseTarget {
    pub z: f64,
    /// State after the impulse.
    pub target: [f64; 2],
    pub cost: f64,
}

/// Controlled part of a semi-Lagrangian splitting.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlledDrift {
    pub drift: [f64; 2],
    pub forcing: f64,
}

/// A discretized HJBQVI with time-homogeneous coefficients.
pub trait QviProblem: Sync + Send {
    fn name(&self) -> &str;
    fn grid(&self) -> &Grid;
    fn rho(&self) -> f64;
    /// Number of stochastic controls in `W_h`.
    fn num_controls(&self) -> usize;
    fn control_value(&self, w: usize) -> f64;

    /// Pushes the nonnegative off-diagonal coefficients of `L_h(w)` at
    /// node `i`; the diagonal is `-sum + reaction`.
    fn generator(&self, i: usize, w: usize, row: &mut RowBuf) -> RowTerms;

    /// `[L_h(w) v]_i + f_i(w)`.
    fn generator_apply(&self, i: usize, w: usize, v: &[f64], row: &mut RowBuf) -> f64 {
        row.clear();
        let t = self.generator(i, w, row);
        let vi = v[i];
        let mut s = t.reaction * vi + t.forcing;
        for &(j, a) in row.entries() {
            s += a * (v[j] - vi);
        }
        s
    }

    /// First maximizer of [`QviProblem::generator_apply`] over `w`, for
    /// problems that can find it without enumerating.
    fn best_generator(&self, _i: usize, _v: &[f64], _row: &mut RowBuf) -> Option<(usize, f64)> {
        None
    }

    /// Control-free part of the semi-Lagrangian splitting.
    fn split_generator(&self, i: usize, row: &mut RowBuf) -> RowTerms;
    /// Controlled drift and forcing of the splitting.
    fn controlled_drift(&self, i: usize, w: usize) -> ControlledDrift;
    /// Project feet that leave the domain onto it instead of skipping
    /// the control. For states held at the boundary by the dynamics.
    fn project_foot(&self) -> bool {
        false
    }
    fn diffusion_depends_on_control(&self) -> bool {
        false
    }

    /// Candidate impulses at node `i`; off-grid targets are discarded.
    fn impulses(&self, i: usize, out: &mut Vec<ImpulseTarget>);
    /// Dirichlet data on the `Lambda` nodes.
    fn dirichlet(&self, _t: f64, _i: usize) -> Option<f64> {
        None
    }
    fn terminal(&self, i: usize) -> f64;
    /// Control restriction for the direct scheme.
    fn allow_direct_impulse(&self, _i: usize, _z: f64) -> bool {
        true
    }
    fn report_point(&self) -> [f64; 2];
}

/// `Phi`: false on Dirichlet nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMask {
    phi: Vec<bool>,
}

impl BoundaryMask {
    pub fn from_problem<P: QviProblem + ?Sized>(p: &P) -> Self {
        let t = *p.grid().times().last().expect("time grid");
        let phi = (0..p.grid().len())
            .map(|i| p.dirichlet(t, i).is_none())
            .collect();
        Self { phi }
    }

    pub fn phi(&self, i: usize) -> bool {
        self.phi[i]
    }

    pub fn dirichlet_nodes(&self) -> Vec<usize> {
        (0..self.phi.len()).filter(|&i| !self.phi[i]).collect()
    }

    pub fn is_trivial(&self) -> bool {
        self.phi.iter().all(|&p| p)
    }
}

/// Interpolated impulse targets, costs and labels for every node.
#[derive(Debug, Clone, Default)]
pub struct ImpulseTable {
    node_ptr: Vec<usize>,
    z: Vec<f64>,
    cost: Vec<f64>,
    entry_ptr: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
}

impl ImpulseTable {
    pub fn build<P: QviProblem + ?Sized>(p: &P) -> Self {
        let grid = p.grid();
        let n = grid.len();
        let mut t = ImpulseTable {
            node_ptr: Vec::with_capacity(n + 1),
            entry_ptr: vec![0],
            ..Default::default()
        };
        t.node_ptr.push(0);
        let mut buf = Vec::new();
        for i in 0..n {
            buf.clear();
            p.impulses(i, &mut buf);
            for imp in &buf {
                let Ok(w) = interp_row(grid, &imp.target[..grid.dim()]) else {
                    continue;
                };
                t.z.push(imp.z);
                t.cost.push(imp.cost);
                for (j, x) in w.entries() {
                    t.cols.push(j as u32);
                    t.weights.push(x);
                }
                t.entry_ptr.push(t.cols.len());
            }
            t.node_ptr.push(t.z.len());
        }
        t
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn count(&self, i: usize) -> usize {
        self.node_ptr[i + 1] - self.node_ptr[i]
    }

    pub fn z(&self, i: usize, k: usize) -> f64 {
        self.z[self.node_ptr[i] + k]
    }

    pub fn cost(&self, i: usize, k: usize) -> f64 {
        self.cost[self.node_ptr[i] + k]
    }

    pub fn weights(&self, i: usize, k: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let e = self.node_ptr[i] + k;
        (self.entry_ptr[e]..self.entry_ptr[e + 1]).map(|q| (self.cols[q] as usize, self.weights[q]))
    }

    /// `B(z) v + K(z)` at node `i`.
    pub fn value(&self, i: usize, k: usize, v: &[f64]) -> f64 {
        let e = self.node_ptr[i] + k;
        let mut s = self.cost[e];
        for q in self.entry_ptr[e]..self.entry_ptr[e + 1] {
            s += self.weights[q] * v[self.cols[q] as usize];
        }
        s
    }

    /// First maximizer of `B(z) v + K(z)` over the impulses at `i`.
    pub fn best(&self, i: usize, v: &[f64]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for k in 0..self.count(i) {
            let x = self.value(i, k, v);
            if best.map_or(true, |(_, b)| x > b) {
                best = Some((k, x));
            }
        }
        best
    }
}

/// Control selected at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeControl {
    pub psi: u8,
    pub w: Option<f64>,
    pub z: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub policy_iterations: usize,
    pub linear_solves: usize,
    pub linear_iterations: usize,
    pub all_sdd_z: bool,
    pub certificate_residual: Option<f64>,
    pub certificate_holds: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub u: Vec<f64>,
    pub stats: StepStats,
    pub controls: Vec<NodeControl>,
}

#[derive(Debug, Clone, Error)]
pub enum SchemeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("semi-Lagrangian splitting requires control-independent diffusion")]
    ControlDependentDiffusion,
    #[error("infeasible control restriction: {0}")]
    Infeasible(#[from] ImpulseError),
    #[error(
        "timestep {step} (t = {t}): singular matrix at policy iteration {iteration}: {diagnostic}"
    )]
    Singular {
        step: usize,
        t: f64,
        iteration: usize,
        diagnostic: MMatrixDiagnostic,
    },
    #[error("timestep {step} (t = {t}): linear solve failed: {source}")]
    Linear {
        step: usize,
        t: f64,
        source: SolveError,
    },
    #[error("timestep {step}: penalized iterate matrix is not an SDD Z-matrix")]
    NotSdd { step: usize },
    #[error("node {node} has no admissible control")]
    NoControl { node: usize },
    #[error("reporting point lies outside the grid")]
    OffGrid,
}

impl SchemeError {
    fn from_pi<C: fmt::Debug>(e: PiError<C>, step: usize, t: f64) -> Self {
        match e {
            PiError::SingularMatrix {
                iteration,
                diagnostic,
                ..
            } => SchemeError::Singular {
                step,
                t,
                iteration,
                diagnostic,
            },
            PiError::LinearSolver { source, .. } => SchemeError::Linear { step, t, source },
            PiError::Dimension { expected, got } => {
                SchemeError::Config(format!("vector length {got}, expected {expected}"))
            }
        }
    }
}

/// Problem data shared by every timestep of a run.
pub struct Discretization<'a, P: ?Sized> {
    problem: &'a P,
    table: ImpulseTable,
    mask: BoundaryMask,
}

impl<'a, P: QviProblem + ?Sized> Discretization<'a, P> {
    pub fn new(problem: &'a P) -> Self {
        Self {
            problem,
            table: ImpulseTable::build(problem),
            mask: BoundaryMask::from_problem(problem),
        }
    }

    pub fn problem(&self) -> &P {
        self.problem
    }

    pub fn table(&self) -> &ImpulseTable {
        &self.table
    }

    pub fn mask(&self) -> &BoundaryMask {
        &self.mask
    }

    fn dirichlet_values(&self, t: f64) -> Vec<f64> {
        (0..self.problem.grid().len())
            .map(|i| {
                if self.mask.phi(i) {
                    0.0
                } else {
                    self.problem.dirichlet(t, i).unwrap_or(0.0)
                }
            })
            .collect()
    }

    /// The Bellman problem solved by the direct scheme at step `n`.
    pub fn direct_problem<'b>(
        &'b self,
        n: usize,
        u_next: &'b [f64],
        g: &'b [f64],
        cfg: &SchemeConfig,
    ) -> Result<ImpulseControlProblem<'b, DirectModel<'b, P>>, SchemeError> {
        let dt = self.problem.grid().dt(n);
        let model = DirectModel {
            d: self,
            u_next,
            g,
            dt,
        };
        let delta = cfg.delta.unwrap_or(1.0 / (cfg.d * dt));
        let base = ImpulseControlProblem::new(model, delta)?;
        if !cfg.restrict {
            return Ok(base);
        }
        let table = &self.table;
        let p = self.problem;
        Ok(base.restrict(move |i, c| match *c {
            ImpulseControl::Continue { .. } => true,
            ImpulseControl::Impulse { z } => p.allow_direct_impulse(i, table.z(i, z)),
        })?)
    }

    /// One direct control timestep from `t_{n+1}` to `t_n`.
    pub fn direct_step(
        &self,
        n: usize,
        u_next: &[f64],
        cfg: &SchemeConfig,
    ) -> Result<StepOutput, SchemeError> {
        let t = self.problem.grid().times()[n];
        let g = self.dirichlet_values(t);
        let bp = self.direct_problem(n, u_next, &g, cfg)?;
        let out = policy_iteration(&bp, u_next, &cfg.pi_config())
            .map_err(|e| SchemeError::from_pi(e, n, t))?;
        let mut stats = StepStats {
            policy_iterations: out.stats.iterations,
            linear_solves: out.stats.linear.len(),
            linear_iterations: out.stats.linear_iterations(),
            all_sdd_z: out.stats.all_sdd_z,
            ..Default::default()
        };
        if cfg.certify {
            let vmax = out.v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let tol = 10.0 * cfg.tol * bp.delta().max(1.0) * vmax.max(cfg.scale);
            let cert = verify_original(&bp, &out.v, tol);
            stats.certificate_residual = Some(cert.residual);
            stats.certificate_holds = Some(cert.holds);
        }
        let p = self.problem;
        let controls = out
            .policy
            .controls
            .iter()
            .enumerate()
            .map(|(i, c)| match *c {
                ImpulseControl::Continue { w } => NodeControl {
                    psi: 0,
                    w: Some(p.control_value(w)),
                    z: None,
                },
                ImpulseControl::Impulse { z } => NodeControl {
                    psi: 1,
                    w: None,
                    z: Some(self.table.z(i, z)),
                },
            })
            .collect();
        Ok(StepOutput {
            u: out.v,
            stats,
            controls,
        })
    }

    pub fn penalized_problem<'b>(
        &'b self,
        n: usize,
        u_next: &'b [f64],
        g: &'b [f64],
        cfg: &SchemeConfig,
    ) -> PenalizedStep<'b, P> {
        let dt = self.problem.grid().dt(n);
        PenalizedStep {
            d: self,
            u_next,
            g,
            dt,
            inv_eps: 1.0 / (cfg.d * dt),
        }
    }

    /// One penalized timestep from `t_{n+1}` to `t_n`.
    pub fn penalized_step(
        &self,
        n: usize,
        u_next: &[f64],
        cfg: &SchemeConfig,
    ) -> Result<StepOutput, SchemeError> {
        let t = self.problem.grid().times()[n];
        let g = self.dirichlet_values(t);
        let bp = self.penalized_problem(n, u_next, &g, cfg);
        let out = policy_iteration(&bp, u_next, &cfg.pi_config())
            .map_err(|e| SchemeError::from_pi(e, n, t))?;
        if cfg.assert_sdd && !out.stats.all_sdd_z {
            return Err(SchemeError::NotSdd { step: n });
        }
        let stats = StepStats {
            policy_iterations: out.stats.iterations,
            linear_solves: out.stats.linear.len(),
            linear_iterations: out.stats.linear_iterations(),
            all_sdd_z: out.stats.all_sdd_z,
            ..Default::default()
        };
        let p = self.problem;
        let controls = out
            .policy
            .controls
            .iter()
            .enumerate()
            .map(|(i, c)| NodeControl {
                psi: c.z.is_some() as u8,
                w: Some(p.control_value(c.w)),
                z: c.z.map(|k| self.table.z(i, k)),
            })
            .collect();
        Ok(StepOutput {
            u: out.v,
            stats,
            controls,
        })
    }

    /// Matrix `I + Phi (rho I - L_hat) dt` and forcing of the splitting.
    pub fn semi_lagrangian_operator(
        &self,
        dt: f64,
        cfg: &SchemeConfig,
    ) -> Result<SemiLagrangianOperator, SchemeError> {
        let p = self.problem;
        if p.diffusion_depends_on_control() {
            return Err(SchemeError::ControlDependentDiffusion);
        }
        let n = p.grid().len();
        let rho = p.rho();
        let mut builder = CsrBuilder::with_capacity(n, 5 * n);
        let mut forcing = vec![0.0; n];
        let mut row = RowBuf::new();
        for (i, f) in forcing.iter_mut().enumerate() {
            row.clear();
            if self.mask.phi(i) {
                let terms = p.split_generator(i, &mut row);
                row.scale(-dt);
                row.balance_diagonal(i, 1.0 + dt * (rho - terms.reaction));
                *f = terms.forcing;
            } else {
                row.push(i, 1.0);
            }
            builder.push_row(&mut row).expect("columns within range");
        }
        let a = builder.finish().expect("square by construction");
        let bands = if a.is_tridiagonal()
            && matches!(
                cfg.solver,
                LinearSolverKind::Auto | LinearSolverKind::Tridiagonal
            ) {
            tridiagonal_bands(&a)
        } else {
            None
        };
        let ilut = bands
            .is_none()
            .then(|| IlutPreconditioner::factor(&a, cfg.linear.ilut));
        Ok(SemiLagrangianOperator {
            a,
            bands,
            ilut,
            forcing,
            dt,
        })
    }

    /// One semi-Lagrangian timestep: explicit maximization, one solve.
    pub fn semi_lagrangian_step(
        &self,
        n: usize,
        u_next: &[f64],
        op: &SemiLagrangianOperator,
        cfg: &SchemeConfig,
    ) -> Result<StepOutput, SchemeError> {
        let p = self.problem;
        let grid = p.grid();
        let t = grid.times()[n];
        let dt = op.dt;
        let nodes = grid.len();
        let project = p.project_foot();
        let picks: Vec<Option<(f64, NodeControl)>> = (0..nodes)
            .into_par_iter()
            .with_min_len(512)
            .map(|i| {
                if !self.mask.phi(i) {
                    let g = p.dirichlet(t, i).unwrap_or(0.0);
                    return Some((
                        g,
                        NodeControl {
                            psi: 0,
                            w: None,
                            z: None,
                        },
                    ));
                }
                let x = grid.coords(i);
                let mut best: Option<(f64, NodeControl)> = None;
                for w in 0..p.num_controls() {
                    let c = p.controlled_drift(i, w);
                    let mut foot = [x[0] + c.drift[0] * dt, x[1] + c.drift[1] * dt];
                    if project {
                        for (k, f) in foot.iter_mut().enumerate().take(grid.dim()) {
                            *f = f.clamp(grid.axis(k).lo(), grid.axis(k).hi());
                        }
                    }
                    let Ok(ip) = interp_row(grid, &foot[..grid.dim()]) else {
                        continue;
                    };
                    let val = ip.apply(u_next) + c.forcing * dt;
                    if best.as_ref().map_or(true, |b| val > b.0) {
                        best = Some((
                            val,
                            NodeControl {
                                psi: 0,
                                w: Some(p.control_value(w)),
                                z: None,
                            },
                        ));
                    }
                }
                if let Some((k, val)) = self.table.best(i, u_next) {
                    if best.as_ref().map_or(true, |b| val > b.0) {
                        best = Some((
                            val,
                            NodeControl {
                                psi: 1,
                                w: None,
                                z: Some(self.table.z(i, k)),
                            },
                        ));
                    }
                }
                best.map(|(v, c)| (op.forcing[i] * dt + v, c))
            })
            .collect();
        let mut b = Vec::with_capacity(nodes);
        let mut controls = Vec::with_capacity(nodes);
        for (i, pick) in picks.into_iter().enumerate() {
            let (v, c) = pick.ok_or(SchemeError::NoControl { node: i })?;
            b.push(v);
            controls.push(c);
        }
        let (u, lin) = op
            .solve(&b, u_next, &cfg.linear)
            .map_err(|source| SchemeError::Linear { step: n, t, source })?;
        let stats = StepStats {
            policy_iterations: 0,
            linear_solves: 1,
            linear_iterations: lin.iterations,
            all_sdd_z: true,
            ..Default::default()
        };
        Ok(StepOutput { u, stats, controls })
    }
}

/// Continuation and impulse rows of one direct timestep.
pub struct DirectModel<'b, P: ?Sized> {
    d: &'b Discretization<'b, P>,
    u_next: &'b [f64],
    g: &'b [f64],
    dt: f64,
}

impl<'b, P: QviProblem + ?Sized> ImpulseModel for DirectModel<'b, P> {
    fn size(&self) -> usize {
        self.u_next.len()
    }

    fn num_continuation(&self, i: usize) -> usize {
        if self.d.mask.phi(i) {
            self.d.problem.num_controls()
        } else {
            1
        }
    }

    fn num_impulse(&self, i: usize) -> usize {
        self.d.table.count(i)
    }

    fn continuation_row(&self, i: usize, w: usize, row: &mut RowBuf) -> f64 {
        if !self.d.mask.phi(i) {
            return self.g[i];
        }
        let p = self.d.problem;
        let terms = p.generator(i, w, row);
        row.scale(self.dt);
        let sum: f64 = row.entries().iter().map(|e| e.1).sum();
        row.push(i, -sum + self.dt * (terms.reaction - p.rho()));
        self.u_next[i] + terms.forcing * self.dt
    }

    fn impulse_row(&self, i: usize, z: usize, row: &mut RowBuf) -> f64 {
        for (j, x) in self.d.table.weights(i, z) {
            row.push(j, x);
        }
        self.d.table.cost(i, z)
    }

    fn continuation_value(&self, i: usize, w: usize, v: &[f64], row: &mut RowBuf) -> f64 {
        if !self.d.mask.phi(i) {
            return self.g[i];
        }
        let p = self.d.problem;
        self.dt * (p.generator_apply(i, w, v, row) - p.rho() * v[i]) + self.u_next[i]
    }

    fn impulse_value(&self, i: usize, z: usize, v: &[f64], _row: &mut RowBuf) -> f64 {
        self.d.table.value(i, z, v)
    }

    fn best_continuation(&self, i: usize, v: &[f64], row: &mut RowBuf) -> Option<(usize, f64)> {
        if !self.d.mask.phi(i) {
            return None;
        }
        let p = self.d.problem;
        let (w, g) = p.best_generator(i, v, row)?;
        Some((w, self.dt * (g - p.rho() * v[i]) + self.u_next[i]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PenaltyControl {
    pub w: usize,
    pub z: Option<usize>,
}

/// Bellman problem of one penalized timestep.
pub struct PenalizedStep<'b, P: ?Sized> {
    d: &'b Discretization<'b, P>,
    u_next: &'b [f64],
    g: &'b [f64],
    dt: f64,
    inv_eps: f64,
}

impl<'b, P: QviProblem + ?Sized> PenalizedStep<'b, P> {
    fn num_w(&self, i: usize) -> usize {
        if self.d.mask.phi(i) {
            self.d.problem.num_controls()
        } else {
            1
        }
    }

    fn continuation_gain(&self, i: usize, w: usize, v: &[f64], row: &mut RowBuf) -> f64 {
        if !self.d.mask.phi(i) {
            return self.g[i] - v[i];
        }
        let p = self.d.problem;
        self.dt * (p.generator_apply(i, w, v, row) - p.rho() * v[i]) + self.u_next[i] - v[i]
    }
}

impl<'b, P: QviProblem + ?Sized> BellmanProblem for PenalizedStep<'b, P> {
    type Control = PenaltyControl;

    fn size(&self) -> usize {
        self.u_next.len()
    }

    fn controls(&self, i: usize, out: &mut Vec<PenaltyControl>) {
        let nw = self.num_w(i);
        for w in 0..nw {
            out.push(PenaltyControl { w, z: None });
        }
        for w in 0..nw {
            for z in 0..self.d.table.count(i) {
                out.push(PenaltyControl { w, z: Some(z) });
            }
        }
    }

    fn row(&self, i: usize, c: &PenaltyControl, row: &mut RowBuf) -> f64 {
        let mut b;
        let extra;
        if self.d.mask.phi(i) {
            let p = self.d.problem;
            let terms = p.generator(i, c.w, row);
            row.scale(-self.dt);
            extra = 1.0 + self.dt * (p.rho() - terms.reaction);
            b = self.u_next[i] + terms.forcing * self.dt;
        } else {
            extra = 1.0;
            b = self.g[i];
        }
        if let Some(z) = c.z {
            for (j, x) in self.d.table.weights(i, z) {
                if j != i {
                    row.push(j, -x * self.inv_eps);
                }
            }
            b += self.inv_eps * self.d.table.cost(i, z);
        }
        row.balance_diagonal(i, extra);
        b
    }

    fn row_value(&self, i: usize, c: &PenaltyControl, v: &[f64], row: &mut RowBuf) -> f64 {
        let mut s = self.continuation_gain(i, c.w, v, row);
        if let Some(z) = c.z {
            s += self.inv_eps * (self.d.table.value(i, z, v) - v[i]);
        }
        s
    }

    fn improve_row(
        &self,
        i: usize,
        v: &[f64],
        s: &mut RowScratch<PenaltyControl>,
    ) -> (PenaltyControl, f64) {
        let mut best_w = 0;
        let mut best = f64::NEG_INFINITY;
        let fast = if self.d.mask.phi(i) {
            self.d.problem.best_generator(i, v, &mut s.row)
        } else {
            None
        };
        if let Some((w, g)) = fast {
            best_w = w;
            best = self.dt * (g - self.d.problem.rho() * v[i]) + self.u_next[i] - v[i];
        } else {
            for w in 0..self.num_w(i) {
                let x = self.continuation_gain(i, w, v, &mut s.row);
                if x > best {
                    best = x;
                    best_w = w;
                }
            }
        }
        let mut z = None;
        if let Some((k, x)) = self.d.table.best(i, v) {
            let pen = self.inv_eps * (x - v[i]);
            if pen > 0.0 {
                z = Some(k);
                best += pen;
            }
        }
        (PenaltyControl { w: best_w, z }, best)
    }
}

/// Time-invariant linear system of the semi-Lagrangian scheme.
pub struct SemiLagrangianOperator {
    a: SparseMatrix,
    bands: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    ilut: Option<IlutPreconditioner>,
    forcing: Vec<f64>,
    dt: f64,
}

impl SemiLagrangianOperator {
    pub fn matrix(&self) -> &SparseMatrix {
        &self.a
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn solve(
        &self,
        b: &[f64],
        x0: &[f64],
        cfg: &BicgstabConfig,
    ) -> Result<(Vec<f64>, SolveStats), SolveError> {
        if let Some((lo, di, up)) = &self.bands {
            let x = solve_tridiagonal(lo, di, up, b)?;
            let (_, rel) = meets_criterion(&self.a, b, &x, cfg);
            return Ok((
                x,
                SolveStats {
                    iterations: 1,
                    final_relative_residual: rel,
                    breakdown: false,
                },
            ));
        }
        let (ok, rel) = meets_criterion(&self.a, b, x0, cfg);
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
        let m = self
            .ilut
            .as_ref()
            .expect("preconditioner for non-tridiagonal systems");
        solve_bicgstab(&self.a, b, x0, m, cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub t: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SchemeRun {
    pub scheme: Scheme,
    pub level: u32,
    pub h: f64,
    /// Value at the reporting point at `t = 0`.
    pub value: f64,
    pub u0: Vec<f64>,
    /// Kept surfaces in increasing time order.
    pub surfaces: Vec<Surface>,
    /// Controls selected in the last (t = 0) step.
    pub controls: Vec<NodeControl>,
    pub steps: Vec<StepStats>,
    pub wall_time: Duration,
}

impl SchemeRun {
    /// Mean policy iterations per timestep; `None` for the
    /// semi-Lagrangian scheme.
    pub fn avg_policy_iterations(&self) -> Option<f64> {
        if self.scheme == Scheme::SemiLagrangian || self.steps.is_empty() {
            return None;
        }
        Some(
            self.steps
                .iter()
                .map(|s| s.policy_iterations)
                .sum::<usize>() as f64
                / self.steps.len() as f64,
        )
    }

    /// Mean linear-solver iterations per linear solve.
    pub fn avg_linear_iterations(&self) -> f64 {
        let solves: usize = self.steps.iter().map(|s| s.linear_solves).sum();
        if solves == 0 {
            return 0.0;
        }
        self.steps
            .iter()
            .map(|s| s.linear_iterations)
            .sum::<usize>() as f64
            / solves as f64
    }

    pub fn total_policy_iterations(&self) -> usize {
        self.steps.iter().map(|s| s.policy_iterations).sum()
    }

    pub fn all_sdd_z(&self) -> bool {
        self.steps.iter().all(|s| s.all_sdd_z)
    }

    pub fn certificate_failures(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.certificate_holds == Some(false))
            .count()
    }

    pub fn max_certificate_residual(&self) -> Option<f64> {
        self.steps
            .iter()
            .filter_map(|s| s.certificate_residual)
            .reduce(f64::max)
    }
}

/// Backward time loop from the terminal data to `t = 0`.
pub fn run_scheme<P: QviProblem + ?Sized>(
    problem: &P,
    cfg: &SchemeConfig,
) -> Result<SchemeRun, SchemeError> {
    cfg.validate()?;
    let start = Instant::now();
    let grid = problem.grid();
    let n_steps = grid.steps();
    let disc = Discretization::new(problem);
    let keep = cfg.keep.selected(grid.times());
    let mut u: Vec<f64> = (0..grid.len()).map(|i| problem.terminal(i)).collect();
    let mut surfaces = Vec::new();
    if keep[n_steps] {
        surfaces.push(Surface {
            t: grid.times()[n_steps],
            values: u.clone(),
        });
    }
    let mut op: Option<SemiLagrangianOperator> = None;
    let mut steps = Vec::with_capacity(n_steps);
    let mut controls = Vec::new();
    for n in (0..n_steps).rev() {
        let out = match cfg.scheme {
            Scheme::Direct => disc.direct_step(n, &u, cfg)?,
            Scheme::Penalized => disc.penalized_step(n, &u, cfg)?,
            Scheme::SemiLagrangian => {
                let dt = grid.dt(n);
                if op.as_ref().map_or(true, |o| (o.dt - dt).abs() > 1e-14 * dt) {
                    op = Some(disc.semi_lagrangian_operator(dt, cfg)?);
                }
                disc.semi_lagrangian_step(n, &u, op.as_ref().expect("operator"), cfg)?
            }
        };
        u = out.u;
        steps.push(out.stats);
        if keep[n] {
            surfaces.push(Surface {
                t: grid.times()[n],
                values: u.clone(),
            });
        }
        if n == 0 {
            controls = out.controls;
        }
    }
    surfaces.reverse();
    steps.reverse();
    let rp = problem.report_point();
    let value = interp_row(grid, &rp[..grid.dim()])
        .map_err(|_| SchemeError::OffGrid)?
        .apply(&u);
    Ok(SchemeRun {
        scheme: cfg.scheme,
        level: grid.level(),
        h: grid.h(),
        value,
        u0: u,
        surfaces,
        controls,
        steps,
        wall_time: start.elapsed(),
    })
}

/// Writes `t,x1[,x2],value` rows for every kept surface.
pub fn write_surfaces<W: Write>(grid: &Grid, surfaces: &[Surface], out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if grid.dim() == 1 {
        w.write_record(["t", "x1", "value"])?;
    } else {
        w.write_record(["t", "x1", "x2", "value"])?;
    }
    for s in surfaces {
        for (i, v) in s.values.iter().enumerate() {
            let x = grid.coords(i);
            let mut rec = vec![s.t.to_string(), x[0].to_string()];
            if grid.dim() == 2 {
                rec.push(x[1].to_string());
            }
            rec.push(v.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()
}

/// Writes `x1[,x2],psi,w,z` rows; absent controls are left empty.
pub fn write_control_map<W: Write>(
    grid: &Grid,
    controls: &[NodeControl],
    out: W,
) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if grid.dim() == 1 {
        w.write_record(["x1", "psi", "w", "z"])?;
    } else {
        w.write_record(["x1", "x2", "psi", "w", "z"])?;
    }
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for (i, c) in controls.iter().enumerate() {
        let x = grid.coords(i);
        let mut rec = vec![x[0].to_string()];
        if grid.dim() == 2 {
            rec.push(x[1].to_string());
        }
        rec.push(c.psi.to_string());
        rec.push(opt(c.w));
        rec.push(opt(c.z));
        w.write_record(&rec)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{upwind_offdiagonals, Axis, AxisTerm};

    /// 1D problem on [0, 4] with optional constant drift/diffusion and a
    /// fixed-cost impulse to a target node.
    struct Line {
        grid: Grid,
        rho: f64,
        drift: f64,
        diffusion: f64,
        forcing: f64,
        jump: Option<(f64, f64)>,
        dirichlet_ends: bool,
    }

    impl Line {
        fn new(steps: usize) -> Self {
            Self {
                grid: Grid::new(vec![Axis::uniform(0.0, 4.0, 5).unwrap()], 1.0, steps, 0).unwrap(),
                rho: 0.0,
                drift: 0.0,
                diffusion: 0.0,
                forcing: 0.0,
                jump: None,
                dirichlet_ends: false,
            }
        }
    }

    impl QviProblem for Line {
        fn name(&self) -> &str {
            "line"
        }
        fn grid(&self) -> &Grid {
            &self.grid
        }
        fn rho(&self) -> f64 {
            self.rho
        }
        fn num_controls(&self) -> usize {
            2
        }
        fn control_value(&self, w: usize) -> f64 {
            w as f64
        }
        fn generator(&self, i: usize, w: usize, row: &mut RowBuf) -> RowTerms {
            let interior = i > 0 && i < 4;
            let term = AxisTerm {
                diffusion: if interior { self.diffusion } else { 0.0 },
                drift: if interior { self.drift * w as f64 } else { 0.0 },
            };
            upwind_offdiagonals(&self.grid, i, &[term], row);
            RowTerms {
                reaction: 0.0,
                forcing: self.forcing * w as f64,
            }
        }
        fn split_generator(&self, i: usize, row: &mut RowBuf) -> RowTerms {
            let interior = i > 0 && i < 4;
            let term = AxisTerm {
                diffusion: if interior { self.diffusion } else { 0.0 },
                drift: 0.0,
            };
            upwind_offdiagonals(&self.grid, i, &[term], row);
            RowTerms::default()
        }
        fn controlled_drift(&self, _i: usize, w: usize) -> ControlledDrift {
            ControlledDrift {
                drift: [self.drift * w as f64, 0.0],
                forcing: self.forcing * w as f64,
            }
        }
        fn impulses(&self, i: usize, out: &mut Vec<ImpulseTarget>) {
            if let Some((target, cost)) = self.jump {
                let x = self.grid.coords(i)[0];
                out.push(ImpulseTarget {
                    z: target - x,
                    target: [target, 0.0],
                    cost,
                });
                out.push(ImpulseTarget {
                    z: 10.0,
                    target: [x + 10.0, 0.0],
                    cost,
                });
            }
        }
        fn dirichlet(&self, t: f64, i: usize) -> Option<f64> {
            (self.dirichlet_ends && (i == 0 || i == 4)).then_some(7.0 + t)
        }
        fn terminal(&self, i: usize) -> f64 {
            self.grid.coords(i)[0]
        }
        fn allow_direct_impulse(&self, i: usize, z: f64) -> bool {
            // No self-jumps.
            self.grid.coords(i)[0] + z != self.grid.coords(i)[0]
        }
        fn report_point(&self) -> [f64; 2] {
            [1.5, 0.0]
        }
    }

    #[test]
    fn identity_timestep_for_all_schemes() {
        let p = Line::new(1);
        for scheme in Scheme::ALL {
            let run = run_scheme(&p, &SchemeConfig::new(scheme)).unwrap();
            assert_eq!(run.u0, vec![0.0, 1.0, 2.0, 3.0, 4.0], "{scheme}");
            assert!((run.value - 1.5).abs() < 1e-14);
        }
    }

    #[test]
    fn off_grid_impulses_are_dropped() {
        let mut p = Line::new(1);
        p.jump = Some((4.0, -0.5));
        let t = ImpulseTable::build(&p);
        assert_eq!(t.len(), 5);
        assert_eq!(t.count(0), 1);
        assert_eq!(t.weights(0, 0).collect::<Vec<_>>(), vec![(4, 1.0)]);
    }

    #[test]
    fn impulse_to_best_node() {
        let mut p = Line::new(1);
        p.jump = Some((4.0, -0.5));
        let expect = [3.5, 3.5, 3.5, 3.5, 4.0];
        for scheme in Scheme::ALL {
            let run = run_scheme(&p, &SchemeConfig::new(scheme)).unwrap();
            for (a, b) in run.u0.iter().zip(expect) {
                let tol = if scheme == Scheme::Penalized {
                    5e-2
                } else {
                    1e-12
                };
                assert!((a - b).abs() < tol, "{scheme}: {:?}", run.u0);
            }
            assert_eq!(run.controls[0].psi, 1);
            assert_eq!(run.controls[4].psi, 0);
        }
    }

    #[test]
    fn self_jump_without_restriction_is_singular() {
        let mut p = Line::new(1);
        p.jump = Some((4.0, 0.0));
        p.rho = 0.1;
        let mut cfg = SchemeConfig::new(Scheme::Direct);
        cfg.restrict = false;
        // Discounting makes the free self-jump at node 4 beat continuing.
        let err = run_scheme(&p, &cfg).unwrap_err();
        assert!(matches!(err, SchemeError::Singular { .. }), "{err}");
        cfg.restrict = true;
        assert!(run_scheme(&p, &cfg).is_ok());
        assert!(run_scheme(&p, &SchemeConfig::new(Scheme::Penalized)).is_ok());
    }

    #[test]
    fn penalized_without_impulses_matches_direct() {
        let mut p = Line::new(4);
        p.rho = 0.3;
        p.drift = 1.0;
        p.diffusion = 0.5;
        p.forcing = 0.2;
        let d = run_scheme(&p, &SchemeConfig::new(Scheme::Direct)).unwrap();
        let q = run_scheme(&p, &SchemeConfig::new(Scheme::Penalized)).unwrap();
        for (a, b) in d.u0.iter().zip(&q.u0) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(q.all_sdd_z());
    }

    #[test]
    fn dirichlet_rows_take_boundary_data() {
        let mut p = Line::new(2);
        p.dirichlet_ends = true;
        p.diffusion = 1.0;
        let mask = BoundaryMask::from_problem(&p);
        assert_eq!(mask.dirichlet_nodes(), vec![0, 4]);
        for scheme in Scheme::ALL {
            let run = run_scheme(&p, &SchemeConfig::new(scheme)).unwrap();
            assert_eq!(run.u0[0], 7.0, "{scheme}");
            assert_eq!(run.u0[4], 7.0, "{scheme}");
        }
    }

    #[test]
    fn single_step_equals_step_operation() {
        let mut p = Line::new(1);
        p.drift = 1.0;
        p.forcing = 1.0;
        p.rho = 0.1;
        p.jump = Some((2.0, -0.3));
        let cfg = SchemeConfig::new(Scheme::Direct);
        let run = run_scheme(&p, &cfg).unwrap();
        let disc = Discretization::new(&p);
        let u1: Vec<f64> = (0..5).map(|i| p.terminal(i)).collect();
        let step = disc.direct_step(0, &u1, &cfg).unwrap();
        assert_eq!(run.u0, step.u);
        assert_eq!(run.steps.len(), 1);
    }

    #[test]
    fn semi_lagrangian_rejects_control_dependent_diffusion() {
        struct Bad(Line);
        impl QviProblem for Bad {
            fn name(&self) -> &str {
                "bad"
            }
            fn grid(&self) -> &Grid {
                self.0.grid()
            }
            fn rho(&self) -> f64 {
                0.0
            }
            fn num_controls(&self) -> usize {
                1
            }
            fn control_value(&self, _: usize) -> f64 {
                0.0
            }
            fn generator(&self, i: usize, w: usize, row: &mut RowBuf) -> RowTerms {
                self.0.generator(i, w, row)
            }
            fn split_generator(&self, i: usize, row: &mut RowBuf) -> RowTerms {
                self.0.split_generator(i, row)
            }
            fn controlled_drift(&self, i: usize, w: usize) -> ControlledDrift {
                self.0.controlled_drift(i, w)
            }
            fn diffusion_depends_on_control(&self) -> bool {
                true
            }
            fn impulses(&self, _: usize, _: &mut Vec<ImpulseTarget>) {}
            fn terminal(&self, i: usize) -> f64 {
                self.0.terminal(i)
            }
            fn report_point(&self) -> [f64; 2] {
                [0.0, 0.0]
            }
        }
        let err = run_scheme(
            &Bad(Line::new(1)),
            &SchemeConfig::new(Scheme::SemiLagrangian),
        )
        .unwrap_err();
        assert!(matches!(err, SchemeError::ControlDependentDiffusion));
    }

    #[test]
    fn keep_times_selection() {
        let times = [0.0, 0.25, 0.5, 0.75, 1.0];
        assert_eq!(
            KeepTimes::Ends.selected(&times),
            vec![true, false, false, false, true]
        );
        assert_eq!(
            "every:2".parse::<KeepTimes>().unwrap().selected(&times),
            vec![true, false, true, false, true]
        );
        assert_eq!(
            "0.3".parse::<KeepTimes>().unwrap().selected(&times),
            vec![false, true, false, false, false]
        );
        assert!("every:0".parse::<KeepTimes>().is_err());
    }

    #[test]
    fn surface_csv_layout() {
        let p = Line::new(1);
        let run = run_scheme(&p, &SchemeConfig::new(Scheme::Direct)).unwrap();
        let mut buf = Vec::new();
        write_surfaces(&p.grid, &run.surfaces, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x1,value\n0,0,0\n"));
        assert_eq!(text.lines().count(), 11);
        let mut buf = Vec::new();
        write_control_map(&p.grid, &run.controls, &mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("x1,psi,w,z\n0,0,0,\n"));
    }

    #[test]
    fn certificate_holds_on_restricted_solution() {
        let mut p = Line::new(3);
        p.jump = Some((4.0, -0.5));
        p.drift = -1.0;
        p.forcing = 0.1;
        let mut cfg = SchemeConfig::new(Scheme::Direct);
        cfg.certify = true;
        let run = run_scheme(&p, &cfg).unwrap();
        assert_eq!(run.certificate_failures(), 0);
        assert!(run.max_certificate_residual().unwrap() < 1e-8);
    }
}
