//! Randomized property suites shared by the command line and the tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bellman::{
    brute_force_bellman, epsilon_policy_iteration, geometric_eps, policy_iteration, ApproxArgmax,
    BellmanProblem, PiConfig,
};
use crate::grid::interp_row;
use crate::impulse::{check_h3, verify_original, ImpulseModel};
use crate::matrix::{is_wcdd, monotonicity_oracle, SparseMatrix};
use crate::mdp::{build_mdp, example_failure, example_modified, MdpSpec, MdpState, Transition};
use crate::problems::{build_problem, ProblemKind};
use crate::schemes::{run_scheme, Discretization, Scheme, SchemeConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub failures: Vec<String>,
}

impl CheckReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            cases: 0,
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn fail(&mut self, msg: String) {
        self.failures.push(msg);
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {} cases, {} failures{}",
            self.name,
            self.cases,
            self.failures.len(),
            self.failures
                .first()
                .map(|f| format!(" (first: {f})"))
                .unwrap_or_default()
        )
    }
}

/// A WDD Z-matrix with positive diagonal and quarter-integer entries, so
/// zero row slack is exact. Mixes nonsingular and singular cases.
pub fn random_wdd_z_matrix(rng: &mut impl Rng, n: usize) -> SparseMatrix {
    let density = rng.gen_range(0.2..0.9);
    let strict_prob = rng.gen_range(0.0..0.5);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::new();
        let mut sum = 0.0;
        for j in 0..n {
            if j != i && rng.gen_bool(density) {
                let a = rng.gen_range(1..=8) as f64 / 4.0;
                row.push((j, -a));
                sum += a;
            }
        }
        let extra = if sum == 0.0 || rng.gen_bool(strict_prob) {
            rng.gen_range(1..=4) as f64 / 4.0
        } else {
            0.0
        };
        row.push((i, sum + extra));
        rows.push(row);
    }
    SparseMatrix::from_rows(rows).expect("valid rows")
}

/// `is_wcdd` against the dense monotonicity oracle.
pub fn check_wcdd(seed: u64, cases: usize) -> CheckReport {
    let mut rep = CheckReport::new("wcdd");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.gen_range(1..=8);
        let a = random_wdd_z_matrix(&mut rng, n);
        let fast = is_wcdd(&a).is_wcdd;
        let oracle = monotonicity_oracle(&a).expect("small").is_monotone();
        rep.cases += 1;
        if fast != oracle {
            rep.fail(format!(
                "case {case}: is_wcdd={fast}, oracle={oracle}\n{}",
                a.dump_triplets()
            ));
        }
    }
    // Monotone but not WCDD.
    let ce = SparseMatrix::from_dense(&[vec![1.0, -2.0], vec![0.0, 1.0]]).expect("2x2");
    rep.cases += 1;
    if is_wcdd(&ce).is_wcdd || !monotonicity_oracle(&ce).expect("small").is_monotone() {
        rep.fail("counterexample [[1,-2],[0,1]] misclassified".into());
    }
    rep
}

fn random_row(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut p: Vec<f64> = (0..n)
        .map(|_| {
            if rng.gen_bool(0.6) {
                rng.gen_range(0.05..1.0)
            } else {
                0.0
            }
        })
        .collect();
    if p.iter().all(|&x| x == 0.0) {
        p[rng.gen_range(0..n)] = 1.0;
    }
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// Contractive MDP with continuation always available and cost-bearing
/// impulses only towards lower-index states.
pub fn random_mdp(rng: &mut impl Rng, n: usize, max_controls: usize, rho: f64) -> MdpSpec {
    let states = (0..n)
        .map(|i| {
            let total = rng.gen_range(1..=max_controls);
            let nz = if i > 0 { rng.gen_range(0..total) } else { 0 };
            let w = (0..total - nz)
                .map(|_| Transition {
                    probs: random_row(rng, n),
                    cost: rng.gen_range(-1.0..1.0),
                })
                .collect();
            let z = (0..nz)
                .map(|_| {
                    let mut probs = vec![0.0; n];
                    probs[rng.gen_range(0..i)] = 1.0;
                    Transition {
                        probs,
                        cost: -rng.gen_range(0.05..1.0),
                    }
                })
                .collect::<Vec<_>>();
            MdpState {
                w,
                allow_continue: true,
                allow_impulse: !z.is_empty(),
                z,
            }
        })
        .collect();
    MdpSpec { rho, states }
}

fn policy_count<P: BellmanProblem>(p: &P) -> usize {
    let mut buf = Vec::new();
    (0..p.size())
        .map(|i| {
            buf.clear();
            p.controls(i, &mut buf);
            buf.len()
        })
        .product()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Policy iteration against brute force on random MDPs.
pub fn check_bellman(seed: u64, cases: usize) -> CheckReport {
    let mut rep = CheckReport::new("bellman");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.gen_range(1..=5);
        let rho = rng.gen_range(0.05..=1.0);
        let spec = random_mdp(&mut rng, n, 4, rho);
        let p = build_mdp(spec.clone()).expect("valid");
        rep.cases += 1;
        let exact = match brute_force_bellman(&p) {
            Ok(v) => v,
            Err(e) => {
                rep.fail(format!(
                    "case {case}: brute force failed: {e}\n{}",
                    spec.to_text()
                ));
                continue;
            }
        };
        let cfg = PiConfig {
            record_iterates: true,
            ..PiConfig::default()
        };
        let v0 = vec![0.0; n];
        let out = match policy_iteration(&p, &v0, &cfg) {
            Ok(o) => o,
            Err(e) => {
                rep.fail(format!("case {case}: policy iteration failed: {e}"));
                continue;
            }
        };
        let d = max_diff(&out.v, &exact);
        if d > 1e-7 {
            rep.fail(format!(
                "case {case}: distance {d:e} to brute force\n{}",
                spec.to_text()
            ));
        }
        for (l, pair) in out.stats.iterates.windows(2).enumerate() {
            if pair[1].iter().zip(&pair[0]).any(|(b, a)| *b < a - 1e-9) {
                rep.fail(format!("case {case}: iterate {} decreased", l + 2));
            }
        }
        let bound = policy_count(&p);
        if out.stats.iterations > bound {
            rep.fail(format!(
                "case {case}: {} evaluations exceed {bound} policies",
                out.stats.iterations
            ));
        }
    }
    rep
}

/// Epsilon policy iteration with randomized near-argmax selection.
pub fn check_epsilon_pi(seed: u64, cases: usize) -> CheckReport {
    let mut rep = CheckReport::new("epsilon-pi");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.gen_range(1..=5);
        let rho = rng.gen_range(0.05..=1.0);
        let p = build_mdp(random_mdp(&mut rng, n, 4, rho)).expect("valid");
        rep.cases += 1;
        let exact = brute_force_bellman(&p).expect("contractive");
        let eps = geometric_eps(1e-3);
        let cfg = PiConfig {
            tol: 1e-12,
            ..PiConfig::default()
        };
        match epsilon_policy_iteration(
            &p,
            &vec![0.0; n],
            &eps,
            ApproxArgmax::Seeded(seed ^ case as u64),
            &cfg,
        ) {
            Ok(out) => {
                let d = max_diff(&out.v, &exact);
                if d > 1e-6 {
                    rep.fail(format!("case {case}: distance {d:e}"));
                }
            }
            Err(e) => rep.fail(format!("case {case}: {e}")),
        }
    }
    rep
}

/// Failure and rescue examples, plus structural checks on random MDPs.
pub fn check_impulse(seed: u64, cases: usize) -> CheckReport {
    let mut rep = CheckReport::new("impulse");
    let m = 6;
    rep.cases += 1;
    let failing = build_mdp(example_failure(m)).expect("valid");
    match policy_iteration(&failing, &vec![0.0; m], &PiConfig::default()) {
        Err(crate::bellman::PiError::SingularMatrix {
            iteration: 1,
            diagnostic,
            ..
        }) if !diagnostic.zero_rows.is_empty() => {}
        other => rep.fail(format!(
            "failure example: expected singular matrix at iteration 1, got {other:?}"
        )),
    }
    rep.cases += 1;
    let modified = example_modified(m);
    match policy_iteration(&modified, &vec![0.0; m], &PiConfig::default()) {
        Ok(out) => {
            if !verify_original(&modified, &out.v, 1e-9).holds {
                rep.fail("modified example: certificate does not hold".into());
            }
            if out.v.windows(2).any(|w| w[1] > w[0] + 1e-12) {
                rep.fail(format!(
                    "modified example: solution not nonincreasing: {:?}",
                    out.v
                ));
            }
        }
        Err(e) => rep.fail(format!("modified example: {e}")),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.gen_range(2..=5);
        let rho = rng.gen_range(0.05..=1.0);
        let p = build_mdp(random_mdp(&mut rng, n, 4, rho)).expect("valid");
        rep.cases += 1;
        if !check_h3(p.model()).is_empty() {
            rep.fail(format!("case {case}: structural assumption violated"));
        }
        let a = policy_iteration(&p, &vec![0.0; n], &PiConfig::default());
        let scaled = p.delta_rescale(rng.gen_range(0.1..10.0)).expect("positive");
        let b = policy_iteration(&scaled, &vec![0.0; n], &PiConfig::default());
        match (a, b) {
            (Ok(a), Ok(b)) => {
                let d = max_diff(&a.v, &b.v);
                if d > 1e-9 {
                    rep.fail(format!("case {case}: delta changed the solution by {d:e}"));
                }
            }
            (a, b) => rep.fail(format!("case {case}: {:?} / {:?}", a.err(), b.err())),
        }
    }
    rep
}

/// Monotonicity of the assembled scheme rows for every problem at
/// `h = 1`, and interpolation properties at random points.
pub fn check_schemes(seed: u64, cases: usize) -> CheckReport {
    let mut rep = CheckReport::new("schemes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for kind in ProblemKind::ALL {
        let p = build_problem(kind, 0, None).expect("defaults are valid");
        let grid = p.grid();
        let disc = Discretization::new(p.as_ref());
        let u: Vec<f64> = (0..grid.len()).map(|i| p.terminal(i)).collect();
        let g = vec![0.0; u.len()];
        let cfg = SchemeConfig::default();
        let bp = disc
            .direct_problem(0, &u, &g, &cfg)
            .expect("restriction feasible");
        let model = bp.model();
        let mut row = crate::matrix::RowBuf::new();
        for _ in 0..cases.max(1) {
            let i = rng.gen_range(0..grid.len());
            rep.cases += 1;
            for w in 0..model.num_continuation(i) {
                row.clear();
                model.continuation_row(i, w, &mut row);
                let bad = row.entries().iter().any(|&(j, a)| j != i && a < 0.0);
                let diag: f64 = row.entries().iter().filter(|e| e.0 == i).map(|e| e.1).sum();
                let off: f64 = row.entries().iter().filter(|e| e.0 != i).map(|e| e.1).sum();
                if bad || diag + off > 1e-12 {
                    rep.fail(format!(
                        "{kind}: continuation row {i} (w {w}) is not monotone"
                    ));
                }
            }
            for z in 0..model.num_impulse(i) {
                row.clear();
                model.impulse_row(i, z, &mut row);
                let sum: f64 = row.entries().iter().map(|e| e.1).sum();
                if (sum - 1.0).abs() > 1e-12 || row.entries().iter().any(|e| e.1 < 0.0) {
                    rep.fail(format!("{kind}: impulse row {i} (z {z}) is not stochastic"));
                }
            }
            // Interpolation reproduces affine functions.
            let lo = [
                grid.axis(0).lo(),
                if grid.dim() == 2 {
                    grid.axis(1).lo()
                } else {
                    0.0
                },
            ];
            let hi = [
                grid.axis(0).hi(),
                if grid.dim() == 2 {
                    grid.axis(1).hi()
                } else {
                    0.0
                },
            ];
            let x = [
                rng.gen_range(lo[0]..=hi[0]),
                if grid.dim() == 2 {
                    rng.gen_range(lo[1]..=hi[1])
                } else {
                    0.0
                },
            ];
            let ip = interp_row(grid, &x[..grid.dim()]).expect("inside");
            let f: Vec<f64> = (0..grid.len())
                .map(|k| 2.0 * grid.coords(k)[0] - 3.0 * grid.coords(k)[1] + 1.0)
                .collect();
            let wsum: f64 = ip.entries().map(|e| e.1).sum();
            if (ip.apply(&f) - (2.0 * x[0] - 3.0 * x[1] + 1.0)).abs()
                > 1e-9 * (1.0 + x[0].abs() + x[1].abs())
                || (wsum - 1.0).abs() > 1e-12
            {
                rep.fail(format!(
                    "{kind}: interpolation at {x:?} is not exact on affine functions"
                ));
            }
        }
    }
    // Penalized iterates on the cheapest problem are always SDD.
    rep.cases += 1;
    let fex = build_problem(ProblemKind::Fex, 0, None).expect("valid");
    match run_scheme(fex.as_ref(), &SchemeConfig::new(Scheme::Penalized)) {
        Ok(run) if run.all_sdd_z() => {}
        Ok(_) => rep.fail("fex penalized: non-SDD iterate".into()),
        Err(e) => rep.fail(format!("fex penalized: {e}")),
    }
    rep
}
