use hjbqvi::impulse::{check_h3, check_subidempotence};
use hjbqvi::problems::{build_problem, ProblemKind};
use hjbqvi::schemes::{run_scheme, Discretization, KeepTimes, Scheme, SchemeConfig};

fn run(kind: ProblemKind, level: u32, cfg: SchemeConfig) -> hjbqvi::schemes::SchemeRun {
    let p = build_problem(kind, level, None).unwrap();
    run_scheme(p.as_ref(), &cfg).unwrap()
}

#[test]
fn fex_slices_are_nonincreasing_in_x() {
    for scheme in Scheme::ALL {
        let r = run(
            ProblemKind::Fex,
            1,
            SchemeConfig {
                keep: KeepTimes::All,
                ..SchemeConfig::new(scheme)
            },
        );
        assert_eq!(r.surfaces.len(), 33);
        for s in &r.surfaces {
            for w in s.values.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{scheme} at t = {}", s.t);
            }
        }
    }
}

#[test]
fn fex_terminal_slice_is_zero() {
    let r = run(ProblemKind::Fex, 0, SchemeConfig::new(Scheme::Direct));
    assert!(r.surfaces.last().unwrap().values.iter().all(|&v| v == 0.0));
}

#[test]
fn gmwb_restricted_direct_solution_certifies_every_step() {
    let cfg = SchemeConfig {
        certify: true,
        ..SchemeConfig::new(Scheme::Direct)
    };
    let r = run(ProblemKind::Gmwb, 0, cfg);
    assert_eq!(
        r.certificate_failures(),
        0,
        "max residual {:?}",
        r.max_certificate_residual()
    );
    assert_eq!(r.steps.len(), 32);
    assert!(r.steps.iter().all(|s| s.certificate_holds == Some(true)));
}

#[test]
fn gmwb_impulse_operator_is_strictly_subidempotent() {
    let p = build_problem(ProblemKind::Gmwb, 0, None).unwrap();
    let d = Discretization::new(p.as_ref());
    let u: Vec<f64> = (0..p.grid().len()).map(|i| p.terminal(i)).collect();
    let g = vec![0.0; u.len()];
    let bp = d
        .direct_problem(p.grid().steps() - 1, &u, &g, &SchemeConfig::default())
        .unwrap();
    let rep = check_subidempotence(bp.model(), &u, 3);
    assert!(
        rep.all_found(),
        "no witness at {:?}",
        &rep.failures()[..rep.failures().len().min(5)]
    );
    assert!(rep.max_m().unwrap() <= 2);
}

#[test]
fn direct_models_satisfy_the_structural_assumption() {
    for kind in ProblemKind::ALL {
        let p = build_problem(kind, 0, None).unwrap();
        let d = Discretization::new(p.as_ref());
        let u: Vec<f64> = (0..p.grid().len()).map(|i| p.terminal(i)).collect();
        let g = vec![0.0; u.len()];
        let bp = d
            .direct_problem(0, &u, &g, &SchemeConfig::default())
            .unwrap();
        let v = check_h3(bp.model());
        assert!(v.is_empty(), "{kind}: {:?}", &v[..v.len().min(3)]);
    }
}

#[test]
fn consumption_direct_needs_no_restriction() {
    let cfg = SchemeConfig {
        restrict: false,
        ..SchemeConfig::new(Scheme::Direct)
    };
    let free = run(ProblemKind::Consumption, 0, cfg);
    let restricted = run(
        ProblemKind::Consumption,
        0,
        SchemeConfig::new(Scheme::Direct),
    );
    assert_eq!(free.value, restricted.value);
}

#[test]
fn consumption_impulses_lower_total_wealth() {
    let p = build_problem(ProblemKind::Consumption, 1, None).unwrap();
    let mut out = Vec::new();
    for i in 0..p.grid().len() {
        out.clear();
        p.impulses(i, &mut out);
        let [s, b] = p.grid().coords(i);
        for t in &out {
            assert!(t.target[0] + t.target[1] < s + b, "node {i}");
        }
    }
}

#[test]
fn penalized_and_direct_agree_on_every_problem() {
    for kind in ProblemKind::ALL {
        let d = run(kind, 0, SchemeConfig::new(Scheme::Direct)).value;
        let p = run(kind, 0, SchemeConfig::new(Scheme::Penalized)).value;
        assert!(((d - p) / d).abs() < 2e-3, "{kind}: {d} vs {p}");
    }
}

#[test]
fn semi_lagrangian_solves_once_per_step() {
    for kind in ProblemKind::ALL {
        let r = run(kind, 0, SchemeConfig::new(Scheme::SemiLagrangian));
        assert!(r.avg_policy_iterations().is_none());
        assert!(r
            .steps
            .iter()
            .all(|s| s.linear_solves == 1 && s.policy_iterations == 0));
    }
}

#[test]
fn bad_overrides_are_rejected() {
    assert!(build_problem(ProblemKind::Gmwb, 0, Some("eta = 0.2")).is_err());
    assert!(build_problem(ProblemKind::Fex, 0, Some("C = 0")).is_err());
    assert!(build_problem(ProblemKind::Consumption, 6, None).is_err());
    let p = build_problem(ProblemKind::Gmwb, 0, Some("eta = 0.03126")).unwrap();
    assert_eq!(p.rho(), 0.05);
}
