//! Python bindings: matrix classification, Markov chain solves and the
//! benchmark schemes.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ::hjbqvi::bellman::{policy_iteration, PiConfig};
use ::hjbqvi::checks;
use ::hjbqvi::impulse::verify_original;
use ::hjbqvi::matrix::{is_wcdd as wcdd, monotonicity_oracle, SparseMatrix};
use ::hjbqvi::mdp::{build_mdp, MdpSpec};
use ::hjbqvi::problems::{build_problem, ProblemKind};
use ::hjbqvi::report;
use ::hjbqvi::schemes::{self, Scheme, SchemeConfig};

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl ToString) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<SparseMatrix> {
    SparseMatrix::from_dense(&rows).map_err(value_err)
}

/// Returns `(is_wcdd, rows_without_path_to_an_sdd_row)`.
#[pyfunction]
fn is_wcdd(rows: Vec<Vec<f64>>) -> PyResult<(bool, Vec<usize>)> {
    let r = wcdd(&matrix(rows)?);
    Ok((r.is_wcdd, r.non_reaching_rows))
}

/// True when the matrix is nonsingular with a nonnegative inverse.
#[pyfunction]
fn is_monotone(rows: Vec<Vec<f64>>) -> PyResult<bool> {
    Ok(monotonicity_oracle(&matrix(rows)?)
        .map_err(value_err)?
        .is_monotone())
}

/// Solves a Markov chain given in the text format. Returns
/// `(values, psi, iterations, certificate_holds)`.
#[pyfunction]
fn solve_mdp(text: &str) -> PyResult<(Vec<f64>, Vec<u32>, usize, bool)> {
    let spec = MdpSpec::parse(text).map_err(value_err)?;
    let n = spec.size();
    let p = build_mdp(spec).map_err(value_err)?;
    let out = policy_iteration(&p, &vec![0.0; n], &PiConfig::default()).map_err(runtime_err)?;
    let cert = verify_original(&p, &out.v, 1e-9);
    let psi = out
        .policy
        .controls
        .iter()
        .map(|c| u32::from(c.psi()))
        .collect();
    Ok((out.v, psi, out.stats.iterations, cert.holds))
}

#[pyclass(name = "SchemeRun", frozen)]
struct PySchemeRun {
    #[pyo3(get)]
    problem: String,
    #[pyo3(get)]
    scheme: String,
    #[pyo3(get)]
    level: u32,
    #[pyo3(get)]
    value: f64,
    #[pyo3(get)]
    avg_policy_iterations: Option<f64>,
    #[pyo3(get)]
    avg_linear_iterations: f64,
    #[pyo3(get)]
    all_sdd: bool,
    #[pyo3(get)]
    wall_time: f64,
    #[pyo3(get)]
    coords: Vec<(f64, f64)>,
    #[pyo3(get)]
    u0: Vec<f64>,
    #[pyo3(get)]
    psi: Vec<u32>,
}

#[pymethods]
impl PySchemeRun {
    fn __repr__(&self) -> String {
        format!(
            "SchemeRun({}, {}, h={}, value={:.8})",
            self.problem,
            self.scheme,
            report::h_label(self.level),
            self.value
        )
    }
}

fn parse_kind(problem: &str) -> PyResult<ProblemKind> {
    problem.parse().map_err(value_err)
}

fn config(scheme: &str, tol: f64, d: f64, delta: Option<f64>) -> PyResult<SchemeConfig> {
    let scheme: Scheme = scheme.parse().map_err(value_err)?;
    Ok(SchemeConfig {
        tol,
        d,
        delta,
        ..SchemeConfig::new(scheme)
    })
}

/// Runs one problem at one refinement level.
#[pyfunction]
#[pyo3(signature = (problem, scheme, level=0, params=None, tol=1e-6, d=1e-2, delta=None))]
fn run(
    problem: &str,
    scheme: &str,
    level: u32,
    params: Option<&str>,
    tol: f64,
    d: f64,
    delta: Option<f64>,
) -> PyResult<PySchemeRun> {
    let kind = parse_kind(problem)?;
    let cfg = config(scheme, tol, d, delta)?;
    let p = build_problem(kind, level, params).map_err(value_err)?;
    let r = schemes::run_scheme(p.as_ref(), &cfg).map_err(runtime_err)?;
    let grid = p.grid();
    Ok(PySchemeRun {
        problem: kind.name().to_string(),
        scheme: cfg.scheme.name().to_string(),
        level,
        value: r.value,
        avg_policy_iterations: r.avg_policy_iterations(),
        avg_linear_iterations: r.avg_linear_iterations(),
        all_sdd: r.all_sdd_z(),
        wall_time: r.wall_time.as_secs_f64(),
        coords: (0..grid.len())
            .map(|i| grid.coords(i))
            .map(|c| (c[0], c[1]))
            .collect(),
        psi: r.controls.iter().map(|c| u32::from(c.psi)).collect(),
        u0: r.u0,
    })
}

/// Convergence table as a list of
/// `(h, value, avg_policy_its, avg_linear_its, ratio)` tuples.
#[pyfunction]
#[pyo3(signature = (problem, scheme, levels, params=None))]
fn convergence(
    problem: &str,
    scheme: &str,
    levels: u32,
    params: Option<&str>,
) -> PyResult<Vec<(String, f64, Option<f64>, f64, Option<f64>)>> {
    let kind = parse_kind(problem)?;
    let cfg = config(scheme, 1e-6, 1e-2, None)?;
    let lv: Vec<u32> = (0..levels).collect();
    let runs = report::run_levels(kind, &lv, &cfg, params, false).map_err(runtime_err)?;
    Ok(report::convergence_table(&runs, None)
        .into_iter()
        .map(|r| (r.h, r.value, r.avg_policy_its, r.avg_linear_its, r.ratio))
        .collect())
}

/// Runs a property suite. Returns `(passed, summary)`.
#[pyfunction]
#[pyo3(signature = (suite, seed=1, cases=100))]
fn check(suite: &str, seed: u64, cases: usize) -> PyResult<(bool, String)> {
    let r = match suite {
        "wcdd" => checks::check_wcdd(seed, cases),
        "bellman" => checks::check_bellman(seed, cases),
        "epsilon-pi" => checks::check_epsilon_pi(seed, cases),
        "impulse" => checks::check_impulse(seed, cases),
        "schemes" => checks::check_schemes(seed, cases),
        _ => return Err(value_err(format!("unknown suite '{suite}'"))),
    };
    Ok((r.passed(), r.summary()))
}

#[pymodule]
fn hjbqvi(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchemeRun>()?;
    m.add_function(wrap_pyfunction!(is_wcdd, m)?)?;
    m.add_function(wrap_pyfunction!(is_monotone, m)?)?;
    m.add_function(wrap_pyfunction!(solve_mdp, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(convergence, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    Ok(())
}
