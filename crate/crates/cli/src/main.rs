use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hjbqvi::bellman::{assemble_policy, policy_iteration, PiConfig, PiError};
use hjbqvi::checks::{
    check_bellman, check_epsilon_pi, check_impulse, check_schemes, check_wcdd, CheckReport,
};
use hjbqvi::impulse::{verify_original, ImpulseControl, ImpulseControlProblem};
use hjbqvi::matrix::is_wcdd;
use hjbqvi::mdp::{
    build_mdp, example_chain, example_failure, example_modified, example_one_hop, MdpModel,
};
use hjbqvi::problems::{build_problem, ProblemError, ProblemKind};
use hjbqvi::report::{convergence_table, format_table, run_levels, write_csv, StudyError};
use hjbqvi::schemes::{
    run_scheme, write_control_map, write_surfaces, KeepTimes, Scheme, SchemeConfig, SchemeError,
};

const EXIT_USAGE: u8 = 2;
const EXIT_PROPERTY: u8 = 3;
const EXIT_SOLVER: u8 = 4;
const EXIT_BAD_LEVEL: u8 = 5;
const EXIT_INFEASIBLE: u8 = 6;
const EXIT_IO: u8 = 1;

#[derive(Parser)]
#[command(
    name = "hjbqvi",
    version,
    about = "Monotone schemes for HJB quasi-variational inequalities"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs a refinement study and prints the convergence table.
    Convergence(ConvergenceArgs),
    /// Writes the value surface and the control map at t = 0.
    Surface(SurfaceArgs),
    /// Runs a randomized property suite.
    Check(CheckArgs),
    /// Runs one of the small Markov chain examples.
    MdpDemo {
        #[arg(value_enum)]
        example: MdpExample,
        /// Number of states.
        #[arg(long, default_value_t = 7)]
        states: usize,
    },
}

#[derive(Args)]
struct SchemeArgs {
    #[arg(long, value_parser = parse_kind)]
    problem: ProblemKind,
    #[arg(long, value_parser = parse_scheme)]
    scheme: Scheme,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Penalty constant: epsilon = D dt.
    #[arg(long = "D", default_value_t = 1e-2)]
    d: f64,
    /// Fixed scaling of the impulse branch in the direct scheme.
    #[arg(long)]
    delta: Option<f64>,
    /// Parameter overrides, one `key = value` per line.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Drop the direct-scheme control restriction.
    #[arg(long)]
    no_restrict: bool,
    /// Check the unrestricted Bellman residual after each direct step.
    #[arg(long)]
    certify: bool,
    /// Allow 2D levels finer than h = 1/8.
    #[arg(long)]
    deep: bool,
}

#[derive(Args)]
struct ConvergenceArgs {
    #[command(flatten)]
    scheme: SchemeArgs,
    /// Number of refinement levels, starting at h = 1.
    #[arg(long, default_value_t = 3)]
    levels: u32,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run the levels concurrently.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct SurfaceArgs {
    #[command(flatten)]
    scheme: SchemeArgs,
    #[arg(long, default_value_t = 0)]
    level: u32,
    #[arg(long)]
    out: PathBuf,
    /// `ends`, `all`, `every:K` or a comma separated list of times.
    #[arg(long, default_value = "ends", value_parser = parse_keep)]
    keep_times: KeepTimes,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(value_enum)]
    suite: Suite,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    cases: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Wcdd,
    Bellman,
    Impulse,
    Schemes,
}

#[derive(Clone, Copy, ValueEnum)]
enum MdpExample {
    Chain,
    OneHop,
    Failure,
    Modified,
}

fn parse_kind(s: &str) -> Result<ProblemKind, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_keep(s: &str) -> Result<KeepTimes, String> {
    s.parse()
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Self {
            code,
            msg: msg.into(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::new(EXIT_IO, e.to_string())
    }
}

impl From<ProblemError> for Failure {
    fn from(e: ProblemError) -> Self {
        let code = match e {
            ProblemError::BadLevel { .. } => EXIT_BAD_LEVEL,
            _ => EXIT_USAGE,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<SchemeError> for Failure {
    fn from(e: SchemeError) -> Self {
        let code = match e {
            SchemeError::Infeasible(_) | SchemeError::NoControl { .. } => EXIT_INFEASIBLE,
            SchemeError::Config(_) | SchemeError::ControlDependentDiffusion => EXIT_USAGE,
            _ => EXIT_SOLVER,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<StudyError> for Failure {
    fn from(e: StudyError) -> Self {
        match e {
            StudyError::Problem(p) => p.into(),
            StudyError::Scheme { level, source } => {
                let f: Failure = source.into();
                Failure::new(f.code, format!("level {level}: {}", f.msg))
            }
        }
    }
}

/// Finest 2D level without `--deep`.
const DEFAULT_2D_CAP: u32 = 3;

impl SchemeArgs {
    fn check_level(&self, level: u32) -> Result<(), Failure> {
        if self.problem != ProblemKind::Fex && level > DEFAULT_2D_CAP && !self.deep {
            return Err(Failure::new(
                EXIT_BAD_LEVEL,
                format!(
                    "level {level} is finer than h = 1/8 for {}; pass --deep to run it",
                    self.problem
                ),
            ));
        }
        Ok(())
    }

    fn config(&self) -> SchemeConfig {
        SchemeConfig {
            tol: self.tol,
            scale: self.scale,
            d: self.d,
            delta: self.delta,
            restrict: !self.no_restrict,
            certify: self.certify,
            ..SchemeConfig::new(self.scheme)
        }
    }

    fn overrides(&self) -> Result<Option<String>, Failure> {
        self.params
            .as_ref()
            .map(|p| {
                fs::read_to_string(p)
                    .map_err(|e| Failure::new(EXIT_USAGE, format!("{}: {e}", p.display())))
            })
            .transpose()
    }
}

fn convergence(args: &ConvergenceArgs) -> Result<(), Failure> {
    let s = &args.scheme;
    if args.levels == 0 {
        return Err(Failure::new(EXIT_BAD_LEVEL, "need at least one level"));
    }
    s.check_level(args.levels - 1)?;
    let overrides = s.overrides()?;
    let cfg = s.config();
    let levels: Vec<u32> = (0..args.levels).collect();
    let runs = run_levels(
        s.problem,
        &levels,
        &cfg,
        overrides.as_deref(),
        args.parallel,
    )?;
    let reference = if s.scheme == Scheme::SemiLagrangian {
        runs.iter()
            .map(|r| r.wall_time.as_secs_f64())
            .reduce(f64::min)
    } else {
        let p = build_problem(s.problem, 0, overrides.as_deref())?;
        let sl = SchemeConfig {
            scheme: Scheme::SemiLagrangian,
            ..cfg.clone()
        };
        run_scheme(p.as_ref(), &sl)
            .ok()
            .map(|r| r.wall_time.as_secs_f64())
    };
    let rows = convergence_table(&runs, reference);
    print!("{}", format_table(&rows));
    for r in &runs {
        if r.certificate_failures() > 0 {
            eprintln!(
                "warning: h = {}: certificate failed at {} timesteps",
                hjbqvi::report::h_label(r.level),
                r.certificate_failures()
            );
        }
    }
    match &args.out {
        Some(path) => write_csv(&rows, BufWriter::new(File::create(path)?))?,
        None => {
            println!();
            write_csv(&rows, io::stdout().lock())?
        }
    }
    Ok(())
}

fn controls_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("surface");
    out.with_file_name(format!("{stem}_controls.csv"))
}

fn surface(args: &SurfaceArgs) -> Result<(), Failure> {
    let s = &args.scheme;
    s.check_level(args.level)?;
    let overrides = s.overrides()?;
    let p = build_problem(s.problem, args.level, overrides.as_deref())?;
    let cfg = SchemeConfig {
        keep: args.keep_times.clone(),
        ..s.config()
    };
    let run = run_scheme(p.as_ref(), &cfg)?;
    write_surfaces(
        p.grid(),
        &run.surfaces,
        BufWriter::new(File::create(&args.out)?),
    )?;
    let cpath = controls_path(&args.out);
    write_control_map(
        p.grid(),
        &run.controls,
        BufWriter::new(File::create(&cpath)?),
    )?;
    println!("value {:.8} at the reporting point", run.value);
    println!("surfaces: {}", args.out.display());
    println!("controls: {}", cpath.display());
    Ok(())
}

fn check(args: &CheckArgs) -> Result<(), Failure> {
    let rep: CheckReport = match args.suite {
        Suite::Wcdd => check_wcdd(args.seed, args.cases.unwrap_or(1000)),
        Suite::Bellman => {
            let a = check_bellman(args.seed, args.cases.unwrap_or(200));
            let b = check_epsilon_pi(args.seed, args.cases.unwrap_or(200));
            println!("{}", a.summary());
            if !a.passed() {
                for f in &a.failures {
                    eprintln!("{f}");
                }
                return Err(Failure::new(EXIT_PROPERTY, "bellman suite failed"));
            }
            b
        }
        Suite::Impulse => check_impulse(args.seed, args.cases.unwrap_or(100)),
        Suite::Schemes => check_schemes(args.seed, args.cases.unwrap_or(50)),
    };
    println!("{}", rep.summary());
    if rep.passed() {
        Ok(())
    } else {
        for f in &rep.failures {
            eprintln!("{f}");
        }
        Err(Failure::new(
            EXIT_PROPERTY,
            format!("{} suite failed", rep.name),
        ))
    }
}

fn print_solution(p: &ImpulseControlProblem<'_, MdpModel>) -> Result<(), Failure> {
    let n = p.model().spec().size();
    let out = policy_iteration(p, &vec![0.0; n], &PiConfig::default())
        .map_err(|e| Failure::new(EXIT_SOLVER, e.to_string()))?;
    println!("converged in {} policy iterations", out.stats.iterations);
    let (a, _) = assemble_policy(p, &out.policy);
    let report = is_wcdd(&a);
    println!("state  psi  target  value        path to an SDD row");
    for (i, c) in out.policy.controls.iter().enumerate() {
        let target = match c {
            ImpulseControl::Continue { .. } => "-".to_string(),
            ImpulseControl::Impulse { z } => {
                let spec = &p.model().spec().states[i].z[*z];
                spec.probs
                    .iter()
                    .position(|&x| x == 1.0)
                    .map(|j| j.to_string())
                    .unwrap_or("mix".into())
            }
        };
        let path = report
            .witness_path(i)
            .map(|q| {
                q.iter()
                    .map(|j| j.to_string())
                    .collect::<Vec<_>>()
                    .join(" -> ")
            })
            .unwrap_or_else(|| "none".into());
        println!(
            "{i:>5}  {:>3}  {target:>6}  {:>11.6}  {path}",
            c.psi(),
            out.v[i]
        );
    }
    Ok(())
}

fn mdp_demo(example: MdpExample, m: usize) -> Result<(), Failure> {
    if m < 3 {
        return Err(Failure::new(EXIT_USAGE, "need at least 3 states"));
    }
    let built = |spec| build_mdp(spec).map_err(|e| Failure::new(EXIT_USAGE, e.to_string()));
    match example {
        MdpExample::Chain => print_solution(&built(example_chain(m))?),
        MdpExample::OneHop => print_solution(&built(example_one_hop(m))?),
        MdpExample::Failure => {
            let p = built(example_failure(m))?;
            match policy_iteration(&p, &vec![0.0; m], &PiConfig::default()) {
                Err(PiError::SingularMatrix {
                    iteration,
                    diagnostic,
                    ..
                }) => {
                    let row = diagnostic.zero_rows.first().copied();
                    let detail = match row {
                        Some(r) => format!("row {r}, zero row detected"),
                        None => diagnostic.to_string(),
                    };
                    println!("singular at iteration {iteration}, {detail}");
                    Err(Failure::new(
                        EXIT_SOLVER,
                        "policy iteration failed on the unrestricted problem",
                    ))
                }
                Err(e) => Err(Failure::new(EXIT_SOLVER, e.to_string())),
                Ok(_) => Err(Failure::new(
                    EXIT_PROPERTY,
                    "policy iteration unexpectedly converged",
                )),
            }
        }
        MdpExample::Modified => {
            let p = example_modified(m);
            print_solution(&p)?;
            let out = policy_iteration(&p, &vec![0.0; m], &PiConfig::default())
                .map_err(|e| Failure::new(EXIT_SOLVER, e.to_string()))?;
            let cert = verify_original(&p, &out.v, 1e-9);
            println!(
                "certificate on the original problem: {} (residual {:.3e} at row {})",
                if cert.holds { "holds" } else { "fails" },
                cert.residual,
                cert.worst_row
            );
            if cert.holds {
                Ok(())
            } else {
                Err(Failure::new(EXIT_PROPERTY, "certificate does not hold"))
            }
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("HJBQVI_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::new(
            EXIT_USAGE,
            format!("HJBQVI_THREADS must be a positive integer, got '{v}'"),
        )
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::new(EXIT_USAGE, e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Convergence(a) => convergence(a),
        Command::Surface(a) => surface(a),
        Command::Check(a) => check(a),
        Command::MdpDemo { example, states } => mdp_demo(*example, *states),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
