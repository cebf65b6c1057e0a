use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lbmpc::mpc::MpcSolution;
use lbmpc::polytope::{
    max_invariant_set, robust_invariance_violations, tube_margins, PolytopeError, DEFAULT_INVARIANT_MAX_ITER,
};
use lbmpc::qp::{qp_solve, QpProblem, QpSettings};
use lbmpc::runtime::{compare, metrics, run_setup, ClosedLoopTrace, Metrics, RuntimeError, Scenario, SolverTimeSummary};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_INFEASIBLE_START: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;
pub const EXIT_EMPTY_SET: u8 = 5;

/// Samples drawn from Ω for the robust-invariance check.
pub const INVARIANCE_SAMPLES: usize = 10_000;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(EXIT_NUMERICAL, format!("cannot write {}: {e}", path.display()))
    }
}

pub fn exit_code(e: &RuntimeError) -> u8 {
    match e {
        RuntimeError::Config(_) | RuntimeError::Oracle(_) => EXIT_CONFIG,
        RuntimeError::InfeasibleAtStart { .. } => EXIT_INFEASIBLE_START,
        RuntimeError::Polytope(PolytopeError::Empty | PolytopeError::EmptyResult) => EXIT_EMPTY_SET,
        _ => EXIT_NUMERICAL,
    }
}

impl From<RuntimeError> for Failure {
    fn from(e: RuntimeError) -> Self {
        Self::new(exit_code(&e), e.to_string())
    }
}

pub type CmdResult = Result<(), Failure>;

fn write(dir: &Path, name: &str, contents: &str) -> CmdResult {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Failure::io(&path, e))
}

fn ensure_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

fn vec_text(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
    format!("[{}]", parts.join(", "))
}

pub fn metrics_text(trace: &ClosedLoopTrace, m: &Metrics) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "name = {}", trace.meta.name);
    let _ = writeln!(s, "oracle = {}", trace.meta.oracle);
    let _ = writeln!(s, "steps = {}", trace.len());
    let _ = writeln!(s, "x0 = {}", vec_text(trace.rows.first().map_or(&[][..], |r| r.x.as_slice())));
    let _ = writeln!(s, "overshoot = {}", vec_text(&m.overshoot));
    let _ = writeln!(s, "settling_step = {}", m.settling_step);
    let _ = writeln!(s, "settling_time_s = {}", m.settling_time);
    let _ = writeln!(s, "rise_step = {}", m.rise_step);
    let _ = writeln!(s, "cumulative_cost = {:e}", m.cumulative_cost);
    let _ = writeln!(s, "solver_median_s = {:e}", m.solver_time.median);
    let _ = writeln!(s, "solver_p95_s = {:e}", m.solver_time.p95);
    let _ = writeln!(s, "solver_max_s = {:e}", m.solver_time.max);
    let _ = writeln!(s, "fallbacks = {}", m.fallbacks);
    let _ = writeln!(s, "constraint_violations = {}", m.constraint_violations);
    let _ = writeln!(s, "h_outside_w = {}", m.h_outside_w);
    let _ = writeln!(s, "shift_infeasible = {}", m.shift_infeasible);
    let _ = writeln!(s, "x_tilde_ms_first_quarter = {:e}", m.x_tilde_ms_first);
    let _ = writeln!(s, "x_tilde_ms_last_quarter = {:e}", m.x_tilde_ms_last);
    let _ = writeln!(s, "trainings = {}", trace.trainings.len());
    s
}

pub fn simulate(scenario: &Scenario, out: &Path) -> CmdResult {
    ensure_dir(out)?;
    write(out, "config.toml", &scenario.to_toml_string())?;
    let setup = scenario.build()?;
    let trace = match run_setup(scenario, setup) {
        Ok(t) => t,
        Err(e) => {
            write(out, "diagnostic.txt", &format!("{e}\n"))?;
            return Err(e.into());
        }
    };
    let m = metrics(&trace, scenario.run.band)?;
    write(out, "trace.csv", &trace.to_csv())?;
    write(out, "timing.csv", &trace.timing_csv())?;
    write(out, "generations.csv", &trace.generations_csv())?;
    write(out, "metrics.txt", &metrics_text(&trace, &m))?;
    Ok(())
}

pub fn compare_cmd(scenarios: &[Scenario], out: &Path) -> CmdResult {
    if scenarios.len() < 2 {
        return Err(Failure::new(EXIT_CONFIG, "compare needs at least two scenarios"));
    }
    ensure_dir(out)?;
    for (i, s) in scenarios.iter().enumerate() {
        write(out, &format!("config_{i}_{}.toml", s.label()), &s.to_toml_string())?;
    }
    let c = compare(scenarios)?;
    write(out, "metrics.csv", &c.metrics_csv())?;
    write(out, "deltas.csv", &c.deltas_csv())?;
    write(out, "aligned.csv", &c.aligned_csv())?;
    for (name, body) in c.figure_files() {
        write(out, name, &body)?;
    }
    // Outputs are complete; the first failed run decides the exit code.
    match c.entries.iter().find_map(|(_, r)| r.as_ref().err()) {
        Some(e) => Err(Failure::new(exit_code(e), e.to_string())),
        None => Ok(()),
    }
}

pub fn sets(scenario: &Scenario, out: &Path) -> CmdResult {
    ensure_dir(out)?;
    write(out, "config.toml", &scenario.to_toml_string())?;
    let (_, model, cfg) = scenario.controller_design()?;
    let a_cl = cfg.closed_loop(&model);
    let w = &model.disturbance_set;
    let n = cfg.horizon;
    let state = tube_margins(&a_cl, w, model.state_set.normals(), n).map_err(RuntimeError::from)?;
    let input =
        tube_margins(&a_cl, w, &(model.input_set.normals() * &cfg.gain), n).map_err(RuntimeError::from)?;
    write(out, "w.txt", &w.to_text())?;

    let mut csv = String::from("stage");
    for i in 0..model.state_set.n_rows() {
        let _ = write!(csv, ",state_f{i}");
    }
    for i in 0..model.input_set.n_rows() {
        let _ = write!(csv, ",input_f{i}");
    }
    csv.push('\n');
    for (i, (sm, im)) in state.iter().zip(&input).enumerate() {
        let cols: Vec<String> = sm.iter().chain(im.iter()).map(|v| format!("{v:e}")).collect();
        let _ = writeln!(csv, "{i},{}", cols.join(","));
    }
    write(out, "margins.csv", &csv)?;

    let mut report = String::new();
    let mut empty_stage = None;
    for i in 0..=n {
        let x_ok = model.state_set.tighten(&state[i]).is_feasible();
        let u_ok = model.input_set.tighten(&input[i]).is_feasible();
        let _ = writeln!(report, "stage {i}: state {} input {}", nonempty(x_ok), nonempty(u_ok));
        if !(x_ok && u_ok) && empty_stage.is_none() {
            empty_stage = Some(i);
        }
    }
    if let Some(i) = empty_stage {
        let _ = writeln!(report, "result: empty tightened set at stage {i}");
        write(out, "report.txt", &report)?;
        return Err(Failure::new(EXIT_EMPTY_SET, format!("tightened set is empty at stage {i}")));
    }

    let omega = match max_invariant_set(&a_cl, &model.state_set, &model.input_set, &cfg.gain, w, DEFAULT_INVARIANT_MAX_ITER) {
        Ok(o) if o.converged => {
            let _ = writeln!(report, "omega: converged after {} iterations, {} half-spaces", o.iterations, o.set.n_rows());
            o.set
        }
        Ok(_) => {
            let _ = writeln!(report, "omega: no convergence within {DEFAULT_INVARIANT_MAX_ITER} iterations");
            write(out, "report.txt", &report)?;
            return Err(Failure::new(EXIT_NUMERICAL, "invariant-set iteration did not converge"));
        }
        Err(PolytopeError::Empty) => {
            let _ = writeln!(report, "omega: empty\nresult: empty tightened set at stage terminal");
            write(out, "report.txt", &report)?;
            return Err(Failure::new(EXIT_EMPTY_SET, "terminal set is empty"));
        }
        Err(e) => return Err(RuntimeError::from(e).into()),
    };
    write(out, "omega.txt", &omega.to_text())?;
    let terminal = tube_margins(&a_cl, w, omega.normals(), n).map_err(RuntimeError::from)?;
    let terminal_ok = omega.tighten(&terminal[n]).is_feasible();
    let _ = writeln!(report, "terminal (omega tightened by R_{n}): {}", nonempty(terminal_ok));

    let mut rng = ChaCha8Rng::seed_from_u64(scenario.schedule.seed);
    let violations = robust_invariance_violations(&omega, &a_cl, w, INVARIANCE_SAMPLES, &mut rng)
        .map_err(RuntimeError::from)?;
    let _ = writeln!(report, "invariance check: {INVARIANCE_SAMPLES} samples, {violations} violations");
    let _ = writeln!(
        report,
        "result: {}",
        if terminal_ok && violations == 0 { "ok" } else if terminal_ok { "invariance violated" } else { "empty terminal set" }
    );
    write(out, "report.txt", &report)?;
    if !terminal_ok {
        return Err(Failure::new(EXIT_EMPTY_SET, format!("tightened terminal set is empty at stage {n}")));
    }
    if violations > 0 {
        return Err(Failure::new(EXIT_NUMERICAL, format!("{violations} sampled invariance violations")));
    }
    Ok(())
}

fn nonempty(ok: bool) -> &'static str {
    if ok {
        "nonempty"
    } else {
        "empty"
    }
}

/// Strictly convex QP with `n` variables, `n` random half-spaces and box bounds; the
/// origin is strictly feasible.
pub fn random_qp<R: Rng>(n: usize, rng: &mut R) -> QpProblem {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let hessian = m.transpose() * &m + DMatrix::identity(n, n);
    let gradient = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
    let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let ineq_matrix = DMatrix::from_fn(3 * n, n, |i, j| {
        if i < n {
            g[(i, j)]
        } else if i < 2 * n {
            f64::from(u8::from(i - n == j))
        } else {
            -f64::from(u8::from(i - 2 * n == j))
        }
    });
    let ineq_rhs = DVector::from_fn(3 * n, |i, _| if i < n { rng.gen_range(0.1..1.0) } else { 1.0 });
    QpProblem::new(hessian, gradient, ineq_matrix, ineq_rhs)
}

pub struct BenchRow {
    pub kind: &'static str,
    pub size: usize,
    pub reps: usize,
    pub cold: SolverTimeSummary,
    pub warm: SolverTimeSummary,
}

pub const BENCH_HEADER: &str = "kind,size,reps,cold_median_s,cold_p95_s,warm_median_s,warm_p95_s";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:e},{:e},{:e},{:e}",
            r.kind, r.size, r.reps, r.cold.median, r.cold.p95, r.warm.median, r.warm.p95
        );
    }
    s
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

/// QP rows: each repetition times a cold solve and a warm-started solve of the same
/// problem with its linear term perturbed by 1 %.
pub fn bench_qp(sizes: &[usize], reps: usize, seed: u64) -> Result<Vec<BenchRow>, Failure> {
    let settings = QpSettings::default();
    let mut rows = Vec::new();
    for &n in sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
        let (mut cold, mut warm) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
        for _ in 0..reps {
            let p = random_qp(n, &mut rng);
            let (sol, t) = timed(|| qp_solve(&p, None, &settings));
            let sol = sol.map_err(|e| Failure::new(EXIT_NUMERICAL, e.to_string()))?;
            cold.push(t);
            let mut q = p.clone();
            q.gradient *= 1.01;
            let start = sol.warm_start();
            let (res, t) = timed(|| qp_solve(&q, Some(&start), &settings));
            res.map_err(|e| Failure::new(EXIT_NUMERICAL, e.to_string()))?;
            warm.push(t);
        }
        rows.push(BenchRow {
            kind: "qp",
            size: n,
            reps,
            cold: SolverTimeSummary::from_samples(&cold),
            warm: SolverTimeSummary::from_samples(&warm),
        });
    }
    Ok(rows)
}

/// Controller row: along a closed-loop trajectory of `reps` steps, times
/// `solve_lbmpc` without and with the previous solution. The oracle is frozen.
pub fn bench_lbmpc(scenario: &Scenario, reps: usize) -> Result<BenchRow, Failure> {
    let setup = scenario.build()?;
    let p = &setup.problem;
    let mut x = setup.x0.clone();
    let mut prev: Option<MpcSolution> = None;
    let (mut cold, mut warm) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
    for t in 0..reps {
        let (c, tc) = timed(|| p.solve_lbmpc(&x, None));
        let c = c.map_err(|e| Failure::new(EXIT_NUMERICAL, format!("step {t}: {e}")))?;
        let (sol, tw) = match &prev {
            Some(pr) => {
                let (s, tw) = timed(|| p.solve_lbmpc(&x, Some(pr)));
                (s.map_err(|e| Failure::new(EXIT_NUMERICAL, format!("step {t}: {e}")))?, tw)
            }
            // No previous solution at the first step.
            None => (c, tc),
        };
        cold.push(tc);
        warm.push(tw);
        x = setup.truth.step(&x, &sol.u).map_err(|e| Failure::new(EXIT_NUMERICAL, e.to_string()))?;
        prev = Some(sol);
    }
    Ok(BenchRow {
        kind: "lbmpc",
        size: scenario.controller.horizon,
        reps,
        cold: SolverTimeSummary::from_samples(&cold),
        warm: SolverTimeSummary::from_samples(&warm),
    })
}

/// Default output directory for a subcommand.
pub fn default_out(cmd: &str) -> PathBuf {
    PathBuf::from("out").join(cmd)
}
