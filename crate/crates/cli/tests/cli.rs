use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lbmpc"));
    // Keep the caller's overrides out of the tests.
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("LBMPC_")) {
        c.env_remove(k);
    }
    c
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const LINEAR_PLANT: &str = r#"
[plant]
kind = "linear"
a = [[1.0, 0.1], [0.0, 1.0]]
b = [[0.0], [0.1]]
state_lower = [-5.0, -2.0]
state_upper = [5.0, 2.0]
input_lower = [-1.0]
input_upper = [1.0]
w_lower = [0.0, 0.0]
w_upper = [0.0, 0.0]

[controller]
horizon = 8
q = [1.0, 1.0]
r = [1.0]

[run]
steps = 30
x0 = [1.0, 0.0]
"#;

const TRACE_HEADER: &str = "t,x0,x1,x2,x3,u0,h_pred0,h_pred1,h_pred2,h_pred3,h0,h1,h2,h3,\
x_tilde0,x_tilde1,x_tilde2,x_tilde3,k_norm,generation,status,sqp_iter,qp_iter,mpc_cost,\
state_margin,input_margin,h_in_w,shift_violation";

#[test]
fn missing_plant_section_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[controller]\nhorizon = 5\n").unwrap();
    let o = run(bin().args(["simulate"]).arg(&path).arg("--out").arg(dir.path().join("out")));
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("plant"));
}

#[test]
fn misspelled_env_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(bin()
        .env("LBMPC_CONTROLLER__HORIZN", "4")
        .arg("simulate")
        .arg(scenario("jet_engine_linear.toml"))
        .arg("--out")
        .arg(dir.path()));
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("horizn"));
}

#[test]
fn simulate_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(bin()
            .env("LBMPC_RUN__STEPS", "120")
            .arg("simulate")
            .arg(scenario("jet_engine_dnn.toml"))
            .args(["--deterministic", "--seed", "7", "--out"])
            .arg(out));
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let trace = fs::read_to_string(a.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), TRACE_HEADER);
    assert_eq!(trace.lines().count(), 121);
    assert_eq!(trace, fs::read_to_string(b.join("trace.csv")).unwrap());
    for f in ["config.toml", "metrics.txt", "timing.csv", "generations.csv"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(a.join("timing.csv")).unwrap().lines().next(), Some("t,solver_time_s"));

    // The echoed config reproduces the run without any overrides.
    let c = dir.path().join("c");
    let o = run(bin().arg("simulate").arg(a.join("config.toml")).arg("--out").arg(&c));
    assert_eq!(code(&o), 0);
    assert_eq!(trace, fs::read_to_string(c.join("trace.csv")).unwrap());
    let echo = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(echo.contains("seed = 7") && echo.contains("steps = 120"));
}

#[test]
fn infeasible_start_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(bin()
        .env("LBMPC_RUN__X0", "[0.24, -0.24, 0.4, 5.0]")
        .arg("simulate")
        .arg(scenario("jet_engine_linear.toml"))
        .arg("--out")
        .arg(dir.path()));
    assert_eq!(code(&o), 3);
    assert!(dir.path().join("diagnostic.txt").exists());
}

#[test]
fn compare_bundled_triple_emits_figure_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = bin();
    cmd.env("LBMPC_RUN__STEPS", "100").arg("compare");
    for s in ["jet_engine_linear.toml", "jet_engine_l2nw.toml", "jet_engine_dnn.toml"] {
        cmd.arg(scenario(s));
    }
    let o = run(cmd.arg("--out").arg(dir.path()));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["fig_massflow.dat", "fig_pressure.dat", "fig_solvertime.dat"] {
        let body = fs::read_to_string(dir.path().join(f)).unwrap();
        let data: Vec<&str> = body.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data.len(), 101, "{f}");
        assert_eq!(data[0].split_whitespace().count(), 4, "{f}");
    }
    let table = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let header = table.lines().next().unwrap();
    for col in ["overshoot_massflow", "overshoot_pressure", "settling_time_s", "solver_median_s"] {
        assert!(header.split(',').any(|c| c == col), "{col}");
    }
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn comparing_identical_scenarios_gives_zero_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("lin.toml");
    fs::write(&s, LINEAR_PLANT).unwrap();
    let o = run(bin().arg("compare").arg(&s).arg(&s).arg("--out").arg(dir.path().join("out")));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let deltas = fs::read_to_string(dir.path().join("out/deltas.csv")).unwrap();
    let rows: Vec<&str> = deltas.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        for v in row.split(',').skip(1) {
            assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{row}");
        }
    }
}

#[test]
fn compare_needs_two_scenarios() {
    let o = run(bin().arg("compare").arg(scenario("jet_engine_dnn.toml")));
    assert_ne!(code(&o), 0);
}

#[test]
fn sets_with_zero_disturbance_has_zero_margins() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("lin.toml");
    fs::write(&s, LINEAR_PLANT).unwrap();
    let out = dir.path().join("out");
    let o = run(bin().arg("sets").arg(&s).arg("--out").arg(&out));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let margins = fs::read_to_string(out.join("margins.csv")).unwrap();
    let rows: Vec<&str> = margins.lines().skip(1).collect();
    assert_eq!(rows.len(), 9);
    for row in rows {
        assert!(row.split(',').skip(1).all(|v| v.parse::<f64>().unwrap() == 0.0), "{row}");
    }
    assert!(out.join("omega.txt").exists());
}

#[test]
fn sets_on_jet_engine_reports_invariance() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(bin().arg("sets").arg(scenario("jet_engine_dnn.toml")).arg("--out").arg(dir.path()));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let margins = fs::read_to_string(dir.path().join("margins.csv")).unwrap();
    assert_eq!(margins.lines().count(), 1 + 21);
    let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(report.contains("10000 samples, 0 violations"), "{report}");
}

#[test]
fn sets_with_large_disturbance_reports_empty_stage() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("lin.toml");
    fs::write(&s, LINEAR_PLANT).unwrap();
    let o = run(bin()
        .env("LBMPC_PLANT__W_LOWER", "[-3.0, -3.0]")
        .env("LBMPC_PLANT__W_UPPER", "[3.0, 3.0]")
        .arg("sets")
        .arg(&s)
        .arg("--out")
        .arg(dir.path()));
    assert_eq!(code(&o), 5);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage 1"));
}

#[test]
fn bench_honours_repetitions_and_prints_csv() {
    let o = run(bin().args(["bench", "--sizes", "4,6", "--reps", "3"]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("kind,size,reps,cold_median_s,cold_p95_s,warm_median_s,warm_p95_s"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert_eq!(r.len(), 7);
        assert_eq!(r[2], "3");
        for v in &r[3..] {
            assert!(v.parse::<f64>().unwrap() >= 0.0);
        }
    }
    assert_eq!((rows[0][0], rows[0][1]), ("qp", "4"));
    assert_eq!((rows[2][0], rows[2][1]), ("lbmpc", "20"));
}

#[test]
fn warm_start_is_faster_on_the_bundled_scenario() {
    let o = run(bin().args(["bench", "--sizes", "20", "--reps", "40"]));
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let row: Vec<f64> = text
        .lines()
        .find(|l| l.starts_with("lbmpc,"))
        .unwrap()
        .split(',')
        .skip(3)
        .map(|v| v.parse().unwrap())
        .collect();
    println!("lbmpc cold median {:e} s, warm median {:e} s", row[0], row[2]);
    assert!(row[2] < row[0]);
}
