use std::fmt::Write as _;

use nalgebra::DVector;

use super::config::Scenario;
use super::trace::ClosedLoopTrace;
use super::{run_closed_loop, Result, RuntimeError};
use crate::mpc::MpcStatus;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolverTimeSummary {
    pub median: f64,
    pub p95: f64,
    pub max: f64,
}

impl SolverTimeSummary {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        // Nearest rank.
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Self { median, p95: s[rank - 1], max: s[n - 1] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Largest excursion past the reference on the far side from `x_0`, per state.
    pub overshoot: Vec<f64>,
    /// First step from which `‖x − x^r‖_∞` stays inside the band; the trace
    /// length when it never does.
    pub settling_step: usize,
    pub settling_time: f64,
    /// First step with `‖x − x^r‖_∞ ≤ 0.1·‖x_0 − x^r‖_∞`, or the trace length.
    pub rise_step: usize,
    pub cumulative_cost: f64,
    pub solver_time: SolverTimeSummary,
    pub fallbacks: usize,
    /// Steps with `x_t ∉ 𝒳` or `u_t ∉ 𝕌`.
    pub constraint_violations: usize,
    pub h_outside_w: usize,
    /// Steps where the shifted previous solution violated the tightened constraints.
    pub shift_infeasible: usize,
    /// Mean `‖x̃‖²` over the first and last quarter of the run.
    pub x_tilde_ms_first: f64,
    pub x_tilde_ms_last: f64,
}

/// Tolerance on slacks and shift violations when counting violations.
const VIOLATION_TOL: f64 = 1e-9;

fn overshoot(series: &[f64], reference: f64) -> f64 {
    let e0 = series[0] - reference;
    let side = if e0 > 0.0 {
        -1.0
    } else if e0 < 0.0 {
        1.0
    } else {
        0.0
    };
    series
        .iter()
        .map(|v| if side == 0.0 { (v - reference).abs() } else { side * (v - reference) })
        .fold(0.0, f64::max)
}

fn mean_sq(rows: &[DVector<f64>]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(|v| v.norm_squared()).sum::<f64>() / rows.len() as f64
}

/// Transient, cost and solver-time report of a trace.
pub fn metrics(trace: &ClosedLoopTrace, band: f64) -> Result<Metrics> {
    if trace.is_empty() {
        return Err(RuntimeError::Config("metrics of an empty trace".into()));
    }
    if !(band > 0.0 && band < 1.0) {
        return Err(RuntimeError::Config(format!("band {band} outside (0, 1)")));
    }
    let meta = &trace.meta;
    let states = trace.states();
    let d = states[0].len();
    let dev: Vec<f64> = states.iter().map(|x| (x - &meta.x_ref).amax()).collect();
    let e0 = dev[0];
    let n = trace.len();

    let threshold = band * e0;
    let settling_step = match dev.iter().rposition(|e| *e > threshold) {
        None => 0,
        Some(last) => (last + 1).min(n),
    };
    let rise_step = dev.iter().position(|e| *e <= 0.1 * e0).unwrap_or(n).min(n);

    let overshoot = (0..d)
        .map(|i| {
            let series: Vec<f64> = states.iter().map(|x| x[i]).collect();
            overshoot(&series, meta.x_ref[i])
        })
        .collect();

    let cumulative_cost = trace
        .rows
        .iter()
        .map(|r| {
            let ex = &r.x - &meta.x_ref;
            let eu = &r.u - &meta.u_ref;
            (ex.transpose() * &meta.q * &ex)[0] + (eu.transpose() * &meta.r * &eu)[0]
        })
        .sum();

    let quarter = (n / 4).max(1);
    let tildes: Vec<DVector<f64>> = trace.rows.iter().map(|r| r.x_tilde.clone()).collect();
    Ok(Metrics {
        overshoot,
        settling_step,
        settling_time: settling_step as f64 * meta.sample_time,
        rise_step,
        cumulative_cost,
        solver_time: SolverTimeSummary::from_samples(&trace.solver_times()),
        fallbacks: trace.rows.iter().filter(|r| r.status == MpcStatus::Fallback).count(),
        constraint_violations: trace
            .rows
            .iter()
            .filter(|r| r.state_margin < -VIOLATION_TOL || r.input_margin < -VIOLATION_TOL)
            .count(),
        h_outside_w: trace.rows.iter().filter(|r| !r.h_in_w).count(),
        shift_infeasible: trace
            .rows
            .iter()
            .filter(|r| r.shift_violation.is_some_and(|v| v > VIOLATION_TOL))
            .count(),
        x_tilde_ms_first: mean_sq(&tildes[..quarter]),
        x_tilde_ms_last: mean_sq(&tildes[n - quarter..]),
    })
}

/// Side-by-side runs of several scenarios.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub entries: Vec<(String, Result<(ClosedLoopTrace, Metrics)>)>,
}

/// Runs every scenario; a failing run is kept as an error entry.
pub fn compare(scenarios: &[Scenario]) -> Result<Comparison> {
    if let Some(first) = scenarios.first() {
        for s in &scenarios[1..] {
            if s.plant != first.plant || s.run.x0 != first.run.x0 || s.schedule.seed != first.schedule.seed {
                return Err(RuntimeError::Config(format!(
                    "scenario '{}' does not share the plant, seed and initial state of '{}'",
                    s.label(),
                    first.label()
                )));
            }
        }
    }
    let entries = scenarios
        .iter()
        .map(|s| {
            let out = run_closed_loop(s).and_then(|t| {
                let m = metrics(&t, s.run.band)?;
                Ok((t, m))
            });
            (s.label(), out)
        })
        .collect();
    Ok(Comparison { entries })
}

const METRIC_COLUMNS: &str = "name,oracle,overshoot_massflow,overshoot_pressure,settling_step,settling_time_s,\
rise_step,cumulative_cost,solver_median_s,solver_p95_s,solver_max_s,fallbacks,constraint_violations,h_outside_w,\
shift_infeasible,error";

fn component(v: &[f64], i: usize) -> f64 {
    v.get(i).copied().unwrap_or(f64::NAN)
}

impl Comparison {
    /// One row per scenario.
    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{METRIC_COLUMNS}\n");
        for (name, entry) in &self.entries {
            match entry {
                Ok((t, m)) => {
                    let _ = writeln!(
                        s,
                        "{name},{},{:e},{:e},{},{},{},{:e},{:e},{:e},{:e},{},{},{},{},",
                        t.meta.oracle,
                        component(&m.overshoot, 0),
                        component(&m.overshoot, 1),
                        m.settling_step,
                        m.settling_time,
                        m.rise_step,
                        m.cumulative_cost,
                        m.solver_time.median,
                        m.solver_time.p95,
                        m.solver_time.max,
                        m.fallbacks,
                        m.constraint_violations,
                        m.h_outside_w,
                        m.shift_infeasible,
                    );
                }
                Err(e) => {
                    let _ = writeln!(s, "{name},,,,,,,,,,,,,,,\"{}\"", e.to_string().replace('"', "'"));
                }
            }
        }
        s
    }

    /// Differences of the deterministic metrics against the first scenario.
    pub fn deltas_csv(&self) -> String {
        let mut s = String::from("name,d_overshoot_massflow,d_overshoot_pressure,d_settling_step,d_rise_step,d_cumulative_cost\n");
        let Some((_, Ok((_, base)))) = self.entries.first() else {
            return s;
        };
        for (name, entry) in &self.entries {
            if let Ok((_, m)) = entry {
                let _ = writeln!(
                    s,
                    "{name},{:e},{:e},{},{},{:e}",
                    component(&m.overshoot, 0) - component(&base.overshoot, 0),
                    component(&m.overshoot, 1) - component(&base.overshoot, 1),
                    m.settling_step as i64 - base.settling_step as i64,
                    m.rise_step as i64 - base.rise_step as i64,
                    m.cumulative_cost - base.cumulative_cost,
                );
            }
        }
        s
    }

    fn ok_traces(&self) -> Vec<(&str, &ClosedLoopTrace)> {
        self.entries.iter().filter_map(|(n, e)| e.as_ref().ok().map(|(t, _)| (n.as_str(), t))).collect()
    }

    /// Aligned per-step CSV: mass flow, pressure rise (absolute) and solver time per method.
    pub fn aligned_csv(&self) -> String {
        let traces = self.ok_traces();
        let mut cols = vec!["t".to_string()];
        for (n, _) in &traces {
            cols.push(format!("{n}_massflow"));
            cols.push(format!("{n}_pressure"));
            cols.push(format!("{n}_solver_time_s"));
        }
        let mut s = cols.join(",") + "\n";
        let len = traces.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
        let states: Vec<Vec<DVector<f64>>> = traces.iter().map(|(_, t)| t.states()).collect();
        for k in 0..len {
            let mut row = vec![k.to_string()];
            for ((_, t), xs) in traces.iter().zip(&states) {
                let abs = |i: usize| xs.get(k).map_or(f64::NAN, |x| x[i] + t.meta.offset[i]);
                row.push(format!("{:e}", abs(0)));
                row.push(format!("{:e}", abs(1.min(t.meta.offset.len() - 1))));
                row.push(format!("{:e}", t.rows.get(k).map_or(f64::NAN, |r| r.solver_time)));
            }
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// Whitespace-separated data file with one column per method, for gnuplot.
    fn figure(&self, title: &str, value: impl Fn(&ClosedLoopTrace, &[DVector<f64>], usize) -> Option<f64>) -> String {
        let traces = self.ok_traces();
        let mut s = format!("# {title}\n# time_s");
        for (n, _) in &traces {
            let _ = write!(s, " {n}");
        }
        s.push('\n');
        let states: Vec<Vec<DVector<f64>>> = traces.iter().map(|(_, t)| t.states()).collect();
        let len = states.iter().map(Vec::len).max().unwrap_or(0);
        let dt = traces.first().map_or(1.0, |(_, t)| t.meta.sample_time);
        for k in 0..len {
            let _ = write!(s, "{:e}", k as f64 * dt);
            for ((_, t), xs) in traces.iter().zip(&states) {
                let _ = write!(s, " {:e}", value(t, xs, k).unwrap_or(f64::NAN));
            }
            s.push('\n');
        }
        s
    }

    /// `(file name, contents)` of the three figure data files.
    pub fn figure_files(&self) -> Vec<(&'static str, String)> {
        vec![
            ("fig_massflow.dat", self.figure("mass flow", |t, xs, k| xs.get(k).map(|x| x[0] + t.meta.offset[0]))),
            (
                "fig_pressure.dat",
                self.figure("pressure rise", |t, xs, k| {
                    let i = 1.min(t.meta.offset.len() - 1);
                    xs.get(k).map(|x| x[i] + t.meta.offset[i])
                }),
            ),
            ("fig_solvertime.dat", self.figure("solver time [s]", |t, _, k| t.rows.get(k).map(|r| r.solver_time))),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{diag, dvec};
    use crate::runtime::trace::{TraceMeta, TraceRow};

    fn trace_from(states: &[Vec<f64>]) -> ClosedLoopTrace {
        let d = states[0].len();
        let rows = states[..states.len() - 1]
            .iter()
            .enumerate()
            .map(|(t, x)| TraceRow {
                t,
                x: dvec(x),
                u: dvec(&[0.0]),
                h_pred: DVector::zeros(d),
                h_real: DVector::zeros(d),
                x_tilde: DVector::zeros(d),
                k_norm: 0.0,
                generation: 0,
                status: MpcStatus::Optimal,
                sqp_iterations: 1,
                qp_iterations: 1,
                solver_time: t as f64,
                mpc_cost: 0.0,
                state_margin: 1.0,
                input_margin: 1.0,
                h_in_w: true,
                shift_violation: None,
            })
            .collect();
        ClosedLoopTrace {
            meta: TraceMeta {
                name: "t".into(),
                oracle: "linear".into(),
                q: diag(&vec![1.0; d]),
                r: diag(&[1.0]),
                x_ref: DVector::zeros(d),
                u_ref: DVector::zeros(1),
                offset: DVector::zeros(d),
                sample_time: 0.5,
                deterministic: true,
                seed: 0,
            },
            rows,
            x_final: dvec(states.last().unwrap()),
            generation_live: Vec::new(),
            trainings: Vec::new(),
        }
    }

    #[test]
    fn constant_trace_at_reference() {
        let m = metrics(&trace_from(&vec![vec![0.0, 0.0]; 10]), 0.02).unwrap();
        assert_eq!(m.overshoot, vec![0.0, 0.0]);
        assert_eq!(m.settling_step, 0);
        assert_eq!(m.cumulative_cost, 0.0);
    }

    #[test]
    fn geometric_decay_settling() {
        for rate in [0.5, 0.8, 0.93] {
            let states: Vec<Vec<f64>> = (0..200).map(|t| vec![f64::powi(rate, t)]).collect();
            let m = metrics(&trace_from(&states), 0.02).unwrap();
            let expected = (0.02f64.ln() / f64::ln(rate)).ceil() as usize;
            assert_eq!(m.settling_step, expected, "rate {rate}");
            assert_eq!(m.overshoot, vec![0.0]);
        }
    }

    #[test]
    fn never_settling_is_the_trace_length() {
        let states: Vec<Vec<f64>> = (0..20).map(|t| vec![if t % 2 == 0 { 1.0 } else { -1.0 }]).collect();
        let m = metrics(&trace_from(&states), 0.02).unwrap();
        assert_eq!(m.settling_step, 19);
        assert_eq!(m.overshoot, vec![1.0]);
    }

    #[test]
    fn overshoot_on_the_far_side() {
        let m = metrics(&trace_from(&[vec![-1.0], vec![0.3], vec![-0.1], vec![0.0]]), 0.02).unwrap();
        assert!((m.overshoot[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn solver_summary() {
        let s = SolverTimeSummary::from_samples(&[3.0, 1.0, 2.0, 4.0]);
        assert_eq!((s.median, s.p95, s.max), (2.5, 4.0, 4.0));
    }
}
