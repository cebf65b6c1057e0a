use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::mpc::MpcStatus;

/// Run-level context needed to interpret a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceMeta {
    pub name: String,
    pub oracle: String,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub x_ref: DVector<f64>,
    pub u_ref: DVector<f64>,
    /// Absolute coordinates of the deviation origin.
    pub offset: DVector<f64>,
    pub sample_time: f64,
    pub deterministic: bool,
    pub seed: u64,
}

/// One control step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    /// `ĥ(x_t, u_t)` from the oracle the input was computed with.
    pub h_pred: DVector<f64>,
    /// `x_{t+1} − A x_t − B u_t`.
    pub h_real: DVector<f64>,
    /// `x̂_{t+1} − x_{t+1}`.
    pub x_tilde: DVector<f64>,
    /// `‖K_t‖_F`, zero for oracles without output weights.
    pub k_norm: f64,
    pub generation: u64,
    pub status: MpcStatus,
    pub sqp_iterations: usize,
    pub qp_iterations: usize,
    /// Solver wall time in seconds; kept out of the CSV trace.
    pub solver_time: f64,
    pub mpc_cost: f64,
    /// Smallest slack of `x_t` in `𝒳` and of `u_t` in `𝕌`.
    pub state_margin: f64,
    pub input_margin: f64,
    pub h_in_w: bool,
    /// Worst tightened-constraint violation of the shifted previous solution
    /// at `x_t` (≤ 0 when feasible); absent at `t = 0`.
    pub shift_violation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopTrace {
    pub meta: TraceMeta,
    pub rows: Vec<TraceRow>,
    /// State after the last applied input.
    pub x_final: DVector<f64>,
    /// `(generation, step)` at which each hidden stack became live.
    pub generation_live: Vec<(u64, usize)>,
    pub trainings: Vec<super::TrainEvent>,
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

impl ClosedLoopTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `x_0, …, x_T` including the final state.
    pub fn states(&self) -> Vec<DVector<f64>> {
        let mut out: Vec<DVector<f64>> = self.rows.iter().map(|r| r.x.clone()).collect();
        out.push(self.x_final.clone());
        out
    }

    pub fn solver_times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.solver_time).collect()
    }

    /// Column names of [`ClosedLoopTrace::to_csv`].
    pub fn csv_header(d: usize, m: usize) -> String {
        let mut cols = vec!["t".to_string()];
        for (prefix, n) in [("x", d), ("u", m), ("h_pred", d), ("h", d), ("x_tilde", d)] {
            cols.extend((0..n).map(|i| format!("{prefix}{i}")));
        }
        for c in [
            "k_norm",
            "generation",
            "status",
            "sqp_iter",
            "qp_iter",
            "mpc_cost",
            "state_margin",
            "input_margin",
            "h_in_w",
            "shift_violation",
        ] {
            cols.push(c.to_string());
        }
        cols.join(",")
    }

    /// Deterministic trace CSV: everything except wall-clock times.
    pub fn to_csv(&self) -> String {
        let (d, m) = match self.rows.first() {
            Some(r) => (r.x.len(), r.u.len()),
            None => (self.x_final.len(), 0),
        };
        let mut s = String::new();
        let _ = writeln!(s, "{}", Self::csv_header(d, m));
        for r in &self.rows {
            let mut cols = vec![r.t.to_string()];
            for v in [&r.x, &r.u, &r.h_pred, &r.h_real, &r.x_tilde] {
                cols.extend(v.iter().map(|x| fmt(*x)));
            }
            cols.push(fmt(r.k_norm));
            cols.push(r.generation.to_string());
            cols.push(match r.status {
                MpcStatus::Optimal => "optimal".into(),
                MpcStatus::Fallback => "fallback".into(),
            });
            cols.push(r.sqp_iterations.to_string());
            cols.push(r.qp_iterations.to_string());
            cols.push(fmt(r.mpc_cost));
            cols.push(fmt(r.state_margin));
            cols.push(fmt(r.input_margin));
            cols.push(u8::from(r.h_in_w).to_string());
            cols.push(r.shift_violation.map_or_else(String::new, fmt));
            let _ = writeln!(s, "{}", cols.join(","));
        }
        s
    }

    /// `t,solver_time_s` per step.
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("t,solver_time_s\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:e}", r.t, r.solver_time);
        }
        s
    }

    /// `generation,live_step`.
    pub fn generations_csv(&self) -> String {
        let mut s = String::from("generation,live_step\n");
        for (g, t) in &self.generation_live {
            let _ = writeln!(s, "{g},{t}");
        }
        s
    }
}
