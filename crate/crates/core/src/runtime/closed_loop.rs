use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Condvar, Mutex};

use nalgebra::{DMatrix, DVector};

use super::config::{Scenario, Setup};
use super::trace::{ClosedLoopTrace, TraceMeta, TraceRow};
use super::{Result, RuntimeError};
use crate::mpc::{MpcError, MpcSolution};
use crate::oracle::{
    draw_batch, train_on_batch, HiddenStack, Oracle, OracleState, ReplayBuffer, Sample, TrainConfig,
};
use crate::plant::truth_residual;

/// One completed hidden-layer training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainEvent {
    /// Control step of the `T_k` event that requested it.
    pub requested_at: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

struct TrainJob {
    requested_at: usize,
    k: DMatrix<f64>,
    batch: Vec<Sample>,
}

/// One-slot mailbox; a newer value overwrites an unread one.
struct Mailbox<T> {
    slot: Mutex<Option<T>>,
    ready: Condvar,
}

impl<T> Mailbox<T> {
    fn new() -> Self {
        Self { slot: Mutex::new(None), ready: Condvar::new() }
    }

    fn put(&self, value: T) {
        *self.slot.lock().expect("mailbox poisoned") = Some(value);
        self.ready.notify_one();
    }

    fn try_take(&self) -> Option<T> {
        self.slot.lock().expect("mailbox poisoned").take()
    }

    /// Blocks until a value arrives or `stop` is set.
    fn wait_take(&self, stop: &AtomicBool) -> Option<T> {
        let mut slot = self.slot.lock().expect("mailbox poisoned");
        loop {
            if let Some(v) = slot.take() {
                return Some(v);
            }
            if stop.load(Ordering::Acquire) {
                return None;
            }
            slot = self.ready.wait(slot).expect("mailbox poisoned");
        }
    }
}

/// Features and generation cached with each applied input.
struct PhiCache {
    phi: DVector<f64>,
    generation: u64,
}

fn train_config(s: &Scenario) -> TrainConfig {
    TrainConfig {
        batch_size: s.schedule.batch_size,
        epochs: s.schedule.epochs,
        learning_rate: s.schedule.learning_rate,
        momentum: s.schedule.momentum,
    }
}

fn batch_seed(seed: u64, event: u64) -> u64 {
    seed ^ (event + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn dnn(oracle: &Oracle) -> Option<&OracleState> {
    match oracle {
        Oracle::Dnn(s) => Some(s),
        _ => None,
    }
}

fn dnn_mut(oracle: &mut Oracle) -> Option<&mut OracleState> {
    match oracle {
        Oracle::Dnn(s) => Some(s),
        _ => None,
    }
}

/// Builds `scenario` and runs it.
pub fn run_closed_loop(scenario: &Scenario) -> Result<ClosedLoopTrace> {
    let setup = scenario.build()?;
    run_setup(scenario, setup)
}

/// Runs a prebuilt setup; `scenario` supplies the schedule and run length.
pub fn run_setup(scenario: &Scenario, setup: Setup) -> Result<ClosedLoopTrace> {
    if scenario.schedule.deterministic {
        Loop::new(scenario, setup).run(None)
    } else {
        let jobs: Mailbox<TrainJob> = Mailbox::new();
        let results: Mailbox<(TrainEvent, HiddenStack)> = Mailbox::new();
        let stop = AtomicBool::new(false);
        let cfg = train_config(scenario);
        let lp = Loop::new(scenario, setup);
        let start = lp.trainer_hidden.clone();
        let scale = dnn(lp.setup.problem.oracle()).map(|s| s.input_scale().clone());
        std::thread::scope(|scope| {
            if let (Some(mut hidden), Some(scale)) = (start, scale) {
                let (jobs, results, stop) = (&jobs, &results, &stop);
                scope.spawn(move || {
                    while let Some(job) = jobs.wait_take(stop) {
                        let out = train_on_batch(&hidden, &job.k, &scale, &job.batch, &cfg);
                        hidden = out.hidden.clone();
                        let event = TrainEvent {
                            requested_at: job.requested_at,
                            initial_loss: out.initial_loss,
                            final_loss: out.final_loss,
                        };
                        results.put((event, out.hidden));
                    }
                });
            }
            let out = lp.run(Some((&jobs, &results)));
            stop.store(true, Ordering::Release);
            jobs.ready.notify_all();
            out
        })
    }
}

type Channels<'a> = (&'a Mailbox<TrainJob>, &'a Mailbox<(TrainEvent, HiddenStack)>);

struct Loop<'s> {
    scenario: &'s Scenario,
    setup: Setup,
    buffer: Option<ReplayBuffer>,
    /// The trainer's own copy of the hidden stack (deterministic mode).
    trainer_hidden: Option<HiddenStack>,
    new_samples: usize,
    events: u64,
    generation_live: Vec<(u64, usize)>,
    trainings: Vec<TrainEvent>,
}

impl<'s> Loop<'s> {
    fn new(scenario: &'s Scenario, setup: Setup) -> Self {
        let state = dnn(setup.problem.oracle());
        let buffer = state.map(|_| {
            ReplayBuffer::new(scenario.schedule.buffer_capacity, scenario.schedule.write_policy)
                .expect("validated capacity")
        });
        let trainer_hidden = state.map(|s| s.hidden().clone());
        let generation_live = state.map(|s| vec![(s.generation(), 0)]).unwrap_or_default();
        Self {
            scenario,
            setup,
            buffer,
            trainer_hidden,
            new_samples: 0,
            events: 0,
            generation_live,
            trainings: Vec::new(),
        }
    }

    fn meta(&self) -> TraceMeta {
        let cfg = self.setup.problem.config();
        TraceMeta {
            name: self.scenario.label(),
            oracle: self.scenario.oracle.kind.label().to_string(),
            q: cfg.q.clone(),
            r: cfg.r.clone(),
            x_ref: cfg.x_ref.clone(),
            u_ref: cfg.u_ref.clone(),
            offset: self.setup.truth.offset(),
            sample_time: self.setup.sample_time,
            deterministic: self.scenario.schedule.deterministic,
            seed: self.scenario.schedule.seed,
        }
    }

    fn install(&mut self, hidden: HiddenStack, live_step: usize) -> Result<()> {
        let state = dnn_mut(self.setup.problem.oracle_mut()).expect("trainer implies a network oracle");
        state.swap_hidden(hidden)?;
        self.generation_live.push((state.generation(), live_step));
        Ok(())
    }

    /// `T_k` event after step `t`: copy `K`, draw the batch, train or hand off.
    fn trainer_event(&mut self, t: usize, channels: Option<Channels<'_>>) -> Result<()> {
        let sched = &self.scenario.schedule;
        let Some(buf) = &self.buffer else { return Ok(()) };
        if (t + 1) % sched.copy_period != 0 || buf.len() < sched.min_fill() || self.new_samples < sched.min_new_samples {
            return Ok(());
        }
        let state = dnn(self.setup.problem.oracle()).expect("buffer implies a network oracle");
        let k = state.output_weights().clone();
        let batch = draw_batch(buf, sched.batch_size, batch_seed(sched.seed, self.events))?;
        self.events += 1;
        self.new_samples = 0;
        match channels {
            Some((jobs, _)) => jobs.put(TrainJob { requested_at: t, k, batch }),
            None => {
                let cfg = train_config(self.scenario);
                let hidden = self.trainer_hidden.as_ref().expect("network oracle");
                let out = train_on_batch(hidden, &k, state.input_scale(), &batch, &cfg);
                self.trainer_hidden = Some(out.hidden.clone());
                self.trainings.push(TrainEvent {
                    requested_at: t,
                    initial_loss: out.initial_loss,
                    final_loss: out.final_loss,
                });
                self.install(out.hidden, t + 1)?;
            }
        }
        Ok(())
    }

    fn run(mut self, channels: Option<Channels<'_>>) -> Result<ClosedLoopTrace> {
        let meta = self.meta();
        let steps = self.scenario.run.steps;
        let mut x = self.setup.x0.clone();
        let mut prev: Option<MpcSolution> = None;
        let mut rows = Vec::with_capacity(steps);
        for t in 0..steps {
            if let Some((_, results)) = channels {
                if let Some((event, hidden)) = results.try_take() {
                    self.trainings.push(event);
                    self.install(hidden, t)?;
                }
            }
            let problem = &self.setup.problem;
            let shift_violation = prev.as_ref().map(|p| problem.max_violation(&x, &problem.shift_solution(p).c));
            let sol = match problem.solve_lbmpc(&x, prev.as_ref()) {
                Ok(s) => s,
                Err(MpcError::Infeasible | MpcError::SolverFailure(_)) if t == 0 => {
                    return Err(RuntimeError::InfeasibleAtStart { x0: x.iter().copied().collect() });
                }
                Err(e) => return Err(RuntimeError::Numerical { step: t, message: e.to_string() }),
            };
            let u = sol.u.clone();

            let oracle = problem.oracle();
            let cache = dnn(oracle).map(|s| PhiCache { phi: s.features(&x, &u), generation: s.generation() });
            let (h_pred, k_norm, generation) = match (dnn(oracle), &cache) {
                (Some(s), Some(c)) => (s.predict_from_features(&c.phi), s.output_weights().norm(), c.generation),
                _ => (oracle.predict(&x, &u), 0.0, 0),
            };

            let model = problem.model();
            let x_next = self
                .setup
                .truth
                .step(&x, &u)
                .map_err(|e| RuntimeError::Numerical { step: t, message: e.to_string() })?;
            let h_real = truth_residual(&x, &u, &x_next, model);
            let x_tilde = model.predict(&x, &u) + &h_pred - &x_next;
            let row = TraceRow {
                t,
                x: x.clone(),
                u: u.clone(),
                h_pred,
                h_in_w: model.disturbance_set.contains_tol(&h_real, 1e-12),
                h_real: h_real.clone(),
                x_tilde: x_tilde.clone(),
                k_norm,
                generation,
                status: sol.status,
                sqp_iterations: sol.sqp_iterations,
                qp_iterations: sol.qp_iterations,
                solver_time: sol.wall_time,
                mpc_cost: sol.cost,
                state_margin: model.state_set.slack(&x).min(),
                input_margin: model.input_set.slack(&u).min(),
                shift_violation,
            };

            let mut input = DVector::zeros(x.len() + u.len());
            input.rows_mut(0, x.len()).copy_from(&x);
            input.rows_mut(x.len(), u.len()).copy_from(&u);
            if let Some(buf) = &mut self.buffer {
                buf.push(Sample { input, label: h_real.clone() })?;
                self.new_samples += 1;
            }
            match self.setup.problem.oracle_mut() {
                Oracle::Dnn(state) => {
                    let c = cache.expect("cached with the input");
                    // The cached φ is the one the prediction used, whatever the live generation is now.
                    if c.generation == state.generation() {
                        debug_assert_eq!(state.features(&x, &u), c.phi, "stale feature cache");
                    }
                    state.adapt_with_features(&c.phi, &x_tilde);
                }
                Oracle::L2nw(est) => est.push(&x, &u, &h_real)?,
                Oracle::Zero { .. } => {}
            }
            self.trainer_event(t, channels)?;

            rows.push(row);
            x = x_next;
            prev = Some(sol);
        }
        Ok(ClosedLoopTrace {
            meta,
            rows,
            x_final: x,
            generation_live: self.generation_live,
            trainings: self.trainings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_scenario(oracle: &str, x0: &str) -> Scenario {
        Scenario::from_toml_str(&format!(
            r#"
[plant]
kind = "linear"
a = [[1.0, 0.1], [0.0, 1.0]]
b = [[0.005], [0.1]]
state_lower = [-5.0, -5.0]
state_upper = [5.0, 5.0]
input_lower = [-1.0]
input_upper = [1.0]
[controller]
horizon = 10
q = [1.0, 1.0]
r = [0.1]
[oracle]
kind = "{oracle}"
hidden_widths = [6, 4]
w_bar = [0.01, 0.01]
[schedule]
copy_period = 10
min_new_samples = 10
batch_size = 16
buffer_capacity = 64
[run]
steps = 60
x0 = {x0}
"#
        ))
        .unwrap()
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let trace = run_closed_loop(&linear_scenario("zero", "[0.0, 0.0]")).unwrap();
        for r in &trace.rows {
            assert_eq!(r.x.amax(), 0.0);
            assert_eq!(r.u.amax(), 0.0);
        }
    }

    #[test]
    fn deterministic_runs_match() {
        let s = linear_scenario("dnn", "[1.0, -0.5]");
        let a = run_closed_loop(&s).unwrap();
        let b = run_closed_loop(&s).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(a.trainings.len() >= 2);
        assert_eq!(a.generation_live.len(), a.trainings.len() + 1);
    }

    #[test]
    fn concurrent_mode_runs() {
        let mut s = linear_scenario("dnn", "[1.0, -0.5]");
        s.schedule.deterministic = false;
        let trace = run_closed_loop(&s).unwrap();
        assert_eq!(trace.len(), 60);
        let steps: Vec<usize> = trace.generation_live.iter().map(|g| g.1).collect();
        assert!(steps.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn buffer_labels_rederive() {
        let s = linear_scenario("dnn", "[1.0, -0.5]");
        let setup = s.build().unwrap();
        let model = setup.problem.model().clone();
        let trace = run_setup(&s, setup).unwrap();
        let states = trace.states();
        for (i, r) in trace.rows.iter().enumerate() {
            assert_eq!(truth_residual(&r.x, &r.u, &states[i + 1], &model), r.h_real);
        }
    }

    #[test]
    fn infeasible_start_is_reported() {
        let mut s = linear_scenario("zero", "[4.9, 4.9]");
        s.controller.qp_max_iter = 200;
        assert!(matches!(run_closed_loop(&s), Err(RuntimeError::InfeasibleAtStart { .. })));
    }
}
