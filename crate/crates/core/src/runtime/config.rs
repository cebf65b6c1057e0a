//! Scenario files: `[plant]`, `[controller]`, `[oracle]`, `[schedule]`, `[run]`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, RuntimeError};
use crate::linalg::diag;
use crate::mpc::{build_lbmpc, design_sets, ControllerConfig, LbmpcProblem, DEFAULT_SQP_MAX_ITER};
use crate::oracle::{
    column_bounds_from_box, Activation, L2nwEstimator, NetworkArch, Oracle, OracleState, WritePolicy,
};
use crate::plant::{
    box_half_widths, estimate_w, JetEngine, MooreGreitzerParams, PlantError, PlantModel, TruthSimulator,
    DEFAULT_W_INFLATION, EQUILIBRIUM_INPUT, EQUILIBRIUM_STATE,
};
use crate::polytope::{Polytope, TighteningData};
use crate::qp::QpSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub plant: PlantSection,
    #[serde(default)]
    pub controller: ControllerSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    #[default]
    JetEngine,
    /// Exact linear truth `x⁺ = A x + B u`.
    Linear,
}

/// All vectors and bounds are in deviation coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantSection {
    pub kind: PlantKind,
    pub compressor: MooreGreitzerParams,
    pub substeps: usize,
    /// Operating envelope; defaults to the full compressor sets.
    pub state_lower: Option<Vec<f64>>,
    pub state_upper: Option<Vec<f64>>,
    pub input_lower: Option<Vec<f64>>,
    pub input_upper: Option<Vec<f64>>,
    pub w_samples: usize,
    pub w_inflation: f64,
    /// Uncertainty box override; skips the sampling estimate.
    pub w_lower: Option<Vec<f64>>,
    pub w_upper: Option<Vec<f64>>,
    /// `A` and `B` row by row, `kind = "linear"` only.
    pub a: Option<Vec<Vec<f64>>>,
    pub b: Option<Vec<Vec<f64>>>,
}

impl Default for PlantSection {
    fn default() -> Self {
        Self {
            kind: PlantKind::JetEngine,
            compressor: MooreGreitzerParams::default(),
            substeps: TruthSimulator::DEFAULT_SUBSTEPS,
            state_lower: None,
            state_upper: None,
            input_lower: None,
            input_upper: None,
            w_samples: 1000,
            w_inflation: DEFAULT_W_INFLATION,
            w_lower: None,
            w_upper: None,
            a: None,
            b: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSection {
    pub horizon: usize,
    /// Diagonal of `Q`.
    pub q: Vec<f64>,
    /// Diagonal of `R`.
    pub r: Vec<f64>,
    pub sqp_max_iter: usize,
    pub qp_max_iter: usize,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self {
            horizon: 20,
            q: vec![1.0, 1.0, 0.1, 0.1],
            r: vec![1.0],
            sqp_max_iter: DEFAULT_SQP_MAX_ITER,
            qp_max_iter: QpSettings::default().max_iter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    #[default]
    Zero,
    Dnn,
    L2nw,
}

impl OracleKind {
    pub fn label(self) -> &'static str {
        match self {
            OracleKind::Zero => "linear",
            OracleKind::Dnn => "dnn",
            OracleKind::L2nw => "l2nw",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub kind: OracleKind,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    /// Adaptation rate `γ ∈ (0, 1)`.
    pub gamma: f64,
    /// `W̄_i = factor · (half-width of W)_i`.
    pub w_bar_factor: f64,
    pub w_bar: Option<Vec<f64>>,
    pub l2nw_capacity: usize,
    /// Defaults to a tenth of the diameter of the operating envelope.
    pub l2nw_bandwidth: Option<f64>,
    pub l2nw_lambda: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            kind: OracleKind::Zero,
            hidden_widths: vec![32, 16],
            activation: Activation::Tanh,
            gamma: 0.5,
            w_bar_factor: 2.0,
            w_bar: None,
            l2nw_capacity: 500,
            l2nw_bandwidth: None,
            l2nw_lambda: 1e-6,
        }
    }
}

/// Trainer schedule and determinism switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Control steps between `T_k` events.
    pub copy_period: usize,
    /// Training needs at least this fraction of the buffer filled...
    pub fill_fraction: f64,
    /// ...and this many samples pushed since the previous event.
    pub min_new_samples: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub buffer_capacity: usize,
    pub write_policy: WritePolicy,
    pub deterministic: bool,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            copy_period: 50,
            fill_fraction: 0.1,
            min_new_samples: 50,
            batch_size: 256,
            epochs: 20,
            learning_rate: 1e-3,
            momentum: 0.0,
            buffer_capacity: 2000,
            write_policy: WritePolicy::Fifo,
            deterministic: true,
            seed: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.copy_period == 0 {
            return Err(RuntimeError::Config("schedule.copy_period must be >= 1".into()));
        }
        if !(self.fill_fraction > 0.0 && self.fill_fraction <= 1.0) {
            return Err(RuntimeError::Config("schedule.fill_fraction must be in (0, 1]".into()));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return Err(RuntimeError::Config(
                "schedule.batch_size must be positive and fit in schedule.buffer_capacity".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(RuntimeError::Config("schedule.learning_rate / momentum".into()));
        }
        Ok(())
    }

    /// Buffer size needed before a `T_k` event trains.
    pub fn min_fill(&self) -> usize {
        ((self.fill_fraction * self.buffer_capacity as f64).ceil() as usize).max(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub steps: usize,
    /// Initial deviation from the equilibrium (the reference).
    pub x0: Option<Vec<f64>>,
    /// Settling band as a fraction of the initial deviation.
    pub band: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { steps: 500, x0: None, band: 0.02 }
    }
}

/// Default jet-engine start, `x_e + 0.2·(−0.35, 0.18, 0, 0)`.
pub const JET_ENGINE_X0: [f64; 4] = [-0.07, 0.036, 0.0, 0.0];

/// Ground truth in deviation coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum Truth {
    JetEngine(JetEngine),
    Linear { a: DMatrix<f64>, b: DMatrix<f64> },
}

impl Truth {
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> std::result::Result<DVector<f64>, PlantError> {
        match self {
            Truth::JetEngine(e) => e.step_deviation(x, u),
            Truth::Linear { a, b } => Ok(a * x + b * u),
        }
    }

    /// Absolute coordinates of the deviation origin.
    pub fn offset(&self) -> DVector<f64> {
        match self {
            Truth::JetEngine(e) => DVector::from_column_slice(&e.x_e),
            Truth::Linear { a, .. } => DVector::zeros(a.nrows()),
        }
    }
}

/// Everything a run needs, assembled from a [`Scenario`].
#[derive(Debug, Clone)]
pub struct Setup {
    pub truth: Truth,
    pub model: PlantModel,
    pub omega: Polytope,
    pub margins: TighteningData,
    pub problem: LbmpcProblem,
    pub x0: DVector<f64>,
    pub sample_time: f64,
}

fn rows_to_matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(RuntimeError::Config(format!("plant.{name} must be a nonempty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn box_override(
    name: &str,
    lower: &Option<Vec<f64>>,
    upper: &Option<Vec<f64>>,
    dim: usize,
) -> Result<Option<Polytope>> {
    match (lower, upper) {
        (None, None) => Ok(None),
        (Some(l), Some(u)) => {
            if l.len() != dim || u.len() != dim {
                return Err(RuntimeError::Config(format!("plant.{name}_lower/upper need {dim} entries")));
            }
            if l.iter().zip(u).any(|(a, b)| !(a <= b)) {
                return Err(RuntimeError::Config(format!("plant.{name}_lower must not exceed plant.{name}_upper")));
            }
            Ok(Some(Polytope::from_box(l, u)?))
        }
        _ => Err(RuntimeError::Config(format!("plant.{name}_lower and plant.{name}_upper go together"))),
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| RuntimeError::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    pub fn label(&self) -> String {
        if self.name.is_empty() {
            self.oracle.kind.label().to_string()
        } else {
            self.name.clone()
        }
    }

    fn truth_and_nominal(&self) -> Result<(Truth, PlantModel)> {
        let p = &self.plant;
        if p.substeps == 0 {
            return Err(RuntimeError::Config("plant.substeps must be >= 1".into()));
        }
        match p.kind {
            PlantKind::JetEngine => {
                if p.a.is_some() || p.b.is_some() {
                    return Err(RuntimeError::Config("plant.a / plant.b only apply to kind = \"linear\"".into()));
                }
                let sim = TruthSimulator::new(p.compressor).with_substeps(p.substeps);
                let engine = JetEngine::new(sim, EQUILIBRIUM_STATE, EQUILIBRIUM_INPUT)?;
                let model = engine.model.clone();
                Ok((Truth::JetEngine(engine), model))
            }
            PlantKind::Linear => {
                let (Some(a), Some(b)) = (&p.a, &p.b) else {
                    return Err(RuntimeError::Config("plant.a and plant.b are required for kind = \"linear\"".into()));
                };
                let (a, b) = (rows_to_matrix("a", a)?, rows_to_matrix("b", b)?);
                if !a.is_square() || b.nrows() != a.nrows() {
                    return Err(RuntimeError::Config("plant.a must be square with as many rows as plant.b".into()));
                }
                if p.state_lower.is_none() || p.input_lower.is_none() {
                    return Err(RuntimeError::Config("linear plants need state and input bounds".into()));
                }
                let (d, m) = (a.nrows(), b.ncols());
                let model = PlantModel::new(
                    a.clone(),
                    b.clone(),
                    Polytope::from_box(&vec![-1.0; d], &vec![1.0; d])?,
                    Polytope::from_box(&vec![-1.0; m], &vec![1.0; m])?,
                    Polytope::origin(d),
                )?;
                Ok((Truth::Linear { a, b }, model))
            }
        }
    }

    /// Truth, nominal model with its uncertainty set, and the LQR controller
    /// configuration; everything [`Scenario::build`] needs before the set design.
    pub fn controller_design(&self) -> Result<(Truth, PlantModel, ControllerConfig)> {
        self.schedule.validate()?;
        let (truth, mut model) = self.truth_and_nominal()?;
        let (d, m) = (model.state_dim(), model.input_dim());
        if let Some(x) = box_override("state", &self.plant.state_lower, &self.plant.state_upper, d)? {
            model.state_set = x;
        }
        if let Some(u) = box_override("input", &self.plant.input_lower, &self.plant.input_upper, m)? {
            model.input_set = u;
        }
        let w = match box_override("w", &self.plant.w_lower, &self.plant.w_upper, d)? {
            Some(w) => w,
            None => {
                if !(self.plant.w_inflation >= 1.0) {
                    return Err(RuntimeError::Config("plant.w_inflation must be >= 1".into()));
                }
                estimate_w(&model, |x, u| truth.step(x, u), self.plant.w_samples, self.plant.w_inflation)?
            }
        };
        let model = model.with_disturbance_set(w)?;

        let c = &self.controller;
        if c.q.len() != d || c.r.len() != m {
            return Err(RuntimeError::Config(format!("controller.q needs {d} entries and controller.r {m}")));
        }
        if c.horizon == 0 || c.qp_max_iter == 0 {
            return Err(RuntimeError::Config("controller.horizon and controller.qp_max_iter must be >= 1".into()));
        }
        let mut cfg = ControllerConfig::lqr(&model, diag(&c.q), diag(&c.r), c.horizon)?;
        cfg.sqp_max_iter = c.sqp_max_iter;
        cfg.qp.max_iter = c.qp_max_iter;
        Ok((truth, model, cfg))
    }

    /// Builds the truth, nominal model with its uncertainty set, tube data and the problem.
    pub fn build(&self) -> Result<Setup> {
        let (truth, model, cfg) = self.controller_design()?;
        let d = model.state_dim();
        let (omega, margins) = design_sets(&model, &cfg)?;

        let oracle = self.build_oracle(&model)?;
        let problem = build_lbmpc(&model, cfg, omega.clone(), margins.clone(), oracle)?;

        let x0 = match (&self.run.x0, &truth) {
            (Some(v), _) => DVector::from_column_slice(v),
            (None, Truth::JetEngine(_)) => DVector::from_column_slice(&JET_ENGINE_X0),
            (None, Truth::Linear { .. }) => DVector::zeros(d),
        };
        if x0.len() != d {
            return Err(RuntimeError::Config(format!("run.x0 needs {d} entries")));
        }
        if !model.state_set.contains_tol(&x0, 1e-12) {
            return Err(RuntimeError::Config("run.x0 lies outside the state constraints".into()));
        }
        if !(self.run.band > 0.0 && self.run.band < 1.0) {
            return Err(RuntimeError::Config("run.band must be in (0, 1)".into()));
        }
        let sample_time = match &truth {
            Truth::JetEngine(e) => e.sim.params.sample_time,
            Truth::Linear { .. } => 1.0,
        };
        Ok(Setup { truth, model, omega, margins, problem, x0, sample_time })
    }

    fn build_oracle(&self, model: &PlantModel) -> Result<Oracle> {
        let o = &self.oracle;
        let (d, m) = (model.state_dim(), model.input_dim());
        let (xlo, xhi) = model.state_set.bounding_box()?;
        let (ulo, uhi) = model.input_set.bounding_box()?;
        let lo: Vec<f64> = xlo.iter().chain(ulo.iter()).copied().collect();
        let hi: Vec<f64> = xhi.iter().chain(uhi.iter()).copied().collect();
        match o.kind {
            OracleKind::Zero => Ok(Oracle::Zero { state_dim: d }),
            OracleKind::Dnn => {
                let arch = NetworkArch::new(
                    d + m,
                    o.hidden_widths.clone(),
                    vec![o.activation; o.hidden_widths.len()],
                    d,
                )?;
                let w_bar = match &o.w_bar {
                    Some(v) if v.len() == d => DVector::from_column_slice(v),
                    Some(_) => return Err(RuntimeError::Config(format!("oracle.w_bar needs {d} entries"))),
                    None => {
                        if !(o.w_bar_factor > 0.0) {
                            return Err(RuntimeError::Config("oracle.w_bar_factor must be > 0".into()));
                        }
                        column_bounds_from_box(&box_half_widths(&model.disturbance_set)?, o.w_bar_factor)
                    }
                };
                // Inputs are scaled so the envelope maps to roughly [−1, 1].
                let scale = DVector::from_fn(d + m, |i, _| {
                    let half = 0.5 * (hi[i] - lo[i]);
                    if half > 0.0 { 1.0 / half } else { 1.0 }
                });
                let mut rng = ChaCha8Rng::seed_from_u64(self.schedule.seed);
                Ok(Oracle::Dnn(OracleState::new(arch, w_bar, o.gamma, scale, &mut rng)?))
            }
            OracleKind::L2nw => {
                let bandwidth = o.l2nw_bandwidth.unwrap_or_else(|| {
                    let diam: f64 = lo.iter().zip(&hi).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt();
                    0.1 * diam
                });
                Ok(Oracle::L2nw(L2nwEstimator::new(o.l2nw_capacity, d, m, bandwidth, o.l2nw_lambda)?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Scenario::from_toml_str("[plant]\nkind = \"jet_engine\"\nhorizn = 3\n").unwrap_err();
        assert!(matches!(err, RuntimeError::Config(ref s) if s.contains("horizn")), "{err}");
    }

    #[test]
    fn missing_plant_section() {
        let err = Scenario::from_toml_str("[controller]\nhorizon = 5\n").unwrap_err();
        assert!(matches!(err, RuntimeError::Config(ref s) if s.contains("plant")), "{err}");
    }

    #[test]
    fn defaults_round_trip() {
        let s = Scenario::from_toml_str("[plant]\n").unwrap();
        assert_eq!(s.controller.horizon, 20);
        assert_eq!(s.schedule.copy_period, 50);
        assert_eq!(s.schedule.buffer_capacity, 2000);
        assert_eq!(Scenario::from_toml_str(&s.to_toml_string()).unwrap(), s);
    }

    #[test]
    fn min_fill_is_at_least_the_batch() {
        let s = ScheduleConfig { fill_fraction: 0.01, ..Default::default() };
        assert_eq!(s.min_fill(), 256);
        let s = ScheduleConfig { fill_fraction: 0.5, ..Default::default() };
        assert_eq!(s.min_fill(), 1000);
    }
}
