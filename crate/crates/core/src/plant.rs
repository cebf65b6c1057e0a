//! Plant models: the uncertain linear system `x⁺ = A x + B u + h(x, u)` and the
//! Moore-Greitzer compressor used as its ground truth.
//!
//! The compressor state is `(z, y, r, ṙ)`: mass flow, pressure rise, throttle
//! opening and throttle rate. The throttle follows a second-order actuator
//! `r̈ = ω_n²(u − r) − 2ζω_n ṙ`, so the rate bound on `ṙ` is a plain state bound.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{expm, spectral_radius};
use crate::polytope::{Polytope, PolytopeError};

/// Equilibrium of the compressor with the default parameters.
pub const EQUILIBRIUM_STATE: [f64; 4] = [0.5, 1.6875, 1.1547, 0.0];
pub const EQUILIBRIUM_INPUT: f64 = 1.1547;

/// Magnitude guard on every state component passed to the vector field.
pub const DOMAIN_GUARD: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("state outside the model domain: {0}")]
    DomainError(String),
    #[error("not an equilibrium: residual {residual:e}")]
    NotEquilibrium { residual: f64 },
    #[error("(A, B) is not stabilizable")]
    NotStabilizable,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("uncertainty set must be bounded and contain the origin")]
    BadDisturbanceSet,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
}

pub type Result<T> = std::result::Result<T, PlantError>;

/// Compressor and actuator constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MooreGreitzerParams {
    pub beta: f64,
    pub z_c: f64,
    /// Actuator damping ratio.
    pub zeta: f64,
    /// Actuator natural frequency in rad/s.
    pub omega_n: f64,
    /// Control sampling time in seconds.
    pub sample_time: f64,
    /// Take the throttle square root of the mass flow instead of the pressure rise.
    pub root_on_massflow: bool,
}

impl Default for MooreGreitzerParams {
    fn default() -> Self {
        Self {
            beta: 1.0,
            z_c: 0.0,
            zeta: std::f64::consts::FRAC_1_SQRT_2,
            omega_n: 10.0 * 10f64.sqrt(),
            sample_time: 0.05,
            root_on_massflow: false,
        }
    }
}

impl MooreGreitzerParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("beta", self.beta),
            ("zeta", self.zeta),
            ("omega_n", self.omega_n),
            ("sample_time", self.sample_time),
        ];
        for (name, v) in checks {
            if !(v.is_finite() && v > 0.0) {
                return Err(PlantError::InvalidParams(format!("{name} must be > 0, got {v}")));
            }
        }
        if !self.z_c.is_finite() {
            return Err(PlantError::InvalidParams("z_c must be finite".into()));
        }
        Ok(())
    }

    fn root_argument(&self, state: &[f64; 4]) -> f64 {
        if self.root_on_massflow {
            state[0]
        } else {
            state[1]
        }
    }
}

/// Continuous-time compressor vector field `(ż, ẏ, ṙ, r̈)`.
pub fn mg_rhs(state: &[f64; 4], u: f64, params: &MooreGreitzerParams) -> Result<[f64; 4]> {
    if state.iter().chain(std::iter::once(&u)).any(|v| !v.is_finite() || v.abs() > DOMAIN_GUARD) {
        return Err(PlantError::DomainError(format!("{state:?}, u = {u}")));
    }
    let [z, y, r, r_dot] = *state;
    let arg = params.root_argument(state);
    if arg < 0.0 {
        return Err(PlantError::DomainError(format!("negative square-root argument {arg}")));
    }
    let b2 = params.beta * params.beta;
    let wn = params.omega_n;
    Ok([
        -y + params.z_c + 1.0 + 1.5 * z - 0.5 * z * z * z,
        (z + 1.0 - r * arg.sqrt()) / b2,
        r_dot,
        wn * wn * (u - r) - 2.0 * params.zeta * wn * r_dot,
    ])
}

/// Analytic Jacobians `(∂f/∂x, ∂f/∂u)` of [`mg_rhs`].
pub fn mg_jacobian(
    state: &[f64; 4],
    params: &MooreGreitzerParams,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let [z, _, r, _] = *state;
    let arg = params.root_argument(state);
    if arg <= 0.0 {
        return Err(PlantError::DomainError(format!("square-root argument {arg} at the expansion point")));
    }
    let b2 = params.beta * params.beta;
    let wn = params.omega_n;
    let root = arg.sqrt();
    let d_root = -r / (2.0 * root * b2);
    let mut a = DMatrix::zeros(4, 4);
    a[(0, 0)] = 1.5 - 1.5 * z * z;
    a[(0, 1)] = -1.0;
    a[(1, 0)] = 1.0 / b2;
    if params.root_on_massflow {
        a[(1, 0)] += d_root;
    } else {
        a[(1, 1)] = d_root;
    }
    a[(1, 2)] = -root / b2;
    a[(2, 3)] = 1.0;
    a[(3, 2)] = -wn * wn;
    a[(3, 3)] = -2.0 * params.zeta * wn;
    let mut b = DMatrix::zeros(4, 1);
    b[(3, 0)] = wn * wn;
    Ok((a, b))
}

/// One classical fourth-order Runge-Kutta step of `ẋ = f(x)`.
pub fn rk4_step<const D: usize, E>(
    f: impl Fn(&[f64; D]) -> std::result::Result<[f64; D], E>,
    x: &[f64; D],
    dt: f64,
) -> std::result::Result<[f64; D], E> {
    let axpy = |a: &[f64; D], k: &[f64; D], s: f64| {
        let mut out = *a;
        for i in 0..D {
            out[i] += s * k[i];
        }
        out
    };
    let k1 = f(x)?;
    let k2 = f(&axpy(x, &k1, dt / 2.0))?;
    let k3 = f(&axpy(x, &k2, dt / 2.0))?;
    let k4 = f(&axpy(x, &k3, dt))?;
    let mut out = *x;
    for i in 0..D {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(out)
}

/// Fixed-step integrator advancing the compressor by one sampling period under a
/// zero-order-hold input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSimulator {
    pub params: MooreGreitzerParams,
    /// Integrator sub-steps per control period; `h_int = T / substeps`.
    pub substeps: usize,
}

impl TruthSimulator {
    pub const DEFAULT_SUBSTEPS: usize = 10;

    pub fn new(params: MooreGreitzerParams) -> Self {
        Self { params, substeps: Self::DEFAULT_SUBSTEPS }
    }

    pub fn with_substeps(mut self, substeps: usize) -> Self {
        assert!(substeps >= 1, "at least one integrator sub-step");
        self.substeps = substeps;
        self
    }

    pub fn h_int(&self) -> f64 {
        self.params.sample_time / self.substeps as f64
    }

    pub fn step(&self, state: &[f64; 4], u: f64) -> Result<[f64; 4]> {
        let h = self.h_int();
        let mut x = *state;
        for _ in 0..self.substeps {
            x = rk4_step(|s| mg_rhs(s, u, &self.params), &x, h)?;
        }
        Ok(x)
    }
}

/// Exact zero-order-hold discretisation through the augmented exponential
/// `exp([[A_c, B_c], [0, 0]] T) = [[A, B], [0, I]]`.
pub fn zoh_discretize(
    a_c: &DMatrix<f64>,
    b_c: &DMatrix<f64>,
    sample_time: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = a_c.nrows();
    let m = b_c.ncols();
    let mut aug = DMatrix::zeros(d + m, d + m);
    aug.view_mut((0, 0), (d, d)).copy_from(a_c);
    aug.view_mut((0, d), (d, m)).copy_from(b_c);
    let e = expm(&(aug * sample_time));
    (e.view((0, 0), (d, d)).into_owned(), e.view((0, d), (d, m)).into_owned())
}

/// PBH test: every eigenvalue with `|λ| ≥ 1` must satisfy `rank [λI − A, B] = d`.
pub fn is_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let d = a.nrows();
    let m = b.ncols();
    let scale = a.amax().max(b.amax()).max(1.0);
    for lambda in a.complex_eigenvalues().iter() {
        if lambda.norm() < 1.0 {
            continue;
        }
        let mut pbh = DMatrix::<Complex<f64>>::zeros(d, d + m);
        for i in 0..d {
            for j in 0..d {
                let diag = if i == j { *lambda } else { Complex::new(0.0, 0.0) };
                pbh[(i, j)] = diag - Complex::new(a[(i, j)], 0.0);
            }
            for j in 0..m {
                pbh[(i, d + j)] = Complex::new(b[(i, j)], 0.0);
            }
        }
        let sv = pbh.singular_values();
        let rank = sv.iter().filter(|s| **s > 1e-9 * scale).count();
        if rank < d {
            return false;
        }
    }
    true
}

/// Nominal discrete-time model with its constraint and uncertainty sets.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub state_set: Polytope,
    pub input_set: Polytope,
    pub disturbance_set: Polytope,
}

impl PlantModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        state_set: Polytope,
        input_set: Polytope,
        disturbance_set: Polytope,
    ) -> Result<Self> {
        let d = a.nrows();
        if !a.is_square() || b.nrows() != d {
            return Err(PlantError::Dimension(format!(
                "A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        if state_set.dim() != d || disturbance_set.dim() != d || input_set.dim() != b.ncols() {
            return Err(PlantError::Dimension("constraint set dimensions".into()));
        }
        if !is_stabilizable(&a, &b) {
            return Err(PlantError::NotStabilizable);
        }
        Self::check_disturbance_set(&disturbance_set)?;
        Ok(Self { a, b, state_set, input_set, disturbance_set })
    }

    fn check_disturbance_set(w: &Polytope) -> Result<()> {
        if !w.is_bounded() || !w.contains(&DVector::zeros(w.dim())) {
            return Err(PlantError::BadDisturbanceSet);
        }
        Ok(())
    }

    pub fn with_disturbance_set(mut self, w: Polytope) -> Result<Self> {
        if w.dim() != self.state_dim() {
            return Err(PlantError::Dimension("uncertainty set dimension".into()));
        }
        Self::check_disturbance_set(&w)?;
        self.disturbance_set = w;
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    /// `A, B` as CSV blocks for audit.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("matrix,row");
        for j in 0..self.state_dim().max(self.input_dim()) {
            s.push_str(&format!(",c{j}"));
        }
        s.push('\n');
        for (name, m) in [("A", &self.a), ("B", &self.b)] {
            for i in 0..m.nrows() {
                let vals: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
                s.push_str(&format!("{name},{i},{}\n", vals.join(",")));
            }
        }
        s
    }
}

/// Realised uncertainty sample `h = x⁺ − A x − B u`; this is the training label.
pub fn truth_residual(
    x_t: &DVector<f64>,
    u_t: &DVector<f64>,
    x_next: &DVector<f64>,
    model: &PlantModel,
) -> DVector<f64> {
    x_next - model.predict(x_t, u_t)
}

/// Compressor state bounds in absolute coordinates, `(lower, upper)`.
pub fn compressor_state_bounds() -> ([f64; 4], [f64; 4]) {
    ([0.0, 1.1875, 0.1547, -20.0], [1.0, 2.1875, 2.1547, 20.0])
}

pub fn compressor_input_bounds() -> (f64, f64) {
    (0.1547, 2.1547)
}

/// The compressor around an equilibrium, in deviation coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct JetEngine {
    pub sim: TruthSimulator,
    pub x_e: [f64; 4],
    pub u_e: f64,
    /// Linearised model with state/input sets shifted to deviation coordinates;
    /// its uncertainty set starts as `{0}` until [`estimate_w`] fills it in.
    pub model: PlantModel,
}

/// Linearises the compressor at `(x_e, u_e)` and discretises with exact ZOH.
pub fn linearize_discretize(
    params: &MooreGreitzerParams,
    x_e: &[f64; 4],
    u_e: f64,
) -> Result<PlantModel> {
    params.validate()?;
    let f = mg_rhs(x_e, u_e, params)?;
    let residual = f.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if residual >= 1e-6 {
        return Err(PlantError::NotEquilibrium { residual });
    }
    let (a_c, b_c) = mg_jacobian(x_e, params)?;
    let (a, b) = zoh_discretize(&a_c, &b_c, params.sample_time);
    let (lo, hi) = compressor_state_bounds();
    let lo: Vec<f64> = (0..4).map(|i| lo[i] - x_e[i]).collect();
    let hi: Vec<f64> = (0..4).map(|i| hi[i] - x_e[i]).collect();
    let (ulo, uhi) = compressor_input_bounds();
    PlantModel::new(
        a,
        b,
        Polytope::from_box(&lo, &hi)?,
        Polytope::from_box(&[ulo - u_e], &[uhi - u_e])?,
        Polytope::origin(4),
    )
}

impl JetEngine {
    pub fn new(sim: TruthSimulator, x_e: [f64; 4], u_e: f64) -> Result<Self> {
        let model = linearize_discretize(&sim.params, &x_e, u_e)?;
        Ok(Self { sim, x_e, u_e, model })
    }

    pub fn with_defaults(params: MooreGreitzerParams) -> Result<Self> {
        Self::new(TruthSimulator::new(params), EQUILIBRIUM_STATE, EQUILIBRIUM_INPUT)
    }

    pub fn to_absolute(&self, dx: &DVector<f64>) -> [f64; 4] {
        std::array::from_fn(|i| self.x_e[i] + dx[i])
    }

    pub fn to_deviation(&self, x: &[f64; 4]) -> DVector<f64> {
        DVector::from_fn(4, |i, _| x[i] - self.x_e[i])
    }

    /// Truth step in deviation coordinates.
    pub fn step_deviation(&self, dx: &DVector<f64>, du: &DVector<f64>) -> Result<DVector<f64>> {
        let next = self.sim.step(&self.to_absolute(dx), self.u_e + du[0])?;
        Ok(self.to_deviation(&next))
    }

    /// Equilibrium and `A, B` as CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("quantity,z,y,r,r_dot\n");
        s.push_str(&format!(
            "x_e,{},{},{},{}\nu_e,{},,,\n",
            self.x_e[0], self.x_e[1], self.x_e[2], self.x_e[3], self.u_e
        ));
        s.push_str(&self.model.to_csv());
        s
    }
}

/// Radical inverse of `index` in base `base` (van der Corput / Halton component).
fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut out = 0.0;
    let mut f = inv;
    while index > 0 {
        out += (index % base) as f64 * f;
        index /= base;
        f *= inv;
    }
    out
}

const HALTON_PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

/// Default inflation applied to the sampled uncertainty box.
pub const DEFAULT_W_INFLATION: f64 = 1.1;

/// Axis-aligned box covering `truth_residual` over a deterministic sweep of
/// `X × U` (all box vertices followed by a Halton sequence), inflated about the
/// origin by `inflation`.
///
/// `truth` maps a deviation pair `(x, u)` to the next deviation state.
pub fn estimate_w(
    model: &PlantModel,
    truth: impl Fn(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
    samples: usize,
    inflation: f64,
) -> Result<Polytope> {
    let d = model.state_dim();
    let m = model.input_dim();
    if d + m > HALTON_PRIMES.len() {
        return Err(PlantError::Dimension("too many dimensions for the Halton sweep".into()));
    }
    if samples < 1000 {
        return Err(PlantError::InvalidParams(format!("need at least 1000 samples, got {samples}")));
    }
    let (xlo, xhi) = model.state_set.bounding_box()?;
    let (ulo, uhi) = model.input_set.bounding_box()?;
    let lo: Vec<f64> = xlo.iter().chain(ulo.iter()).copied().collect();
    let hi: Vec<f64> = xhi.iter().chain(uhi.iter()).copied().collect();
    let n = d + m;

    let mut h_lo = vec![0.0f64; d];
    let mut h_hi = vec![0.0f64; d];
    let mut visit = |p: Vec<f64>| -> Result<()> {
        let x = DVector::from_column_slice(&p[..d]);
        let u = DVector::from_column_slice(&p[d..]);
        if !model.state_set.contains(&x) || !model.input_set.contains(&u) {
            return Ok(());
        }
        let h = truth_residual(&x, &u, &truth(&x, &u)?, model);
        for i in 0..d {
            h_lo[i] = h_lo[i].min(h[i]);
            h_hi[i] = h_hi[i].max(h[i]);
        }
        Ok(())
    };
    for corner in 0..(1u64 << n) {
        visit((0..n).map(|i| if corner >> i & 1 == 1 { hi[i] } else { lo[i] }).collect())?;
    }
    for k in 1..=samples as u64 {
        visit(
            (0..n)
                .map(|i| lo[i] + (hi[i] - lo[i]) * radical_inverse(k, HALTON_PRIMES[i]))
                .collect(),
        )?;
    }
    let lo: Vec<f64> = h_lo.iter().map(|v| v * inflation).collect();
    let hi: Vec<f64> = h_hi.iter().map(|v| v * inflation).collect();
    Ok(Polytope::from_box(&lo, &hi)?)
}

/// Half-widths of an axis-aligned box, `max(|lower|, |upper|)` per coordinate.
pub fn box_half_widths(p: &Polytope) -> Result<DVector<f64>> {
    let (lo, hi) = p.bounding_box()?;
    Ok(lo.zip_map(&hi, |a, b| a.abs().max(b.abs())))
}

/// Spectral radius of `A` (open-loop stability diagnostics).
pub fn open_loop_radius(model: &PlantModel) -> f64 {
    spectral_radius(&model.a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dmat, dvec};

    fn params() -> MooreGreitzerParams {
        MooreGreitzerParams::default()
    }

    #[test]
    fn equilibrium_residual_is_tiny() {
        let f = mg_rhs(&EQUILIBRIUM_STATE, EQUILIBRIUM_INPUT, &params()).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1e-3));
        assert!(f.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-6);
        // Mass-flow equation balances exactly at z = 0.5, y = 1.6875.
        assert_eq!(f[0], 0.0);
    }

    #[test]
    fn literal_root_on_massflow_misses_the_equilibrium() {
        let p = MooreGreitzerParams { root_on_massflow: true, ..params() };
        let f = mg_rhs(&EQUILIBRIUM_STATE, EQUILIBRIUM_INPUT, &p).unwrap();
        assert!(f[1].abs() > 0.6);
        assert!(matches!(
            linearize_discretize(&p, &EQUILIBRIUM_STATE, EQUILIBRIUM_INPUT),
            Err(PlantError::NotEquilibrium { .. })
        ));
    }

    #[test]
    fn throttle_term_vanishes_when_closed() {
        let f = mg_rhs(&[0.0, 1.3, 0.0, 0.0], 0.0, &params()).unwrap();
        assert_eq!(f[1], 1.0);
    }

    #[test]
    fn actuator_equilibrium() {
        let u = 0.8;
        let f = mg_rhs(&[0.5, 1.6875, u, 0.0], u, &params()).unwrap();
        assert_eq!(f[3], 0.0);
        let f = mg_rhs(&[0.5, 1.6875, u + 0.1, 0.0], u, &params()).unwrap();
        assert!(f[3] != 0.0);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(mg_rhs(&[0.5, -0.1, 1.0, 0.0], 1.0, &params()), Err(PlantError::DomainError(_))));
        assert!(matches!(mg_rhs(&[2e6, 1.0, 1.0, 0.0], 1.0, &params()), Err(PlantError::DomainError(_))));
        let p = MooreGreitzerParams { root_on_massflow: true, ..params() };
        assert!(matches!(mg_rhs(&[-0.1, 1.0, 1.0, 0.0], 1.0, &p), Err(PlantError::DomainError(_))));
    }

    #[test]
    fn step_truth_holds_equilibrium() {
        let sim = TruthSimulator::new(params());
        // Use the exact throttle equilibrium so the fixed point is exact.
        let r = 1.5 / 1.6875f64.sqrt();
        let x = [0.5, 1.6875, r, 0.0];
        let next = sim.step(&x, r).unwrap();
        let diff = (0..4).map(|i| (next[i] - x[i]).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-8, "drift {diff}");
    }

    #[test]
    fn rk4_matches_exponential_decay() {
        let mut x = [1.0f64];
        for _ in 0..10 {
            x = rk4_step(|s: &[f64; 1]| Ok::<_, ()>([-s[0]]), &x, 0.005).unwrap();
        }
        assert!((x[0] - (-0.05f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn rk4_self_convergence() {
        let x0 = [0.5 + 0.2, 1.6875 - 0.1, 1.1547 + 0.3, 2.0];
        let u = 1.0;
        let run = |substeps| TruthSimulator::new(params()).with_substeps(substeps).step(&x0, u).unwrap();
        let (c, m, f) = (run(10), run(20), run(40));
        let e1 = (0..4).map(|i| (c[i] - f[i]).abs()).fold(0.0, f64::max);
        let e2 = (0..4).map(|i| (m[i] - f[i]).abs()).fold(0.0, f64::max);
        let ratio = (e1 - e2) / (e2 - 0.0).max(1e-300);
        // Error against the finest run: (c − f) ≈ (1 − 1/256)·C h⁴, (m − f) ≈ (1/16 − 1/256)·C h⁴.
        assert!(ratio > 8.0, "self-convergence ratio {ratio}");
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let x = [0.42, 1.71, 1.05, 0.7];
        let u = 0.9;
        let p = params();
        let (a, b) = mg_jacobian(&x, &p).unwrap();
        let eps = 1e-6;
        for j in 0..5 {
            let mut xp = x;
            let mut xm = x;
            let (mut up, mut um) = (u, u);
            if j < 4 {
                xp[j] += eps;
                xm[j] -= eps;
            } else {
                up += eps;
                um -= eps;
            }
            let fp = mg_rhs(&xp, up, &p).unwrap();
            let fm = mg_rhs(&xm, um, &p).unwrap();
            for i in 0..4 {
                let fd = (fp[i] - fm[i]) / (2.0 * eps);
                let an = if j < 4 { a[(i, j)] } else { b[(i, 0)] };
                let rel = (fd - an).abs() / an.abs().max(1.0);
                assert!(rel < 1e-6, "entry ({i},{j}): fd {fd}, analytic {an}");
            }
        }
    }

    #[test]
    fn jacobian_structure_at_equilibrium() {
        let (a, b) = mg_jacobian(&EQUILIBRIUM_STATE, &params()).unwrap();
        assert!((a[(0, 0)] - 1.125).abs() < 1e-15);
        assert_eq!(b[(0, 0)], 0.0);
        assert_eq!(b[(1, 0)], 0.0);
        assert_eq!(b[(2, 0)], 0.0);
        assert!((b[(3, 0)] - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn scalar_zoh_is_analytic() {
        let (lambda, bc, t) = (-1.7, 0.6, 0.05);
        let (a, b) = zoh_discretize(&dmat(1, 1, &[lambda]), &dmat(1, 1, &[bc]), t);
        assert!((a[(0, 0)] - (lambda * t).exp()).abs() < 1e-14);
        assert!((b[(0, 0)] - ((lambda * t).exp() - 1.0) * bc / lambda).abs() < 1e-14);
    }

    #[test]
    fn stabilizability() {
        assert!(!is_stabilizable(&dmat(1, 1, &[1.2]), &dmat(1, 1, &[0.0])));
        assert!(is_stabilizable(&dmat(1, 1, &[0.5]), &dmat(1, 1, &[0.0])));
        let jet = JetEngine::with_defaults(params()).unwrap();
        assert!(is_stabilizable(&jet.model.a, &jet.model.b));
        assert!(open_loop_radius(&jet.model) > 1.0);
    }

    #[test]
    fn residual_of_linear_truth_is_zero() {
        let jet = JetEngine::with_defaults(params()).unwrap();
        let x = dvec(&[0.1, -0.2, 0.3, 1.0]);
        let u = dvec(&[0.2]);
        let next = jet.model.predict(&x, &u);
        assert!(truth_residual(&x, &u, &next, &jet.model).amax() == 0.0);
    }

    #[test]
    fn residual_at_equilibrium_is_tiny() {
        let jet = JetEngine::with_defaults(params()).unwrap();
        let x = DVector::zeros(4);
        let u = DVector::zeros(1);
        let next = jet.step_deviation(&x, &u).unwrap();
        assert!(truth_residual(&x, &u, &next, &jet.model).amax() < 1e-6);
    }

    #[test]
    fn residual_off_equilibrium_matches_refined_integration() {
        let jet = JetEngine::with_defaults(params()).unwrap();
        let fine = JetEngine { sim: jet.sim.with_substeps(20), ..jet.clone() };
        let x = dvec(&[0.3, 0.0, 0.0, 0.0]);
        let u = DVector::zeros(1);
        let h = truth_residual(&x, &u, &jet.step_deviation(&x, &u).unwrap(), &jet.model);
        let h_fine = truth_residual(&x, &u, &fine.step_deviation(&x, &u).unwrap(), &fine.model);
        assert!((&h - &h_fine).amax() < 1e-8);
        // The cubic mass-flow term makes the residual clearly nonzero here.
        assert!(h[0].abs() > 1e-4);
    }

    #[test]
    fn estimate_w_of_linear_truth_is_origin() {
        let jet = JetEngine::with_defaults(params()).unwrap();
        let model = jet.model.clone();
        let w = estimate_w(&model, |x, u| Ok(model.predict(x, u)), 1000, 1.1).unwrap();
        let (lo, hi) = w.bounding_box().unwrap();
        assert!(lo.amax() == 0.0 && hi.amax() == 0.0);
        assert!(matches!(
            estimate_w(&model, |x, u| Ok(model.predict(x, u)), 10, 1.1),
            Err(PlantError::InvalidParams(_))
        ));
    }

    #[test]
    fn inflation_scales_the_raw_box() {
        let model = PlantModel::new(
            dmat(1, 1, &[0.5]),
            dmat(1, 1, &[1.0]),
            Polytope::from_box(&[-1.0], &[1.0]).unwrap(),
            Polytope::from_box(&[-1.0], &[1.0]).unwrap(),
            Polytope::origin(1),
        )
        .unwrap();
        // h = 0.1·x, so the raw box is [−0.1, 0.1].
        let w = estimate_w(&model, |x, u| Ok(model.predict(x, u) + x * 0.1), 1000, 1.1).unwrap();
        let (lo, hi) = w.bounding_box().unwrap();
        assert!((lo[0] + 0.11).abs() < 1e-12 && (hi[0] - 0.11).abs() < 1e-12);
    }

    #[test]
    fn plant_model_validation() {
        let x = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
        let offset_w = Polytope::from_box(&[0.1], &[0.2]).unwrap();
        assert_eq!(
            PlantModel::new(dmat(1, 1, &[0.5]), dmat(1, 1, &[1.0]), x.clone(), x.clone(), offset_w),
            Err(PlantError::BadDisturbanceSet)
        );
        assert_eq!(
            PlantModel::new(dmat(1, 1, &[2.0]), dmat(1, 1, &[0.0]), x.clone(), x, Polytope::origin(1)),
            Err(PlantError::NotStabilizable)
        );
    }

    #[test]
    fn deviation_constraints_match_the_absolute_bounds() {
        let jet = JetEngine::with_defaults(params()).unwrap();
        let (lo, hi) = jet.model.state_set.bounding_box().unwrap();
        assert!((lo[0] + 0.5).abs() < 1e-12 && (hi[0] - 0.5).abs() < 1e-12);
        assert!((lo[1] + 0.5).abs() < 1e-12 && (hi[1] - 0.5).abs() < 1e-12);
        assert!((lo[2] + 1.0).abs() < 1e-12 && (hi[2] - 1.0).abs() < 1e-12);
        assert!((lo[3] + 20.0).abs() < 1e-12 && (hi[3] - 20.0).abs() < 1e-12);
        let (ulo, uhi) = jet.model.input_set.bounding_box().unwrap();
        assert!((ulo[0] + 1.0).abs() < 1e-12 && (uhi[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn halton_components() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(3, 2), 0.75);
        assert!((radical_inverse(5, 3) - 7.0 / 9.0).abs() < 1e-15);
    }
}
