//! Tube MPC with a learned cost-side model.
//!
//! Decisions are the perturbations `c_i` of the pre-stabilised input
//! `v_i = K z̄_i + c_i`. Constraints act on the nominal trajectory
//! `z̄_{i+1} = A z̄_i + B v_i` only, so they are linear in `c`; the oracle enters
//! through the cost on the learned trajectory `z_{i+1} = A z_i + B v_i + ĥ(z_i, v_i)`.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::linalg::{is_schur_stable, max_abs, min_sym_eigenvalue, spectral_radius, symmetrize};
use crate::oracle::Oracle;
use crate::plant::{is_stabilizable, PlantModel};
use crate::polytope::{
    max_invariant_set, Polytope, PolytopeError, TighteningData,
    DEFAULT_INVARIANT_MAX_ITER,
};
use crate::qp::{qp_solve, write_block, QpError, QpProblem, QpSettings, QpStatus, WarmStart};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("Riccati iteration stalled at residual {residual:e}")]
    RiccatiDiverged { residual: f64 },
    #[error("closed loop is not Schur stable (spectral radius {radius})")]
    NotSchurStable { radius: f64 },
    #[error("(A, B) is not stabilizable")]
    NotStabilizable,
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error("tightened {set} constraint set is empty at stage {stage}")]
    EmptyTightenedSet { stage: usize, set: &'static str },
    #[error("MPC program is infeasible")]
    Infeasible,
    #[error("QP solver failed ({0:?}) with no fallback available")]
    SolverFailure(QpStatus),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
}

pub type Result<T> = std::result::Result<T, MpcError>;

const RICCATI_TOL: f64 = 1e-10;
const RICCATI_MAX_ITER: usize = 10_000;
const SQP_STEP_TOL: f64 = 1e-8;
pub const DEFAULT_SQP_MAX_ITER: usize = 5;
const HESSIAN_EIG_FLOOR: f64 = 1e-9;

/// LQR gain (`u = K x`) from the fixed point of the discrete Riccati map.
pub fn synthesize_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (d, m) = (a.nrows(), b.ncols());
    if a.shape() != (d, d) || b.nrows() != d || q.shape() != (d, d) || r.shape() != (m, m) {
        return Err(MpcError::InvalidConfig("Riccati dimensions".into()));
    }
    if min_sym_eigenvalue(q) < -1e-12 {
        return Err(MpcError::InvalidConfig("Q must be positive semidefinite".into()));
    }
    if min_sym_eigenvalue(r) <= 0.0 {
        return Err(MpcError::InvalidConfig("R must be positive definite".into()));
    }
    if !is_stabilizable(a, b) {
        return Err(MpcError::NotStabilizable);
    }
    let gain_of = |p: &DMatrix<f64>| -> Option<DMatrix<f64>> {
        let s = r + b.tr_mul(&(p * b));
        let rhs = b.tr_mul(&(p * a));
        s.lu().solve(&rhs).map(|k| -k)
    };
    let mut p = q.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..RICCATI_MAX_ITER {
        let k = gain_of(&p).ok_or(MpcError::RiccatiDiverged { residual })?;
        // Joseph form: Q + KᵀRK + (A+BK)ᵀP(A+BK), equal to the Riccati map at its optimum.
        let a_cl = a + b * &k;
        let next = symmetrize(&(q + k.tr_mul(&(r * &k)) + a_cl.tr_mul(&(&p * &a_cl))));
        residual = max_abs(&(&next - &p)) / max_abs(&next).max(1.0);
        p = next;
        if !residual.is_finite() {
            break;
        }
        if residual < RICCATI_TOL {
            let k = gain_of(&p).ok_or(MpcError::RiccatiDiverged { residual })?;
            let a_cl = a + b * &k;
            if !is_schur_stable(&a_cl) {
                return Err(MpcError::NotSchurStable { radius: spectral_radius(&a_cl) });
            }
            return Ok(k);
        }
    }
    Err(MpcError::RiccatiDiverged { residual })
}

/// `Σ_k (A_clᵀ)ᵏ Q_eff A_clᵏ` by doubling.
pub fn solve_lyapunov(a_cl: &DMatrix<f64>, q_eff: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !is_schur_stable(a_cl) {
        return Err(MpcError::NotSchurStable { radius: spectral_radius(a_cl) });
    }
    let mut s = q_eff.clone();
    let mut ak = a_cl.clone();
    for _ in 0..64 {
        s += ak.tr_mul(&(&s * &ak));
        ak = &ak * &ak;
        if max_abs(&ak) < 1e-17 {
            break;
        }
    }
    Ok(symmetrize(&s))
}

/// `P` for `(A+BK)ᵀP(A+BK) − P = −(Q + KᵀRK)`.
pub fn solve_lyapunov_p(
    model: &PlantModel,
    gain: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let a_cl = &model.a + &model.b * gain;
    solve_lyapunov(&a_cl, &(q + gain.tr_mul(&(r * gain))))
}

/// `‖A_clᵀPA_cl − P + Q + KᵀRK‖_∞`.
pub fn lyapunov_residual(
    model: &PlantModel,
    gain: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    let a_cl = &model.a + &model.b * gain;
    max_abs(&(a_cl.tr_mul(&(p * &a_cl)) - p + q + gain.tr_mul(&(r * gain))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub x_ref: DVector<f64>,
    pub u_ref: DVector<f64>,
    pub gain: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub sqp_max_iter: usize,
    pub qp: QpSettings,
}

impl ControllerConfig {
    /// LQR gain, Lyapunov terminal weight and the origin as reference.
    pub fn lqr(model: &PlantModel, q: DMatrix<f64>, r: DMatrix<f64>, horizon: usize) -> Result<Self> {
        let gain = synthesize_gain(&model.a, &model.b, &q, &r)?;
        let p = solve_lyapunov_p(model, &gain, &q, &r)?;
        Ok(Self {
            horizon,
            x_ref: DVector::zeros(model.state_dim()),
            u_ref: DVector::zeros(model.input_dim()),
            q,
            r,
            gain,
            p,
            sqp_max_iter: DEFAULT_SQP_MAX_ITER,
            qp: QpSettings::default(),
        })
    }

    pub fn closed_loop(&self, model: &PlantModel) -> DMatrix<f64> {
        &model.a + &model.b * &self.gain
    }

    pub fn validate(&self, model: &PlantModel) -> Result<()> {
        let (d, m) = (model.state_dim(), model.input_dim());
        if self.horizon == 0 {
            return Err(MpcError::InvalidConfig("horizon must be at least 1".into()));
        }
        if self.q.shape() != (d, d) || self.p.shape() != (d, d) || self.r.shape() != (m, m) {
            return Err(MpcError::InvalidConfig("cost matrix dimensions".into()));
        }
        if self.gain.shape() != (m, d) || self.x_ref.len() != d || self.u_ref.len() != m {
            return Err(MpcError::InvalidConfig("gain or reference dimensions".into()));
        }
        if min_sym_eigenvalue(&self.q) < -1e-12 || min_sym_eigenvalue(&self.r) <= 0.0 {
            return Err(MpcError::InvalidConfig("Q must be PSD and R PD".into()));
        }
        let a_cl = self.closed_loop(model);
        if !is_schur_stable(&a_cl) {
            return Err(MpcError::NotSchurStable { radius: spectral_radius(&a_cl) });
        }
        let res = lyapunov_residual(model, &self.gain, &self.q, &self.r, &self.p);
        if res > 1e-10 * max_abs(&self.p).max(1.0) {
            return Err(MpcError::InvalidConfig(format!("P violates the Lyapunov equation ({res:e})")));
        }
        let eq = (model.predict(&self.x_ref, &self.u_ref) - &self.x_ref).amax();
        if eq > 1e-9 {
            return Err(MpcError::InvalidConfig(format!("reference is not an equilibrium ({eq:e})")));
        }
        Ok(())
    }
}

/// Tightening margins and terminal set for `cfg`. Ω is the maximal robust
/// invariant set inside `𝒳` and `K⁻¹𝕌`; the problem tightens it by `R_N`.
pub fn design_sets(model: &PlantModel, cfg: &ControllerConfig) -> Result<(Polytope, TighteningData)> {
    let a_cl = cfg.closed_loop(model);
    let w = &model.disturbance_set;
    let omega = max_invariant_set(
        &a_cl,
        &model.state_set,
        &model.input_set,
        &cfg.gain,
        w,
        DEFAULT_INVARIANT_MAX_ITER,
    )?
    .require_converged(DEFAULT_INVARIANT_MAX_ITER)?;
    let margins = TighteningData::compute(
        &a_cl,
        &cfg.gain,
        w,
        &model.state_set,
        &model.input_set,
        &omega,
        cfg.horizon,
    )?;
    Ok((omega, margins))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpcStatus {
    Optimal,
    /// The shifted previous solution was applied.
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    /// `(c_0, …, c_{N−1})` stacked.
    pub c: DVector<f64>,
    /// `z̄_0..z̄_N`.
    pub nominal: Vec<DVector<f64>>,
    /// `v_0..v_{N−1}`.
    pub inputs: Vec<DVector<f64>>,
    /// `z_0..z_N`.
    pub learned: Vec<DVector<f64>>,
    /// `u_t = v_0`.
    pub u: DVector<f64>,
    pub cost: f64,
    pub status: MpcStatus,
    pub sqp_iterations: usize,
    pub qp_iterations: usize,
    pub ineq_duals: DVector<f64>,
    pub wall_time: f64,
}

/// `(c_1, …, c_{N−1}, 0)` with the shifted trajectories and duals.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedCandidate {
    pub c: DVector<f64>,
    pub nominal: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub ineq_duals: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbmpcProblem {
    model: PlantModel,
    cfg: ControllerConfig,
    margins: TighteningData,
    omega: Polytope,
    oracle: Oracle,
    /// `z̄ = Φ x + Γ c`, stacked over stages `0..=N`.
    phi: DMatrix<f64>,
    gamma: DMatrix<f64>,
    /// `v = Ψ x + Λ c`, stacked over stages `0..N`.
    psi: DMatrix<f64>,
    lambda: DMatrix<f64>,
    /// `G c ≤ g0 − Gx x`.
    g: DMatrix<f64>,
    g0: DVector<f64>,
    gx: DMatrix<f64>,
    /// Rows per stage `(state, input)` and terminal rows.
    stage_rows: (usize, usize),
    terminal_rows: usize,
    /// Nominal cost `½cᵀHc + (Hx x + h0)ᵀc + const`.
    hessian: DMatrix<f64>,
    grad_x: DMatrix<f64>,
    grad_0: DVector<f64>,
    /// Block diagonals of the cost weights.
    q_bar: DMatrix<f64>,
    r_bar: DMatrix<f64>,
}

fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut at = 0;
    for b in blocks {
        out.view_mut((at, at), b.shape()).copy_from(b);
        at += b.nrows();
    }
    out
}

/// Pre-assembles the program; fails on the first empty tightened set.
pub fn build_lbmpc(
    model: &PlantModel,
    cfg: ControllerConfig,
    omega: Polytope,
    margins: TighteningData,
    oracle: Oracle,
) -> Result<LbmpcProblem> {
    cfg.validate(model)?;
    let (d, m, n) = (model.state_dim(), model.input_dim(), cfg.horizon);
    if margins.horizon() != n {
        return Err(MpcError::InvalidConfig(format!(
            "margins cover {} stages, horizon is {n}",
            margins.horizon()
        )));
    }
    if omega.dim() != d || margins.terminal.len() != omega.n_rows() {
        return Err(MpcError::InvalidConfig("terminal set does not match its margins".into()));
    }
    for i in 0..n {
        if !model.state_set.tighten(&margins.state[i]).is_feasible() {
            return Err(MpcError::EmptyTightenedSet { stage: i, set: "state" });
        }
        if !model.input_set.tighten(&margins.input[i]).is_feasible() {
            return Err(MpcError::EmptyTightenedSet { stage: i, set: "input" });
        }
    }
    let omega_t = omega.tighten(&margins.terminal);
    if !omega_t.is_feasible() {
        return Err(MpcError::EmptyTightenedSet { stage: n, set: "terminal" });
    }
    // The reference must sit inside every tightened set.
    for i in 0..n {
        if !model.state_set.tighten(&margins.state[i]).contains(&cfg.x_ref)
            || !model.input_set.tighten(&margins.input[i]).contains(&cfg.u_ref)
        {
            return Err(MpcError::InvalidConfig(format!("reference outside tightened sets at stage {i}")));
        }
    }
    if !omega_t.contains(&cfg.x_ref) {
        return Err(MpcError::InvalidConfig("reference outside tightened terminal set".into()));
    }

    let a_cl = cfg.closed_loop(model);
    let nc = n * m;
    let mut phi = DMatrix::zeros((n + 1) * d, d);
    let mut gamma = DMatrix::zeros((n + 1) * d, nc);
    let mut psi = DMatrix::zeros(n * m, d);
    let mut lambda = DMatrix::zeros(n * m, nc);
    phi.view_mut((0, 0), (d, d)).fill_with_identity();
    for i in 0..n {
        let phi_i = phi.rows(i * d, d).into_owned();
        let gamma_i = gamma.rows(i * d, d).into_owned();
        psi.rows_mut(i * m, m).copy_from(&(&cfg.gain * &phi_i));
        let mut lam_i = &cfg.gain * &gamma_i;
        for j in 0..m {
            lam_i[(j, i * m + j)] += 1.0;
        }
        lambda.rows_mut(i * m, m).copy_from(&lam_i);
        phi.rows_mut((i + 1) * d, d).copy_from(&(&a_cl * &phi_i));
        let mut gamma_next = &a_cl * &gamma_i;
        gamma_next.view_mut((0, i * m), (d, m)).copy_from(&model.b);
        gamma.rows_mut((i + 1) * d, d).copy_from(&gamma_next);
    }

    let (fx, hx) = (model.state_set.normals(), model.state_set.offsets());
    let (fu, hu) = (model.input_set.normals(), model.input_set.offsets());
    let (sx, su, so) = (fx.nrows(), fu.nrows(), omega.n_rows());
    let rows = n * (sx + su) + so;
    let mut g = DMatrix::zeros(rows, nc);
    let mut gx = DMatrix::zeros(rows, d);
    let mut g0 = DVector::zeros(rows);
    let mut at = 0;
    for i in 0..n {
        g.rows_mut(at, sx).copy_from(&(fx * gamma.rows(i * d, d)));
        gx.rows_mut(at, sx).copy_from(&(fx * phi.rows(i * d, d)));
        g0.rows_mut(at, sx).copy_from(&(hx - &margins.state[i]));
        at += sx;
        g.rows_mut(at, su).copy_from(&(fu * lambda.rows(i * m, m)));
        gx.rows_mut(at, su).copy_from(&(fu * psi.rows(i * m, m)));
        g0.rows_mut(at, su).copy_from(&(hu - &margins.input[i]));
        at += su;
    }
    g.rows_mut(at, so).copy_from(&(omega.normals() * gamma.rows(n * d, d)));
    gx.rows_mut(at, so).copy_from(&(omega.normals() * phi.rows(n * d, d)));
    g0.rows_mut(at, so).copy_from(omega_t.offsets());

    let mut q_blocks: Vec<&DMatrix<f64>> = vec![&cfg.q; n];
    q_blocks.push(&cfg.p);
    let q_bar = block_diag(&q_blocks);
    let r_bar = block_diag(&vec![&cfg.r; n]);
    let x_ref_bar = DVector::from_fn((n + 1) * d, |i, _| cfg.x_ref[i % d]);
    let u_ref_bar = DVector::from_fn(n * m, |i, _| cfg.u_ref[i % m]);
    let hessian = symmetrize(&((gamma.tr_mul(&(&q_bar * &gamma)) + lambda.tr_mul(&(&r_bar * &lambda))) * 2.0));
    let grad_x = (gamma.tr_mul(&(&q_bar * &phi)) + lambda.tr_mul(&(&r_bar * &psi))) * 2.0;
    let grad_0 = -(gamma.tr_mul(&(&q_bar * &x_ref_bar)) + lambda.tr_mul(&(&r_bar * &u_ref_bar))) * 2.0;

    Ok(LbmpcProblem {
        model: model.clone(),
        cfg,
        margins,
        omega,
        oracle,
        phi,
        gamma,
        psi,
        lambda,
        g,
        g0,
        gx,
        stage_rows: (sx, su),
        terminal_rows: so,
        hessian,
        grad_x,
        grad_0,
        q_bar,
        r_bar,
    })
}

impl LbmpcProblem {
    pub fn model(&self) -> &PlantModel {
        &self.model
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn margins(&self) -> &TighteningData {
        &self.margins
    }

    pub fn terminal_set(&self) -> &Polytope {
        &self.omega
    }

    pub fn oracle(&self) -> &Oracle {
        &self.oracle
    }

    pub fn oracle_mut(&mut self) -> &mut Oracle {
        &mut self.oracle
    }

    pub fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    pub fn n_decisions(&self) -> usize {
        self.cfg.horizon * self.model.input_dim()
    }

    pub fn n_constraints(&self) -> usize {
        self.g.nrows()
    }

    /// Constraint slack `g0 − Gx x − G c` (non-negative when feasible).
    pub fn constraint_slack(&self, x: &DVector<f64>, c: &DVector<f64>) -> DVector<f64> {
        &self.g0 - &self.gx * x - &self.g * c
    }

    /// Largest constraint violation of `c` at `x` (≤ 0 when feasible).
    pub fn max_violation(&self, x: &DVector<f64>, c: &DVector<f64>) -> f64 {
        -self.constraint_slack(x, c).min()
    }

    /// Nominal trajectory and inputs by direct recursion.
    pub fn nominal_trajectory(&self, x: &DVector<f64>, c: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let (n, m) = (self.cfg.horizon, self.model.input_dim());
        let mut z = Vec::with_capacity(n + 1);
        let mut v = Vec::with_capacity(n);
        z.push(x.clone());
        for i in 0..n {
            let vi = &self.cfg.gain * &z[i] + c.rows(i * m, m);
            z.push(&self.model.a * &z[i] + &self.model.b * &vi);
            v.push(vi);
        }
        (z, v)
    }

    /// Learned trajectory `z_0..z_N` and, per stage, `∂z_i/∂c`.
    pub fn learned_trajectory(
        &self,
        x: &DVector<f64>,
        c: &DVector<f64>,
        with_jacobian: bool,
    ) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
        let (n, m, d) = (self.cfg.horizon, self.model.input_dim(), self.model.state_dim());
        let (_, v) = self.nominal_trajectory(x, c);
        let mut z = Vec::with_capacity(n + 1);
        let mut jac = Vec::with_capacity(if with_jacobian { n + 1 } else { 0 });
        z.push(x.clone());
        if with_jacobian {
            jac.push(DMatrix::zeros(d, n * m));
        }
        for i in 0..n {
            let base = &self.model.a * &z[i] + &self.model.b * &v[i];
            if with_jacobian {
                let (h, hx, hu) = self.oracle.predict_with_jacobian(&z[i], &v[i]);
                let dv = self.lambda.rows(i * m, m);
                let dz = (&self.model.a + hx) * &jac[i] + (&self.model.b + hu) * dv;
                jac.push(dz);
                z.push(base + h);
            } else {
                z.push(base + self.oracle.predict(&z[i], &v[i]));
            }
        }
        (z, jac)
    }

    fn stacked(vs: &[DVector<f64>]) -> DVector<f64> {
        let len: usize = vs.iter().map(|v| v.len()).sum();
        let mut out = DVector::zeros(len);
        let mut at = 0;
        for v in vs {
            out.rows_mut(at, v.len()).copy_from(v);
            at += v.len();
        }
        out
    }

    /// `ψ` on the given state and input trajectories.
    pub fn trajectory_cost(&self, z: &[DVector<f64>], v: &[DVector<f64>]) -> f64 {
        let n = self.cfg.horizon;
        let mut cost = 0.0;
        for i in 0..n {
            let dz = &z[i] - &self.cfg.x_ref;
            let dv = &v[i] - &self.cfg.u_ref;
            cost += dz.dot(&(&self.cfg.q * &dz)) + dv.dot(&(&self.cfg.r * &dv));
        }
        let dz = &z[n] - &self.cfg.x_ref;
        cost + dz.dot(&(&self.cfg.p * &dz))
    }

    /// `ψ` of `c` at `x` on the learned trajectory (nominal when the oracle is zero).
    pub fn cost(&self, x: &DVector<f64>, c: &DVector<f64>) -> f64 {
        let (_, v) = self.nominal_trajectory(x, c);
        let (z, _) = self.learned_trajectory(x, c, false);
        self.trajectory_cost(&z, &v)
    }

    fn linear_qp(&self, x: &DVector<f64>) -> QpProblem {
        QpProblem::new(
            self.hessian.clone(),
            &self.grad_x * x + &self.grad_0,
            self.g.clone(),
            &self.g0 - &self.gx * x,
        )
    }

    /// Gauss-Newton model of `ψ` about `c_k`.
    fn gauss_newton_qp(&self, x: &DVector<f64>, c_k: &DVector<f64>) -> QpProblem {
        let (n, d) = (self.cfg.horizon, self.model.state_dim());
        let (z, jac) = self.learned_trajectory(x, c_k, true);
        let mut jz = DMatrix::zeros((n + 1) * d, self.n_decisions());
        for (i, j) in jac.iter().enumerate() {
            jz.rows_mut(i * d, d).copy_from(j);
        }
        let x_ref_bar = DVector::from_fn((n + 1) * d, |i, _| self.cfg.x_ref[i % d]);
        let m = self.model.input_dim();
        let u_ref_bar = DVector::from_fn(n * m, |i, _| self.cfg.u_ref[i % m]);
        // Z(c) ≈ Z_k + J (c − c_k) = (Z_k − J c_k) + J c.
        let z_off = Self::stacked(&z) - &jz * c_k - x_ref_bar;
        let v_off = &self.psi * x - u_ref_bar;
        let h = (jz.tr_mul(&(&self.q_bar * &jz)) + self.lambda.tr_mul(&(&self.r_bar * &self.lambda))) * 2.0;
        let grad = (jz.tr_mul(&(&self.q_bar * z_off)) + self.lambda.tr_mul(&(&self.r_bar * v_off))) * 2.0;
        QpProblem::new(clip_psd(&symmetrize(&h)), grad, self.g.clone(), &self.g0 - &self.gx * x)
    }

    fn shifted_warm(&self, prev: Option<&MpcSolution>) -> Option<(WarmStart, DVector<f64>)> {
        let prev = prev?;
        if prev.c.len() != self.n_decisions() || prev.ineq_duals.len() != self.n_constraints() {
            return None;
        }
        let s = self.shift_solution(prev);
        Some((WarmStart { x: s.c.clone(), ineq_duals: Some(s.ineq_duals), eq_duals: None }, s.c))
    }

    fn package(
        &self,
        x: &DVector<f64>,
        c: DVector<f64>,
        status: MpcStatus,
        sqp_iterations: usize,
        qp_iterations: usize,
        ineq_duals: DVector<f64>,
        started: Instant,
    ) -> MpcSolution {
        let (nominal, inputs) = self.nominal_trajectory(x, &c);
        let (learned, _) = if self.oracle.is_zero() {
            (nominal.clone(), Vec::new())
        } else {
            self.learned_trajectory(x, &c, false)
        };
        let cost = self.trajectory_cost(&learned, &inputs);
        let u = inputs[0].clone();
        MpcSolution {
            c,
            nominal,
            inputs,
            learned,
            u,
            cost,
            status,
            sqp_iterations,
            qp_iterations,
            ineq_duals,
            wall_time: started.elapsed().as_secs_f64(),
        }
    }

    fn fallback(
        &self,
        x: &DVector<f64>,
        warm: Option<(WarmStart, DVector<f64>)>,
        status: QpStatus,
        sqp_iterations: usize,
        qp_iterations: usize,
        started: Instant,
    ) -> Result<MpcSolution> {
        match warm {
            Some((w, c_shift)) => Ok(self.package(
                x,
                c_shift,
                MpcStatus::Fallback,
                sqp_iterations,
                qp_iterations,
                w.ineq_duals.unwrap_or_else(|| DVector::zeros(self.n_constraints())),
                started,
            )),
            None if status == QpStatus::Infeasible => Err(MpcError::Infeasible),
            None => Err(MpcError::SolverFailure(status)),
        }
    }

    /// Single QP on the nominal trajectory, warm-started from the shifted `prev`.
    pub fn solve_linear_mpc(&self, x: &DVector<f64>, prev: Option<&MpcSolution>) -> Result<MpcSolution> {
        let started = Instant::now();
        let warm = self.shifted_warm(prev);
        let qp = self.linear_qp(x);
        let sol = qp_solve(&qp, warm.as_ref().map(|w| &w.0), &self.cfg.qp)?;
        if sol.status != QpStatus::Optimal {
            return self.fallback(x, warm, sol.status, 1, sol.iterations, started);
        }
        Ok(self.package(x, sol.x, MpcStatus::Optimal, 1, sol.iterations, sol.ineq_duals, started))
    }

    /// Gauss-Newton SQP on the learned trajectory. The Zero oracle takes the
    /// linear path so both produce identical output.
    pub fn solve_lbmpc(&self, x: &DVector<f64>, prev: Option<&MpcSolution>) -> Result<MpcSolution> {
        if self.oracle.is_zero() {
            return self.solve_linear_mpc(x, prev);
        }
        let started = Instant::now();
        let warm = self.shifted_warm(prev);
        // Without a previous solution, start from the nominal optimum.
        let (mut c, mut duals, mut qp_iters) = match &warm {
            Some((w, c_shift)) => (c_shift.clone(), w.ineq_duals.clone(), 0),
            None => {
                let sol = qp_solve(&self.linear_qp(x), None, &self.cfg.qp)?;
                if sol.status != QpStatus::Optimal {
                    return self.fallback(x, None, sol.status, 0, sol.iterations, started);
                }
                (sol.x, Some(sol.ineq_duals), sol.iterations)
            }
        };
        let mut iters = 0;
        let mut last_duals = duals.clone().unwrap_or_else(|| DVector::zeros(self.n_constraints()));
        while iters < self.cfg.sqp_max_iter.max(1) {
            iters += 1;
            let qp = self.gauss_newton_qp(x, &c);
            let w = WarmStart { x: c.clone(), ineq_duals: duals.clone(), eq_duals: None };
            let sol = qp_solve(&qp, Some(&w), &self.cfg.qp)?;
            qp_iters += sol.iterations;
            if sol.status != QpStatus::Optimal || sol.x.iter().any(|v| !v.is_finite()) {
                return self.fallback(x, warm, sol.status, iters, qp_iters, started);
            }
            let step = (&sol.x - &c).amax();
            c = sol.x;
            last_duals = sol.ineq_duals.clone();
            duals = Some(sol.ineq_duals);
            if step < SQP_STEP_TOL {
                break;
            }
        }
        Ok(self.package(x, c, MpcStatus::Optimal, iters, qp_iters, last_duals, started))
    }

    /// `(c_1, …, c_{N−1}, 0)` and the shifted trajectories and duals.
    pub fn shift_solution(&self, prev: &MpcSolution) -> ShiftedCandidate {
        let (n, m) = (self.cfg.horizon, self.model.input_dim());
        let mut c = DVector::zeros(n * m);
        if n > 1 {
            c.rows_mut(0, (n - 1) * m).copy_from(&prev.c.rows(m, (n - 1) * m));
        }
        let a_cl = self.cfg.closed_loop(&self.model);
        let mut nominal: Vec<DVector<f64>> = prev.nominal.iter().skip(1).cloned().collect();
        let last = nominal.last().cloned().unwrap_or_else(|| prev.nominal[0].clone());
        nominal.push(&a_cl * &last);
        let mut inputs: Vec<DVector<f64>> = prev.inputs.iter().skip(1).cloned().collect();
        inputs.push(&self.cfg.gain * &last);

        let (sx, su) = self.stage_rows;
        let per = sx + su;
        let mut duals = DVector::zeros(self.n_constraints());
        if prev.ineq_duals.len() == duals.len() {
            if n > 1 {
                duals.rows_mut(0, (n - 1) * per).copy_from(&prev.ineq_duals.rows(per, (n - 1) * per));
            }
            let t = self.terminal_rows;
            duals.rows_mut(n * per, t).copy_from(&prev.ineq_duals.rows(n * per, t));
        }
        ShiftedCandidate { c, nominal, inputs, ineq_duals: duals }
    }

    /// QP matrices for offline audit, as CSV blocks.
    pub fn to_csv_blocks(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# horizon {}, decisions {}, constraints {}", self.horizon(), self.n_decisions(), self.n_constraints());
        write_block(&mut s, "H", &self.hessian);
        write_block(&mut s, "grad_x", &self.grad_x);
        write_block(&mut s, "grad_0", &DMatrix::from_column_slice(self.grad_0.len(), 1, self.grad_0.as_slice()));
        write_block(&mut s, "G", &self.g);
        write_block(&mut s, "Gx", &self.gx);
        write_block(&mut s, "g0", &DMatrix::from_column_slice(self.g0.len(), 1, self.g0.as_slice()));
        write_block(&mut s, "K", &self.cfg.gain);
        write_block(&mut s, "P", &self.cfg.p);
        s
    }
}

/// Clips the eigenvalues of a symmetric matrix from below.
fn clip_psd(h: &DMatrix<f64>) -> DMatrix<f64> {
    if min_sym_eigenvalue(h) >= HESSIAN_EIG_FLOOR {
        return h.clone();
    }
    let eig = SymmetricEigen::new(h.clone());
    let vals = eig.eigenvalues.map(|v| v.max(HESSIAN_EIG_FLOOR));
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{diag, dmat, dvec};
    use crate::oracle::{Activation, NetworkArch, OracleState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_model(a: f64, b: f64, x_max: f64, u_max: f64) -> PlantModel {
        PlantModel::new(
            dmat(1, 1, &[a]),
            dmat(1, 1, &[b]),
            Polytope::from_box(&[-x_max], &[x_max]).unwrap(),
            Polytope::from_box(&[-u_max], &[u_max]).unwrap(),
            Polytope::origin(1),
        )
        .unwrap()
    }

    #[test]
    fn scalar_riccati_fixed_point() {
        let (a, b, q, r) = (0.5_f64, 1.0_f64, 1.0_f64, 1.0_f64);
        let k = synthesize_gain(&dmat(1, 1, &[a]), &dmat(1, 1, &[b]), &dmat(1, 1, &[q]), &dmat(1, 1, &[r]))
            .unwrap()[(0, 0)];
        // Independent scalar iteration of p = q + a²p − a²p²b²/(r + b²p).
        let mut p = q;
        for _ in 0..10_000 {
            p = q + a * a * p - a * a * p * p * b * b / (r + b * b * p);
        }
        let k_ref = -(b * a * p) / (r + b * b * p);
        assert!((k - k_ref).abs() < 1e-10);
        assert!((a + b * k).abs() < 1.0);
    }

    #[test]
    fn unstabilizable_is_rejected() {
        let e = synthesize_gain(&dmat(1, 1, &[1.5]), &dmat(1, 1, &[0.0]), &dmat(1, 1, &[1.0]), &dmat(1, 1, &[1.0]));
        assert_eq!(e, Err(MpcError::NotStabilizable));
    }

    #[test]
    fn zero_state_cost_gives_zero_gain_for_stable_a() {
        let k = synthesize_gain(&dmat(1, 1, &[0.5]), &dmat(1, 1, &[1.0]), &dmat(1, 1, &[0.0]), &dmat(1, 1, &[1.0]))
            .unwrap();
        assert_eq!(k[(0, 0)], 0.0);
    }

    #[test]
    fn lyapunov_geometric_series() {
        let p = solve_lyapunov(&dmat(1, 1, &[0.5]), &dmat(1, 1, &[1.0])).unwrap();
        assert!((p[(0, 0)] - 4.0 / 3.0).abs() < 1e-12);
        let p = solve_lyapunov(&dmat(1, 1, &[0.5]), &dmat(1, 1, &[0.0])).unwrap();
        assert_eq!(p[(0, 0)], 0.0);
        assert!(matches!(
            solve_lyapunov(&dmat(1, 1, &[1.2]), &dmat(1, 1, &[1.0])),
            Err(MpcError::NotSchurStable { .. })
        ));
    }

    #[test]
    fn lyapunov_residual_random_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut a = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
            a *= 0.95 / spectral_radius(&a);
            let m = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
            let q = m.tr_mul(&m);
            let p = solve_lyapunov(&a, &q).unwrap();
            assert!(max_abs(&(a.tr_mul(&(&p * &a)) - &p + &q)) < 1e-10 * max_abs(&p).max(1.0));
        }
    }

    fn scalar_problem(horizon: usize, oracle: Oracle) -> LbmpcProblem {
        let model = scalar_model(1.2, 1.0, 10.0, 1.0);
        let cfg = ControllerConfig::lqr(&model, dmat(1, 1, &[1.0]), dmat(1, 1, &[1.0]), horizon).unwrap();
        let (omega, margins) = design_sets(&model, &cfg).unwrap();
        build_lbmpc(&model, cfg, omega, margins, oracle).unwrap()
    }

    #[test]
    fn zero_margins_leave_sets_untightened() {
        let p = scalar_problem(3, Oracle::Zero { state_dim: 1 });
        assert!(p.margins().is_zero());
        assert_eq!(p.n_constraints(), 3 * (2 + 2) + p.terminal_set().n_rows());
    }

    #[test]
    fn one_step_has_one_decision_block() {
        let p = scalar_problem(1, Oracle::Zero { state_dim: 1 });
        assert_eq!(p.n_decisions(), 1);
    }

    #[test]
    fn reference_is_a_fixed_point() {
        let p = scalar_problem(5, Oracle::Zero { state_dim: 1 });
        let sol = p.solve_linear_mpc(&dvec(&[0.0]), None).unwrap();
        assert!(sol.c.amax() < 1e-12);
        assert!(sol.u.amax() < 1e-12);
    }

    #[test]
    fn active_input_bound_is_clipped() {
        // x⁺ = x + u, K = −0.5, Q = R = 1, so P = 5/3 and Ω = [−2, 2].
        // Unconstrained u* = −P x/(1 + P) = −1.5625 at x = 2.5, clipped to −1.
        let model = scalar_model(1.0, 1.0, 100.0, 1.0);
        let mut cfg = ControllerConfig::lqr(&model, dmat(1, 1, &[1.0]), dmat(1, 1, &[1.0]), 1).unwrap();
        cfg.gain = dmat(1, 1, &[-0.5]);
        cfg.p = solve_lyapunov_p(&model, &cfg.gain, &cfg.q, &cfg.r).unwrap();
        assert!((cfg.p[(0, 0)] - 5.0 / 3.0).abs() < 1e-12);
        let (omega, margins) = design_sets(&model, &cfg).unwrap();
        let p = build_lbmpc(&model, cfg, omega, margins, Oracle::Zero { state_dim: 1 }).unwrap();
        let sol = p.solve_linear_mpc(&dvec(&[2.5]), None).unwrap();
        assert!((sol.u[0] + 1.0).abs() < 1e-9, "u = {}", sol.u[0]);
    }

    fn dnn_oracle(d: usize, m: usize, seed: u64, k_scale: f64) -> OracleState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = NetworkArch::new(d + m, vec![6, 5], vec![Activation::Tanh; 2], d).unwrap();
        let mut s = OracleState::new(arch, DVector::from_element(d, 10.0), 0.5, DVector::from_element(d + m, 1.0), &mut rng)
            .unwrap();
        s.set_output_weights(DMatrix::from_fn(6, d, |_, _| k_scale * rng.gen_range(-1.0..1.0))).unwrap();
        s
    }

    fn two_state_model() -> PlantModel {
        PlantModel::new(
            dmat(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            dmat(2, 1, &[0.005, 0.1]),
            Polytope::from_box(&[-5.0, -2.0], &[5.0, 2.0]).unwrap(),
            Polytope::from_box(&[-1.0], &[1.0]).unwrap(),
            Polytope::origin(2),
        )
        .unwrap()
    }

    fn two_state_problem(oracle: Oracle, horizon: usize) -> LbmpcProblem {
        let model = two_state_model();
        let cfg = ControllerConfig::lqr(&model, diag(&[1.0, 0.1]), dmat(1, 1, &[0.5]), horizon).unwrap();
        let (omega, margins) = design_sets(&model, &cfg).unwrap();
        build_lbmpc(&model, cfg, omega, margins, oracle).unwrap()
    }

    #[test]
    fn zero_oracle_matches_linear_path() {
        let p = two_state_problem(Oracle::Zero { state_dim: 2 }, 8);
        let x = dvec(&[1.5, -0.3]);
        let mut a = p.solve_linear_mpc(&x, None).unwrap();
        let mut b = p.solve_lbmpc(&x, None).unwrap();
        a.wall_time = 0.0;
        b.wall_time = 0.0;
        assert_eq!(a, b);
    }

    #[test]
    fn constant_oracle_shifts_by_accumulated_bias() {
        let mut s = dnn_oracle(2, 1, 1, 0.0);
        let w0 = dvec(&[0.01, -0.02]);
        let mut k = DMatrix::zeros(6, 2);
        k.row_mut(0).copy_from(&w0.transpose());
        s.set_output_weights(k).unwrap();
        let p = two_state_problem(Oracle::Dnn(s), 6);
        let x = dvec(&[0.5, 0.1]);
        let c = DVector::from_fn(6, |i, _| 0.05 * i as f64 - 0.1);
        let (zbar, _) = p.nominal_trajectory(&x, &c);
        let (z, _) = p.learned_trajectory(&x, &c, false);
        let a = &p.model().a;
        let mut acc = DVector::zeros(2);
        let mut ak = DMatrix::identity(2, 2);
        for i in 0..=6 {
            assert!((&z[i] - &zbar[i] - &acc).amax() < 1e-14);
            acc += &ak * &w0;
            ak = a * ak;
        }
    }

    #[test]
    fn sqp_linearisation_matches_finite_differences() {
        let s = dnn_oracle(2, 1, 2, 0.3);
        let p = two_state_problem(Oracle::Dnn(s), 6);
        let x = dvec(&[0.5, 0.1]);
        let c = DVector::from_fn(6, |i, _| 0.03 * i as f64 - 0.05);
        let (_, jac) = p.learned_trajectory(&x, &c, true);
        let eps = 1e-6;
        for j in 0..6 {
            let mut cp = c.clone();
            let mut cm = c.clone();
            cp[j] += eps;
            cm[j] -= eps;
            let fd = (&p.learned_trajectory(&x, &cp, false).0[6] - &p.learned_trajectory(&x, &cm, false).0[6]) / (2.0 * eps);
            let an = jac[6].column(j);
            assert!((&fd - an).norm() <= 1e-4 * an.norm().max(1e-8), "column {j}");
        }
    }

    #[test]
    fn nominal_recursion_is_exact_and_input_admissible() {
        let s = dnn_oracle(2, 1, 4, 0.05);
        let p = two_state_problem(Oracle::Dnn(s), 10);
        let x = dvec(&[2.0, -0.5]);
        let sol = p.solve_lbmpc(&x, None).unwrap();
        assert_eq!(sol.status, MpcStatus::Optimal);
        for i in 0..10 {
            let next = &p.model().a * &sol.nominal[i] + &p.model().b * &sol.inputs[i];
            assert!((next - &sol.nominal[i + 1]).amax() < 1e-10);
        }
        assert!(p.model().input_set.contains(&sol.u));
        assert!(p.max_violation(&x, &sol.c) < 1e-8);
    }

    #[test]
    fn shift_drops_the_first_block() {
        let p = two_state_problem(Oracle::Zero { state_dim: 2 }, 3);
        let mut sol = p.solve_linear_mpc(&dvec(&[0.2, 0.0]), None).unwrap();
        sol.c = dvec(&[1.0, 2.0, 3.0]);
        assert_eq!(p.shift_solution(&sol).c, dvec(&[2.0, 3.0, 0.0]));
        let p1 = two_state_problem(Oracle::Zero { state_dim: 2 }, 1);
        let sol1 = p1.solve_linear_mpc(&dvec(&[0.05, 0.0]), None).unwrap();
        assert_eq!(p1.shift_solution(&sol1).c, dvec(&[0.0]));
    }

    #[test]
    fn optimum_never_exceeds_shifted_cost_nominally() {
        let p = two_state_problem(Oracle::Zero { state_dim: 2 }, 10);
        let mut x = dvec(&[3.0, -1.0]);
        let mut prev: Option<MpcSolution> = None;
        for _ in 0..400 {
            let sol = p.solve_linear_mpc(&x, prev.as_ref()).unwrap();
            if let Some(pr) = &prev {
                let shifted = p.shift_solution(pr).c;
                assert!(p.max_violation(&x, &shifted) < 1e-9);
                assert!(sol.cost <= p.cost(&x, &shifted) + 1e-9);
            }
            x = p.model().predict(&x, &sol.u);
            prev = Some(sol);
        }
        assert!(x.amax() < 1e-6);
    }
}
