//! Dense convex QP solver.
//!
//! ```text
//! minimize ½ xᵀH x + gᵀx   subject to   G x ≤ h_in,  E x = h_eq
//! ```
//!
//! The main loop is an operator-splitting (ADMM) iteration on the stacked
//! constraint `l ≤ A x ≤ u` with a fixed penalty and over-relaxation. Once the
//! iterates settle, a polish step guesses the active set from the duals and
//! solves the reduced KKT system exactly; a short active-set correction loop
//! fixes wrong guesses. A warm start with duals goes straight to the polish, so
//! re-solving a problem whose active set did not change costs one KKT solve.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{is_symmetric, min_sym_eigenvalue};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("Hessian is not symmetric")]
    NotSymmetric,
    #[error("Hessian is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    pub eq: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl QpProblem {
    pub fn new(
        hessian: DMatrix<f64>,
        gradient: DVector<f64>,
        ineq_matrix: DMatrix<f64>,
        ineq_rhs: DVector<f64>,
    ) -> Self {
        Self { hessian, gradient, ineq_matrix, ineq_rhs, eq: None }
    }

    pub fn with_equalities(mut self, matrix: DMatrix<f64>, rhs: DVector<f64>) -> Self {
        self.eq = Some((matrix, rhs));
        self
    }

    pub fn n_vars(&self) -> usize {
        self.gradient.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.ineq_rhs.len()
    }

    pub fn n_eq(&self) -> usize {
        self.eq.as_ref().map_or(0, |(_, r)| r.len())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.gradient.dot(x)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.n_vars();
        if self.hessian.shape() != (n, n) {
            return Err(QpError::Dimension(format!("H is {:?}, n = {n}", self.hessian.shape())));
        }
        if self.ineq_matrix.ncols() != n || self.ineq_matrix.nrows() != self.ineq_rhs.len() {
            return Err(QpError::Dimension("inequality block".into()));
        }
        if let Some((e, r)) = &self.eq {
            if e.ncols() != n || e.nrows() != r.len() {
                return Err(QpError::Dimension("equality block".into()));
            }
        }
        if !is_symmetric(&self.hessian, 1e-10 * self.hessian.amax().max(1.0)) {
            return Err(QpError::NotSymmetric);
        }
        let min_eig = min_sym_eigenvalue(&self.hessian);
        if min_eig < -1e-9 * self.hessian.amax().max(1.0) {
            return Err(QpError::NotPsd(min_eig));
        }
        Ok(())
    }

    /// Matrix blocks as CSV: a `block,name,rows,cols` line followed by the rows.
    pub fn to_csv_blocks(&self) -> String {
        let mut s = String::new();
        write_block(&mut s, "H", &self.hessian);
        write_block(&mut s, "g", &DMatrix::from_column_slice(self.n_vars(), 1, self.gradient.as_slice()));
        write_block(&mut s, "G", &self.ineq_matrix);
        write_block(&mut s, "h_in", &DMatrix::from_column_slice(self.n_ineq(), 1, self.ineq_rhs.as_slice()));
        if let Some((e, r)) = &self.eq {
            write_block(&mut s, "E", e);
            write_block(&mut s, "h_eq", &DMatrix::from_column_slice(r.len(), 1, r.as_slice()));
        }
        s
    }

    pub fn from_csv_blocks(text: &str) -> Result<Self, QpError> {
        let blocks = read_blocks(text)?;
        let get = |name: &str| {
            blocks
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| QpError::Parse(format!("missing block {name}")))
        };
        let col = |m: DMatrix<f64>| DVector::from_column_slice(m.as_slice());
        let mut p = Self::new(get("H")?, col(get("g")?), get("G")?, col(get("h_in")?));
        if let (Ok(e), Ok(r)) = (get("E"), get("h_eq")) {
            p = p.with_equalities(e, col(r));
        }
        p.validate()?;
        Ok(p)
    }
}

pub(crate) fn write_block(s: &mut String, name: &str, m: &DMatrix<f64>) {
    let _ = writeln!(s, "block,{name},{},{}", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
}

pub(crate) fn read_blocks(text: &str) -> Result<Vec<(String, DMatrix<f64>)>, QpError> {
    let mut out = Vec::new();
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    while let Some(header) = lines.next() {
        let parts: Vec<&str> = header.split(',').collect();
        if parts.len() != 4 || parts[0] != "block" {
            return Err(QpError::Parse(format!("bad block header {header:?}")));
        }
        let rows: usize = parts[2].parse().map_err(|_| QpError::Parse("rows".into()))?;
        let cols: usize = parts[3].parse().map_err(|_| QpError::Parse("cols".into()))?;
        let mut vals = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = lines.next().ok_or_else(|| QpError::Parse("truncated block".into()))?;
            for t in line.split(',') {
                vals.push(t.trim().parse::<f64>().map_err(|e| QpError::Parse(e.to_string()))?);
            }
        }
        if vals.len() != rows * cols {
            return Err(QpError::Parse(format!("block {} has wrong size", parts[1])));
        }
        out.push((parts[1].to_string(), DMatrix::from_row_slice(rows, cols, &vals)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

/// Infinity-norm KKT residuals.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }

    pub fn all_below(&self, tol: f64) -> bool {
        self.max() < tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of `G x ≤ h_in` (non-negative at optimality).
    pub ineq_duals: DVector<f64>,
    pub eq_duals: DVector<f64>,
    pub status: QpStatus,
    /// ADMM iterations; zero when a warm-started polish succeeded immediately.
    pub iterations: usize,
    pub residuals: KktResiduals,
    pub polished: bool,
    /// Objective of the ADMM iterate the polish started from, if it ran after ADMM.
    pub pre_polish_objective: Option<f64>,
    pub pre_polish_x: Option<DVector<f64>>,
}

impl QpSolution {
    pub fn objective(&self, p: &QpProblem) -> f64 {
        p.objective(&self.x)
    }

    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            x: self.x.clone(),
            ineq_duals: Some(self.ineq_duals.clone()),
            eq_duals: Some(self.eq_duals.clone()),
        }
    }
}

/// Primal (and optionally dual) starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub x: DVector<f64>,
    pub ineq_duals: Option<DVector<f64>>,
    pub eq_duals: Option<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub rho: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub max_iter: usize,
    /// ADMM stopping tolerance; the polish takes the answer the rest of the way.
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_infeasible: f64,
    /// Required KKT accuracy for the `Optimal` status.
    pub kkt_tol: f64,
    pub polish: bool,
    pub polish_passes: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            alpha: 1.6,
            sigma: 1e-6,
            max_iter: 4000,
            eps_abs: 1e-5,
            eps_rel: 1e-5,
            eps_infeasible: 1e-8,
            kkt_tol: 1e-6,
            polish: true,
            polish_passes: 25,
        }
    }
}

/// KKT residuals of a primal-dual pair.
pub fn kkt_residuals(
    p: &QpProblem,
    x: &DVector<f64>,
    ineq_duals: &DVector<f64>,
    eq_duals: &DVector<f64>,
) -> KktResiduals {
    let mut grad = &p.hessian * x + &p.gradient + p.ineq_matrix.tr_mul(ineq_duals);
    let mut primal: f64 = 0.0;
    if let Some((e, r)) = &p.eq {
        grad += e.tr_mul(eq_duals);
        primal = primal.max((e * x - r).amax());
    }
    let slack = &p.ineq_rhs - &p.ineq_matrix * x;
    for i in 0..slack.len() {
        primal = primal.max(-slack[i]);
    }
    let dual = ineq_duals.iter().map(|y| (-y).max(0.0)).fold(0.0, f64::max);
    let complementarity =
        (0..slack.len()).map(|i| (ineq_duals[i] * slack[i]).abs()).fold(0.0, f64::max);
    KktResiduals { stationarity: grad.amax(), primal, dual, complementarity }
}

pub fn solution_residuals(p: &QpProblem, sol: &QpSolution) -> KktResiduals {
    kkt_residuals(p, &sol.x, &sol.ineq_duals, &sol.eq_duals)
}

fn solve_dense(m: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = m.lu();
    let sol = lu.solve(rhs)?;
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

/// Equality-constrained QP on the given active inequality rows.
fn solve_reduced_kkt(p: &QpProblem, active: &[usize]) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let n = p.n_vars();
    let na = active.len();
    let ne = p.n_eq();
    let size = n + na + ne;
    let mut k = DMatrix::zeros(size, size);
    let mut rhs = DVector::zeros(size);
    k.view_mut((0, 0), (n, n)).copy_from(&p.hessian);
    for i in 0..n {
        rhs[i] = -p.gradient[i];
    }
    for (r, &row) in active.iter().enumerate() {
        for j in 0..n {
            let v = p.ineq_matrix[(row, j)];
            k[(n + r, j)] = v;
            k[(j, n + r)] = v;
        }
        rhs[n + r] = p.ineq_rhs[row];
    }
    if let Some((e, er)) = &p.eq {
        for r in 0..ne {
            for j in 0..n {
                k[(n + na + r, j)] = e[(r, j)];
                k[(j, n + na + r)] = e[(r, j)];
            }
            rhs[n + na + r] = er[r];
        }
    }
    // Tiny dual regularisation keeps degenerate (dependent) active rows solvable.
    for i in n..size {
        k[(i, i)] = -1e-14;
    }
    let k_keep = k.clone();
    let mut sol = solve_dense(k, &rhs)?;
    // One step of iterative refinement.
    let res = &rhs - &k_keep * &sol;
    if let Some(corr) = solve_dense(k_keep, &res) {
        sol += corr;
    }
    let x = sol.rows(0, n).into_owned();
    let mut y = DVector::zeros(p.n_ineq());
    for (r, &row) in active.iter().enumerate() {
        y[row] = sol[n + r];
    }
    let mu = sol.rows(n + na, ne).into_owned();
    Some((x, y, mu))
}

/// Active-set correction starting from `active`; returns the first pair whose
/// KKT residuals pass `tol`.
fn polish(
    p: &QpProblem,
    mut active: Vec<usize>,
    passes: usize,
    tol: f64,
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let scale = p.ineq_rhs.amax().max(1.0);
    for _ in 0..passes.max(1) {
        active.sort_unstable();
        active.dedup();
        let (x, y, mu) = solve_reduced_kkt(p, &active)?;
        let res = kkt_residuals(p, &x, &y, &mu);
        if res.all_below(tol) {
            return Some((x, y, mu));
        }
        // Drop the most negative multiplier, else add the most violated row.
        let (worst_dual, worst_dual_val) = active
            .iter()
            .map(|&i| (i, y[i]))
            .fold((usize::MAX, 0.0), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
        if worst_dual != usize::MAX && worst_dual_val < -tol {
            active.retain(|&i| i != worst_dual);
            continue;
        }
        let slack = &p.ineq_rhs - &p.ineq_matrix * &x;
        let (worst_row, worst_slack) = (0..slack.len())
            .filter(|i| !active.contains(i))
            .map(|i| (i, slack[i]))
            .fold((usize::MAX, 0.0), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
        if worst_row != usize::MAX && worst_slack < -tol * scale {
            active.push(worst_row);
            continue;
        }
        return None;
    }
    None
}

/// Solves the QP; malformed input is the only error, every numerical outcome is a status.
pub fn qp_solve(
    p: &QpProblem,
    warm: Option<&WarmStart>,
    settings: &QpSettings,
) -> Result<QpSolution, QpError> {
    p.validate()?;
    let n = p.n_vars();
    let m_in = p.n_ineq();
    let m_eq = p.n_eq();
    if let Some(w) = warm {
        if w.x.len() != n {
            return Err(QpError::Dimension("warm-start primal".into()));
        }
    }

    let finish = |x: DVector<f64>,
                  y: DVector<f64>,
                  mu: DVector<f64>,
                  iterations,
                  polished,
                  pre: Option<DVector<f64>>| {
        let residuals = kkt_residuals(p, &x, &y, &mu);
        let status = if residuals.all_below(settings.kkt_tol) {
            QpStatus::Optimal
        } else {
            QpStatus::IterationLimit
        };
        QpSolution {
            x,
            ineq_duals: y,
            eq_duals: mu,
            status,
            iterations,
            residuals,
            polished,
            pre_polish_objective: pre.as_ref().map(|v| p.objective(v)),
            pre_polish_x: pre,
        }
    };

    // Rows with a zero normal are constant constraints.
    let zero_rows: Vec<usize> =
        (0..m_in).filter(|&i| p.ineq_matrix.row(i).amax() == 0.0).collect();
    if zero_rows.iter().any(|&i| p.ineq_rhs[i] < -settings.kkt_tol) {
        let x = warm.map_or_else(|| DVector::zeros(n), |w| w.x.clone());
        let mut sol = finish(x, DVector::zeros(m_in), DVector::zeros(m_eq), 0, false, None);
        sol.status = QpStatus::Infeasible;
        return Ok(sol);
    }

    // Warm start with duals: try the polish on the remembered active set first.
    if settings.polish {
        if let Some(y0) = warm.and_then(|w| w.ineq_duals.as_ref()) {
            if y0.len() == m_in {
                let active: Vec<usize> = (0..m_in).filter(|&i| y0[i] > 1e-9).collect();
                if let Some((x, y, mu)) = polish(p, active, settings.polish_passes, settings.kkt_tol * 1e-3) {
                    return Ok(finish(x, y, mu, 0, true, None));
                }
            }
        }
    }

    // Stacked constraint l ≤ A x ≤ u.
    let m = m_in + m_eq;
    let mut a = DMatrix::zeros(m, n);
    a.view_mut((0, 0), (m_in, n)).copy_from(&p.ineq_matrix);
    let mut lower = DVector::from_element(m, f64::NEG_INFINITY);
    let mut upper = DVector::zeros(m);
    upper.rows_mut(0, m_in).copy_from(&p.ineq_rhs);
    let mut rho = DVector::from_element(m, settings.rho);
    if let Some((e, r)) = &p.eq {
        a.view_mut((m_in, 0), (m_eq, n)).copy_from(e);
        lower.rows_mut(m_in, m_eq).copy_from(r);
        upper.rows_mut(m_in, m_eq).copy_from(r);
        rho.rows_mut(m_in, m_eq).fill(settings.rho * 1e3);
    }

    let mut kmat = &p.hessian + DMatrix::identity(n, n) * settings.sigma;
    kmat += a.transpose() * DMatrix::from_diagonal(&rho) * &a;
    let chol = kmat.clone().cholesky();
    let lu = if chol.is_none() { Some(kmat.lu()) } else { None };
    let solve_k = |rhs: &DVector<f64>| -> DVector<f64> {
        match (&chol, &lu) {
            (Some(c), _) => c.solve(rhs),
            (None, Some(l)) => l.solve(rhs).unwrap_or_else(|| DVector::zeros(rhs.len())),
            _ => unreachable!(),
        }
    };

    let mut x = warm.map_or_else(|| DVector::zeros(n), |w| w.x.clone());
    let mut z = (&a * &x).zip_zip_map(&lower, &upper, |v, l, u| v.clamp(l, u));
    let mut y = DVector::zeros(m);
    if let Some(w) = warm {
        if let Some(yi) = w.ineq_duals.as_ref().filter(|v| v.len() == m_in) {
            y.rows_mut(0, m_in).copy_from(yi);
        }
        if let Some(ye) = w.eq_duals.as_ref().filter(|v| v.len() == m_eq) {
            y.rows_mut(m_in, m_eq).copy_from(ye);
        }
    }

    let alpha = settings.alpha;
    let split = |y: &DVector<f64>| (y.rows(0, m_in).into_owned(), y.rows(m_in, m_eq).into_owned());
    let mut best: Option<QpSolution> = None;
    let mut iter = 0;
    while iter < settings.max_iter {
        iter += 1;
        let y_prev = y.clone();
        let rhs = &x * settings.sigma - &p.gradient + a.tr_mul(&(rho.component_mul(&z) - &y));
        let x_tilde = solve_k(&rhs);
        let z_tilde = &a * &x_tilde;
        x = &x_tilde * alpha + &x * (1.0 - alpha);
        let z_relaxed = &z_tilde * alpha + &z * (1.0 - alpha);
        let z_next = (&z_relaxed + y.component_div(&rho)).zip_zip_map(&lower, &upper, |v, l, u| v.clamp(l, u));
        y += rho.component_mul(&(&z_relaxed - &z_next));
        z = z_next;

        if iter % 5 != 0 && iter != settings.max_iter {
            continue;
        }

        // Primal infeasibility certificate.
        let dy = &y - &y_prev;
        let dy_norm = dy.amax();
        if dy_norm > 1e-12 {
            let at_dy = a.tr_mul(&dy).amax();
            let mut support = 0.0;
            let mut valid = true;
            for i in 0..m {
                if dy[i] > 0.0 {
                    support += upper[i] * dy[i];
                } else if dy[i] < 0.0 {
                    if lower[i].is_finite() {
                        support += lower[i] * dy[i];
                    } else if dy[i] < -settings.eps_infeasible * dy_norm {
                        valid = false;
                    }
                }
            }
            if valid
                && at_dy <= settings.eps_infeasible * dy_norm
                && support < -settings.eps_infeasible * dy_norm
            {
                let (yi, ye) = split(&y);
                let mut sol = finish(x.clone(), yi, ye, iter, false, None);
                sol.status = QpStatus::Infeasible;
                return Ok(sol);
            }
        }

        let ax = &a * &x;
        let r_prim = (&ax - &z).amax();
        let aty = a.tr_mul(&y);
        let hx = &p.hessian * &x;
        let r_dual = (&hx + &p.gradient + &aty).amax();
        let eps_prim = settings.eps_abs + settings.eps_rel * ax.amax().max(z.amax());
        let eps_dual =
            settings.eps_abs + settings.eps_rel * hx.amax().max(aty.amax()).max(p.gradient.amax());
        let converged = r_prim <= eps_prim && r_dual <= eps_dual;
        // A slow tail is common with a fixed penalty; the active set is usually
        // right long before the residuals are, so the polish is tried periodically.
        if converged || iter % 25 == 0 {
            let (yi, ye) = split(&y);
            if settings.polish {
                let active: Vec<usize> = (0..m_in)
                    .filter(|&i| yi[i] > 1e-9 || ax[i] >= upper[i] - 1e-9 * upper[i].abs().max(1.0))
                    .filter(|i| !zero_rows.contains(i))
                    .collect();
                if let Some((xp, ypol, mup)) =
                    polish(p, active, settings.polish_passes, settings.kkt_tol * 1e-3)
                {
                    return Ok(finish(xp, ypol, mup, iter, true, Some(x.clone())));
                }
            }
            if converged {
                let yi_clamped = yi.map(|v| v.max(0.0));
                let candidate = finish(x.clone(), yi_clamped, ye, iter, false, None);
                if candidate.status == QpStatus::Optimal {
                    return Ok(candidate);
                }
                if best.as_ref().map_or(true, |b| candidate.residuals.max() < b.residuals.max()) {
                    best = Some(candidate);
                }
            }
        }
    }
    Ok(best.unwrap_or_else(|| {
        let (yi, ye) = split(&y);
        finish(x, yi.map(|v| v.max(0.0)), ye, iter, false, None)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dmat, dvec};

    #[test]
    fn scalar_bound_constrained() {
        // min x² s.t. x ≥ 1.
        let p = QpProblem::new(dmat(1, 1, &[2.0]), dvec(&[0.0]), dmat(1, 1, &[-1.0]), dvec(&[-1.0]));
        let sol = qp_solve(&p, None, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-9);
        assert!((sol.ineq_duals[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn unconstrained_is_a_linear_solve() {
        let p = QpProblem::new(
            dmat(2, 2, &[2.0, 0.0, 0.0, 2.0]),
            dvec(&[-2.0, -4.0]),
            dmat(1, 2, &[1.0, 1.0]),
            dvec(&[100.0]),
        );
        let sol = qp_solve(&p, None, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-9 && (sol.x[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn equality_constraints() {
        // min x² + y² s.t. x + y = 1.
        let p = QpProblem::new(
            dmat(2, 2, &[2.0, 0.0, 0.0, 2.0]),
            dvec(&[0.0, 0.0]),
            dmat(1, 2, &[1.0, 0.0]),
            dvec(&[10.0]),
        )
        .with_equalities(dmat(1, 2, &[1.0, 1.0]), dvec(&[1.0]));
        let sol = qp_solve(&p, None, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x[0] - 0.5).abs() < 1e-9 && (sol.x[1] - 0.5).abs() < 1e-9);
        assert!((sol.eq_duals[0] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn infeasible_problem_is_detected() {
        let p = QpProblem::new(dmat(1, 1, &[2.0]), dvec(&[0.0]), dmat(2, 1, &[1.0, -1.0]), dvec(&[-1.0, -1.0]));
        let sol = qp_solve(&p, None, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
        assert!(sol.residuals.primal > 1e-6);
    }

    #[test]
    fn constant_row_violation_is_infeasible() {
        let p = QpProblem::new(dmat(1, 1, &[2.0]), dvec(&[0.0]), dmat(1, 1, &[0.0]), dvec(&[-1.0]));
        assert_eq!(qp_solve(&p, None, &QpSettings::default()).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn kkt_residual_examples() {
        let p = QpProblem::new(dmat(1, 1, &[2.0]), dvec(&[0.0]), dmat(1, 1, &[-1.0]), dvec(&[-1.0]));
        let r = kkt_residuals(&p, &dvec(&[1.0]), &dvec(&[2.0]), &DVector::zeros(0));
        assert!(r.all_below(1e-12));
        let r = kkt_residuals(&p, &dvec(&[1.0 - 1e-3]), &dvec(&[2.0]), &DVector::zeros(0));
        assert!((r.primal - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn rejects_malformed_problems() {
        let p = QpProblem::new(dmat(2, 2, &[1.0, 2.0, 0.0, 1.0]), dvec(&[0.0, 0.0]), dmat(1, 2, &[1.0, 0.0]), dvec(&[1.0]));
        assert_eq!(qp_solve(&p, None, &QpSettings::default()), Err(QpError::NotSymmetric));
        let p = QpProblem::new(dmat(1, 1, &[-1.0]), dvec(&[0.0]), dmat(1, 1, &[1.0]), dvec(&[1.0]));
        assert!(matches!(qp_solve(&p, None, &QpSettings::default()), Err(QpError::NotPsd(_))));
    }

    #[test]
    fn warm_restart_uses_the_polish() {
        let p = QpProblem::new(
            dmat(2, 2, &[4.0, 1.0, 1.0, 2.0]),
            dvec(&[1.0, 1.0]),
            dmat(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0]),
            dvec(&[-0.5, -0.2, 3.0]),
        );
        let cold = qp_solve(&p, None, &QpSettings::default()).unwrap();
        assert_eq!(cold.status, QpStatus::Optimal);
        let warm = qp_solve(&p, Some(&cold.warm_start()), &QpSettings::default()).unwrap();
        assert_eq!(warm.status, QpStatus::Optimal);
        assert!(warm.iterations <= 5);
        assert!((warm.x - cold.x).amax() < 1e-10);
    }

    #[test]
    fn csv_blocks_round_trip() {
        let p = QpProblem::new(
            dmat(2, 2, &[4.0, 1.0, 1.0, 2.0]),
            dvec(&[1.0, -0.1]),
            dmat(1, 2, &[1.0, 1.0]),
            dvec(&[3.0]),
        )
        .with_equalities(dmat(1, 2, &[1.0, -1.0]), dvec(&[0.25]));
        assert_eq!(QpProblem::from_csv_blocks(&p.to_csv_blocks()).unwrap(), p);
        assert!(QpProblem::from_csv_blocks("block,H,1").is_err());
    }
}
