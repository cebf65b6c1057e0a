//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use lbmpc::qp::QpProblem;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Strictly convex QP with a strictly feasible point and a gradient strong enough
/// to push the unconstrained minimiser outside the feasible region.
pub fn random_feasible_qp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> QpProblem {
    random_feasible_qp_with_point(rng, n, m).0
}

/// As [`random_feasible_qp`], also returning the strictly feasible point used to
/// build the constraints.
pub fn random_feasible_qp_with_point(
    rng: &mut ChaCha8Rng,
    n: usize,
    m: usize,
) -> (QpProblem, DVector<f64>) {
    let mut normal = || -> f64 {
        // Box-Muller keeps the oracle free of extra dependencies.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mroot = DMatrix::from_fn(n, n, |_, _| normal());
    let h = mroot.transpose() * &mroot + DMatrix::identity(n, n) * 0.1;
    let h = (&h + h.transpose()) * 0.5;
    let gmat = DMatrix::from_fn(m, n, |_, _| normal());
    let x0 = DVector::from_fn(n, |_, _| normal());
    let slack = DVector::from_fn(m, |_, _| normal().abs() * 0.5 + 0.05);
    let rhs = &gmat * &x0 + slack;
    let grad = DVector::from_fn(n, |_, _| 5.0 * normal());
    (QpProblem::new(h, grad, gmat, rhs), x0)
}

fn subsets_of_size(m: usize, k: usize, out: &mut Vec<Vec<usize>>) {
    fn rec(start: usize, m: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..m {
            cur.push(i);
            rec(i + 1, m, k, cur, out);
            cur.pop();
        }
    }
    rec(0, m, k, &mut Vec::new(), out);
}

/// Exhaustive active-set enumeration: the first subset (by size, then
/// lexicographic) whose equality-constrained minimiser is primal feasible with
/// non-negative multipliers is the unique optimum of a strictly convex QP.
/// Returns the optimal objective.
pub fn brute_force_qp(p: &QpProblem) -> Option<f64> {
    let n = p.n_vars();
    let m = p.n_ineq();
    let hinv = p.hessian.clone().try_inverse()?;
    let tol = 1e-9;
    for k in 0..=n.min(m) {
        let mut subsets = Vec::new();
        subsets_of_size(m, k, &mut subsets);
        for s in subsets {
            let gs = p.ineq_matrix.select_rows(s.iter());
            let hs = p.ineq_rhs.select_rows(s.iter());
            // λ = (G_S H⁻¹ G_Sᵀ)⁻¹ (−h_S − G_S H⁻¹ g),  x = −H⁻¹(g + G_Sᵀ λ)
            let lam = if k == 0 {
                DVector::zeros(0)
            } else {
                let schur = &gs * &hinv * gs.transpose();
                let rhs = -(&hs + &gs * &hinv * &p.gradient);
                match schur.lu().solve(&rhs) {
                    Some(l) => l,
                    None => continue,
                }
            };
            if lam.iter().any(|l| *l < -tol || !l.is_finite()) {
                continue;
            }
            let x = -(&hinv * (&p.gradient + gs.transpose() * &lam));
            let viol = (&p.ineq_matrix * &x - &p.ineq_rhs).max();
            if viol <= tol * p.ineq_rhs.amax().max(1.0) {
                return Some(p.objective(&x));
            }
        }
    }
    None
}
