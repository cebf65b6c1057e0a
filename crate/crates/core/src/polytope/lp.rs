//! Dense two-phase tableau simplex for standard-form linear programs
//!
//! ```text
//! minimize cᵀy  subject to  A y = b,  y ≥ 0
//! ```
//!
//! The polytope code only ever feeds it the dual of a support-function LP, so the
//! row count is the ambient dimension (plus one for feasibility checks) and the
//! tableau stays tiny even for polytopes with hundreds of facets. Bland's rule
//! is used throughout, so degenerate pivots cannot cycle.

use nalgebra::{DMatrix, DVector};

/// Feasibility tolerance of the simplex routine.
pub const LP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { y: DVector<f64>, value: f64 },
    Infeasible,
    Unbounded,
}

struct Tableau {
    /// `rows` constraint rows followed by one objective row; last column is the rhs.
    t: DMatrix<f64>,
    basis: Vec<usize>,
    rows: usize,
}

impl Tableau {
    fn rhs_col(&self) -> usize {
        self.t.ncols() - 1
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.t[(row, col)];
        let ncols = self.t.ncols();
        for j in 0..ncols {
            self.t[(row, j)] /= p;
        }
        for i in 0..=self.rows {
            if i == row {
                continue;
            }
            let f = self.t[(i, col)];
            if f != 0.0 {
                for j in 0..ncols {
                    let v = self.t[(row, j)];
                    self.t[(i, j)] -= f * v;
                }
                self.t[(i, col)] = 0.0;
            }
        }
        self.basis[row] = col;
    }

    /// Runs primal simplex on the objective row; columns `>= allowed` never enter.
    /// Returns `false` if the objective is unbounded below.
    fn optimize(&mut self, allowed: usize) -> bool {
        let rhs = self.rhs_col();
        let obj = self.rows;
        let scale = |t: &DMatrix<f64>, j: usize| {
            (0..obj).map(|i| t[(i, j)].abs()).fold(1.0, f64::max)
        };
        loop {
            // Bland: lowest-index column with negative reduced cost.
            let entering = (0..allowed).find(|&j| self.t[(obj, j)] < -LP_TOL * scale(&self.t, j));
            let Some(col) = entering else {
                return true;
            };
            let mut best: Option<(usize, f64)> = None;
            for i in 0..obj {
                let a = self.t[(i, col)];
                if a > LP_TOL {
                    let ratio = self.t[(i, rhs)] / a;
                    match best {
                        None => best = Some((i, ratio)),
                        Some((bi, br)) => {
                            if ratio < br - 1e-12
                                || (ratio <= br + 1e-12 && self.basis[i] < self.basis[bi])
                            {
                                best = Some((i, ratio));
                            }
                        }
                    }
                }
            }
            match best {
                None => return false,
                Some((row, _)) => self.pivot(row, col),
            }
        }
    }
}

/// Solves `min cᵀy s.t. Ay = b, y ≥ 0`.
pub fn solve_standard_form(c: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> LpOutcome {
    let (m, n) = a.shape();
    assert_eq!(c.len(), n, "objective length");
    assert_eq!(b.len(), m, "rhs length");

    // Columns: n originals, m artificials, rhs.
    let mut t = DMatrix::<f64>::zeros(m + 1, n + m + 1);
    for i in 0..m {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[(i, j)] = sign * a[(i, j)];
        }
        t[(i, n + i)] = 1.0;
        t[(i, n + m)] = sign * b[i];
    }
    // Phase one objective: sum of artificials, expressed in reduced form.
    for j in 0..n {
        t[(m, j)] = -(0..m).map(|i| t[(i, j)]).sum::<f64>();
    }
    t[(m, n + m)] = -(0..m).map(|i| t[(i, n + m)]).sum::<f64>();

    let mut tab = Tableau { t, basis: (n..n + m).collect(), rows: m };
    tab.optimize(n + m);

    let b_scale = b.iter().map(|v| v.abs()).fold(1.0, f64::max);
    if -tab.t[(m, n + m)] > LP_TOL * b_scale {
        return LpOutcome::Infeasible;
    }

    // Drive zero-level artificials out of the basis; drop rows that are redundant.
    let mut row = 0;
    while row < tab.rows {
        if tab.basis[row] >= n {
            let col = (0..n).find(|&j| tab.t[(row, j)].abs() > LP_TOL);
            match col {
                Some(j) => tab.pivot(row, j),
                None => {
                    tab.t = tab.t.clone().remove_row(row);
                    tab.basis.remove(row);
                    tab.rows -= 1;
                    continue;
                }
            }
        }
        row += 1;
    }

    // Phase two objective.
    let obj = tab.rows;
    let rhs = tab.rhs_col();
    for j in 0..tab.t.ncols() {
        tab.t[(obj, j)] = 0.0;
    }
    for j in 0..n {
        tab.t[(obj, j)] = c[j];
    }
    for i in 0..obj {
        let cb = c[tab.basis[i]];
        if cb != 0.0 {
            for j in 0..=rhs {
                let v = tab.t[(i, j)];
                tab.t[(obj, j)] -= cb * v;
            }
        }
    }
    if !tab.optimize(n) {
        return LpOutcome::Unbounded;
    }

    let mut y = DVector::<f64>::zeros(n);
    for i in 0..obj {
        y[tab.basis[i]] = tab.t[(i, rhs)].max(0.0);
    }
    let value = c.dot(&y);
    LpOutcome::Optimal { y, value }
}
