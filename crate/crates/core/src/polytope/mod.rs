//! Half-space polytopes and the set operations behind tube constraint tightening.
//!
//! A [`Polytope`] is `{x : F x ≤ h}`. Everything here is phrased through support
//! functions `σ_P(d) = max_{x∈P} dᵀx`, which are evaluated by an LP on the dual
//! side (see [`lp`]). Minkowski sums are never formed explicitly: the offset
//! reduction a reachable tube imposes on a facet is a sum of supports.

pub mod lp;

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::linalg::{is_schur_stable, spectral_radius};
use lp::{solve_standard_form, LpOutcome, LP_TOL};

/// Default membership tolerance of [`Polytope::contains`].
pub const CONTAINS_TOL: f64 = 1e-9;

/// Iteration cap of the invariant-set fixpoint.
pub const DEFAULT_INVARIANT_MAX_ITER: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolytopeError {
    #[error("normals have {normals} rows but offsets have {offsets}")]
    RowMismatch { normals: usize, offsets: usize },
    #[error("a polytope needs at least one half-space")]
    NoRows,
    #[error("row {0} of the normal matrix is zero")]
    ZeroNormal(usize),
    #[error("non-finite entry in polytope data")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("support function is unbounded in the requested direction")]
    Unbounded,
    #[error("polytope is empty")]
    Infeasible,
    #[error("Pontryagin difference is empty")]
    EmptyResult,
    #[error("closed-loop matrix is not Schur stable (spectral radius {radius})")]
    NotSchurStable { radius: f64 },
    #[error("no robust invariant set exists inside the constraints")]
    Empty,
    #[error("invariant-set iteration hit its limit of {max_iter} steps")]
    IterationLimit { max_iter: usize, partial: Box<Polytope> },
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, PolytopeError>;

/// Convex polytope `{x : F x ≤ h}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    normals: DMatrix<f64>,
    offsets: DVector<f64>,
}

impl Polytope {
    pub fn new(normals: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self> {
        if normals.nrows() != offsets.len() {
            return Err(PolytopeError::RowMismatch {
                normals: normals.nrows(),
                offsets: offsets.len(),
            });
        }
        if normals.nrows() == 0 {
            return Err(PolytopeError::NoRows);
        }
        if normals.iter().chain(offsets.iter()).any(|v| !v.is_finite()) {
            return Err(PolytopeError::NonFinite);
        }
        if let Some(i) = (0..normals.nrows()).find(|&i| normals.row(i).amax() == 0.0) {
            return Err(PolytopeError::ZeroNormal(i));
        }
        Ok(Self { normals, offsets })
    }

    /// Axis-aligned box `lower ≤ x ≤ upper`, two rows per coordinate.
    pub fn from_box(lower: &[f64], upper: &[f64]) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(PolytopeError::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        let d = lower.len();
        let mut f = DMatrix::zeros(2 * d, d);
        let mut h = DVector::zeros(2 * d);
        for i in 0..d {
            f[(2 * i, i)] = 1.0;
            h[2 * i] = upper[i];
            f[(2 * i + 1, i)] = -1.0;
            h[2 * i + 1] = -lower[i];
        }
        Self::new(f, h)
    }

    /// The singleton `{0}` in `dim` dimensions.
    pub fn origin(dim: usize) -> Self {
        let z = vec![0.0; dim];
        Self::from_box(&z, &z).expect("origin box")
    }

    pub fn dim(&self) -> usize {
        self.normals.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.normals.nrows()
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.normals
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(PolytopeError::DimensionMismatch { expected: self.dim(), got });
        }
        Ok(())
    }

    /// `max_{x∈P} dᵀx`, via the dual LP `min hᵀy s.t. Fᵀy = d, y ≥ 0`.
    pub fn support(&self, direction: &DVector<f64>) -> Result<f64> {
        self.check_dim(direction.len())?;
        if direction.amax() == 0.0 {
            return if self.is_feasible() { Ok(0.0) } else { Err(PolytopeError::Infeasible) };
        }
        match solve_standard_form(&self.offsets, &self.normals.transpose(), direction) {
            LpOutcome::Optimal { value, .. } => Ok(value),
            // Dual unbounded: the primal has no feasible point.
            LpOutcome::Unbounded => Err(PolytopeError::Infeasible),
            LpOutcome::Infeasible => {
                if self.is_feasible() {
                    Err(PolytopeError::Unbounded)
                } else {
                    Err(PolytopeError::Infeasible)
                }
            }
        }
    }

    /// Supports along every row of `directions`.
    pub fn support_rows(&self, directions: &DMatrix<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(directions.nrows());
        for i in 0..directions.nrows() {
            out[i] = self.support(&directions.row(i).transpose())?;
        }
        Ok(out)
    }

    /// Nonemptiness by Farkas: `Fx ≤ h` is infeasible iff some `y ≥ 0`, `1ᵀy = 1`,
    /// `Fᵀy = 0` has `hᵀy < 0`.
    pub fn is_feasible(&self) -> bool {
        let (m, d) = self.normals.shape();
        let mut a = DMatrix::zeros(d + 1, m);
        a.view_mut((0, 0), (d, m)).copy_from(&self.normals.transpose());
        a.row_mut(d).fill(1.0);
        let mut b = DVector::zeros(d + 1);
        b[d] = 1.0;
        let scale = self.offsets.amax().max(1.0);
        match solve_standard_form(&self.offsets, &a, &b) {
            LpOutcome::Optimal { value, .. } => value >= -LP_TOL * scale,
            // Fᵀy = 0, 1ᵀy = 1 infeasible means no certificate exists.
            LpOutcome::Infeasible => true,
            LpOutcome::Unbounded => false,
        }
    }

    /// Boundedness via finiteness of the support along ± every coordinate axis.
    pub fn is_bounded(&self) -> bool {
        let d = self.dim();
        (0..d).all(|i| {
            [1.0, -1.0].iter().all(|&s| {
                let mut e = DVector::zeros(d);
                e[i] = s;
                self.support(&e).is_ok()
            })
        })
    }

    /// Membership `Fx ≤ h + tol`.
    pub fn contains_tol(&self, x: &DVector<f64>, tol: f64) -> bool {
        assert_eq!(x.len(), self.dim(), "point dimension");
        let fx = &self.normals * x;
        fx.iter().zip(self.offsets.iter()).all(|(a, b)| *a <= *b + tol)
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.contains_tol(x, CONTAINS_TOL)
    }

    /// Per-row slack `h − Fx`; negative entries are violations.
    pub fn slack(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.offsets - &self.normals * x
    }

    /// Same normals with offsets reduced by `margins`.
    pub fn tighten(&self, margins: &DVector<f64>) -> Self {
        assert_eq!(margins.len(), self.n_rows(), "one margin per facet");
        Self { normals: self.normals.clone(), offsets: &self.offsets - margins }
    }

    /// Exact Pontryagin difference `P ⊖ S` for an H-represented `P`.
    pub fn pontryagin_diff(&self, s: &Polytope) -> Result<Self> {
        self.check_dim(s.dim())?;
        let margins = s.support_rows(&self.normals)?;
        let out = self.tighten(&margins);
        if !out.is_feasible() {
            return Err(PolytopeError::EmptyResult);
        }
        Ok(out)
    }

    /// Stack of both half-space lists.
    pub fn intersect(&self, other: &Polytope) -> Result<Self> {
        self.check_dim(other.dim())?;
        let mut f = DMatrix::zeros(self.n_rows() + other.n_rows(), self.dim());
        f.view_mut((0, 0), (self.n_rows(), self.dim())).copy_from(&self.normals);
        f.view_mut((self.n_rows(), 0), (other.n_rows(), self.dim())).copy_from(&other.normals);
        let h = DVector::from_iterator(
            self.n_rows() + other.n_rows(),
            self.offsets.iter().chain(other.offsets.iter()).copied(),
        );
        Self::new(f, h)
    }

    /// `{x : M x ∈ P}` for a linear map `M` from the new space into this one.
    pub fn preimage(&self, map: &DMatrix<f64>) -> Result<Self> {
        self.check_dim(map.nrows())?;
        let f = &self.normals * map;
        let mut rows = Vec::new();
        for i in 0..f.nrows() {
            if f.row(i).amax() > 0.0 {
                rows.push(i);
            } else if self.offsets[i] < -LP_TOL {
                return Err(PolytopeError::Infeasible);
            }
        }
        if rows.is_empty() {
            return Err(PolytopeError::NoRows);
        }
        let f = f.select_rows(rows.iter());
        let h = self.offsets.select_rows(rows.iter());
        Self::new(f, h)
    }

    /// Whether row `k` of `candidate` is implied by the rows listed in `others`.
    fn row_is_implied(
        normals: &DMatrix<f64>,
        offsets: &DVector<f64>,
        others: &[usize],
        row: &DVector<f64>,
        offset: f64,
    ) -> bool {
        if others.is_empty() {
            return false;
        }
        let sub = Polytope {
            normals: normals.select_rows(others.iter()),
            offsets: offsets.select_rows(others.iter()),
        };
        match sub.support(row) {
            Ok(v) => v <= offset + LP_TOL * offset.abs().max(1.0),
            Err(_) => false,
        }
    }

    /// Drops half-spaces implied by the remaining ones.
    pub fn remove_redundant(&self) -> Result<Self> {
        if !self.is_feasible() {
            return Err(PolytopeError::Infeasible);
        }
        let mut keep: Vec<usize> = (0..self.n_rows()).collect();
        let mut k = 0;
        while k < keep.len() {
            let row = keep[k];
            let others: Vec<usize> = keep.iter().copied().filter(|&r| r != row).collect();
            if Self::row_is_implied(
                &self.normals,
                &self.offsets,
                &others,
                &self.normals.row(row).transpose(),
                self.offsets[row],
            ) {
                keep.remove(k);
            } else {
                k += 1;
            }
        }
        Ok(Self {
            normals: self.normals.select_rows(keep.iter()),
            offsets: self.offsets.select_rows(keep.iter()),
        })
    }

    /// Axis-aligned bounding box as `(lower, upper)`.
    pub fn bounding_box(&self) -> Result<(DVector<f64>, DVector<f64>)> {
        let d = self.dim();
        let mut lo = DVector::zeros(d);
        let mut hi = DVector::zeros(d);
        for i in 0..d {
            let mut e = DVector::zeros(d);
            e[i] = 1.0;
            hi[i] = self.support(&e)?;
            e[i] = -1.0;
            lo[i] = -self.support(&e)?;
        }
        Ok((lo, hi))
    }

    /// Uniform samples by rejection from the bounding box.
    pub fn sample<R: Rng>(&self, rng: &mut R, count: usize) -> Result<Vec<DVector<f64>>> {
        let (lo, hi) = self.bounding_box()?;
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while out.len() < count {
            attempts += 1;
            if attempts > 1000 * count.max(1) + 100_000 {
                break;
            }
            let x = DVector::from_fn(self.dim(), |i, _| {
                if hi[i] > lo[i] {
                    rng.gen_range(lo[i]..=hi[i])
                } else {
                    lo[i]
                }
            });
            if self.contains(&x) {
                out.push(x);
            }
        }
        Ok(out)
    }

    /// Plain-text matrix block: one `f₁ f₂ … | h` line per facet.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n_rows() {
            let row: Vec<String> = self.normals.row(i).iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "{} | {:e}", row.join(" "), self.offsets[i]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut offsets = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: &str| PolytopeError::Parse { line: ln + 1, msg: msg.into() };
            let (lhs, rhs) = line.split_once('|').ok_or_else(|| parse_err("missing '|'"))?;
            let row = lhs
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| parse_err(&e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(parse_err("inconsistent row length"));
                }
            }
            offsets.push(rhs.trim().parse::<f64>().map_err(|e| parse_err(&e.to_string()))?);
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(PolytopeError::NoRows);
        }
        let d = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Self::new(DMatrix::from_row_slice(offsets.len(), d, &flat), DVector::from_vec(offsets))
    }

    /// CSV with columns `f1,…,fd,h`.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let header: Vec<String> = (1..=self.dim()).map(|i| format!("f{i}")).collect();
        let _ = writeln!(s, "{},h", header.join(","));
        for i in 0..self.n_rows() {
            let row: Vec<String> = self.normals.row(i).iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "{},{:e}", row.join(","), self.offsets[i]);
        }
        s
    }
}

fn require_schur(a_cl: &DMatrix<f64>) -> Result<()> {
    if !is_schur_stable(a_cl) {
        return Err(PolytopeError::NotSchurStable { radius: spectral_radius(a_cl) });
    }
    Ok(())
}

/// Tube tightening offsets for the facet normals in the rows of `normals`.
///
/// Entry `i` (for `i = 0..=horizon`) holds, per facet `f`,
/// `Σ_{k<i} σ_W((A_clᵀ)ᵏ f)`, which is `σ_{R_i}(f)` for
/// `R_{i+1} = A_cl R_i ⊕ W`, `R_0 = {0}`.
pub fn tube_margins(
    a_cl: &DMatrix<f64>,
    w: &Polytope,
    normals: &DMatrix<f64>,
    horizon: usize,
) -> Result<Vec<DVector<f64>>> {
    require_schur(a_cl)?;
    if normals.ncols() != a_cl.nrows() {
        return Err(PolytopeError::DimensionMismatch { expected: a_cl.nrows(), got: normals.ncols() });
    }
    let mut out = Vec::with_capacity(horizon + 1);
    let mut acc = DVector::zeros(normals.nrows());
    out.push(acc.clone());
    // Rows of `dirs` are ((A_clᵀ)ᵏ f)ᵀ = fᵀ A_clᵏ.
    let mut dirs = normals.clone();
    for _ in 0..horizon {
        acc += w.support_rows(&dirs)?;
        out.push(acc.clone());
        dirs = &dirs * a_cl;
    }
    Ok(out)
}

/// Limit of [`tube_margins`] as the horizon grows, summed until the remaining
/// geometric tail is below `tol`.
pub fn asymptotic_margins(
    a_cl: &DMatrix<f64>,
    w: &Polytope,
    normals: &DMatrix<f64>,
    tol: f64,
) -> Result<DVector<f64>> {
    require_schur(a_cl)?;
    let mut acc = DVector::zeros(normals.nrows());
    let mut dirs = normals.clone();
    for _ in 0..100_000 {
        let step = w.support_rows(&dirs)?;
        acc += &step;
        dirs = &dirs * a_cl;
        if step.amax() < tol && dirs.amax() < tol {
            break;
        }
    }
    Ok(acc)
}

/// Tightening offsets for the three constraint families of the tube program.
#[derive(Debug, Clone, PartialEq)]
pub struct TighteningData {
    /// `σ_{R_i}` on the state facets, `i = 0..=N`.
    pub state: Vec<DVector<f64>>,
    /// `σ_{K R_i}` on the input facets, `i = 0..=N`.
    pub input: Vec<DVector<f64>>,
    /// `σ_{R_N}` on the terminal-set facets.
    pub terminal: DVector<f64>,
}

impl TighteningData {
    pub fn compute(
        a_cl: &DMatrix<f64>,
        gain: &DMatrix<f64>,
        w: &Polytope,
        state_set: &Polytope,
        input_set: &Polytope,
        terminal_set: &Polytope,
        horizon: usize,
    ) -> Result<Self> {
        let state = tube_margins(a_cl, w, state_set.normals(), horizon)?;
        // σ_{K R}(f) = σ_R(Kᵀ f).
        let input = tube_margins(a_cl, w, &(input_set.normals() * gain), horizon)?;
        let terminal = tube_margins(a_cl, w, terminal_set.normals(), horizon)?
            .pop()
            .expect("horizon + 1 entries");
        Ok(Self { state, input, terminal })
    }

    pub fn horizon(&self) -> usize {
        self.state.len() - 1
    }

    pub fn is_zero(&self) -> bool {
        self.state.iter().chain(self.input.iter()).all(|m| m.amax() == 0.0)
            && self.terminal.amax() == 0.0
    }
}

/// Result of the invariant-set fixpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantSet {
    pub set: Polytope,
    pub converged: bool,
    pub iterations: usize,
}

impl InvariantSet {
    pub fn require_converged(self, max_iter: usize) -> Result<Polytope> {
        if self.converged {
            Ok(self.set)
        } else {
            Err(PolytopeError::IterationLimit { max_iter, partial: Box::new(self.set) })
        }
    }
}

/// Maximal robust positively invariant set of `x⁺ = A_cl x + w`, `w ∈ W`,
/// inside `{x ∈ X_t, K x ∈ U_t}`.
///
/// Step `k` adds the constraint pre-images `G A_clᵏ x ≤ g − Σ_{j<k} σ_W((A_clʲ)ᵀ Gᵀ)`;
/// rows already implied by the current set are skipped, and the iteration stops
/// at the first step that adds nothing.
pub fn max_invariant_set(
    a_cl: &DMatrix<f64>,
    x_t: &Polytope,
    u_t: &Polytope,
    gain: &DMatrix<f64>,
    w: &Polytope,
    max_iter: usize,
) -> Result<InvariantSet> {
    require_schur(a_cl)?;
    let d = a_cl.nrows();
    x_t.check_dim(d)?;
    w.check_dim(d)?;
    let constraints = match u_t.preimage(gain) {
        Ok(input_rows) => x_t.intersect(&input_rows)?,
        // K x ∈ U_t holds for every x (e.g. K = 0).
        Err(PolytopeError::NoRows) => x_t.clone(),
        Err(PolytopeError::Infeasible) => return Err(PolytopeError::Empty),
        Err(e) => return Err(e),
    };
    let base_normals = constraints.normals().clone();
    let base_offsets = constraints.offsets().clone();

    let mut current = match constraints.remove_redundant() {
        Ok(p) => p,
        Err(PolytopeError::Infeasible) => return Err(PolytopeError::Empty),
        Err(e) => return Err(e),
    };

    let mut dirs = base_normals.clone();
    let mut margin = DVector::zeros(base_normals.nrows());
    for iter in 1..=max_iter {
        margin += w.support_rows(&dirs)?;
        dirs = &dirs * a_cl;
        let offsets = &base_offsets - &margin;

        let mut added_rows: Vec<DVector<f64>> = Vec::new();
        let mut added_offsets = Vec::new();
        for r in 0..dirs.nrows() {
            let row = dirs.row(r).transpose();
            if row.amax() < 1e-14 {
                if offsets[r] < -LP_TOL {
                    return Err(PolytopeError::Empty);
                }
                continue;
            }
            match current.support(&row) {
                Ok(v) if v <= offsets[r] + LP_TOL * offsets[r].abs().max(1.0) => {}
                Ok(_) | Err(PolytopeError::Unbounded) => {
                    added_rows.push(row);
                    added_offsets.push(offsets[r]);
                }
                Err(PolytopeError::Infeasible) => return Err(PolytopeError::Empty),
                Err(e) => return Err(e),
            }
        }
        if added_rows.is_empty() {
            return Ok(InvariantSet { set: current, converged: true, iterations: iter - 1 });
        }
        let extra = Polytope::new(
            DMatrix::from_fn(added_rows.len(), d, |i, j| added_rows[i][j]),
            DVector::from_vec(added_offsets),
        )?;
        current = match current.intersect(&extra)?.remove_redundant() {
            Ok(p) => p,
            Err(PolytopeError::Infeasible) => return Err(PolytopeError::Empty),
            Err(e) => return Err(e),
        };
    }
    Ok(InvariantSet { set: current, converged: false, iterations: max_iter })
}

/// Counts sampled points `x ∈ Ω` for which `A_cl x ⊕ W ⊄ Ω`, using the exact
/// support-function test `F A_cl x + σ_W(F) ≤ h`.
pub fn robust_invariance_violations<R: Rng>(
    omega: &Polytope,
    a_cl: &DMatrix<f64>,
    w: &Polytope,
    samples: usize,
    rng: &mut R,
) -> Result<usize> {
    let shrunk = omega.tighten(&w.support_rows(omega.normals())?);
    let pts = omega.sample(rng, samples)?;
    Ok(pts.iter().filter(|x| !shrunk.contains(&(a_cl * *x))).count())
}
