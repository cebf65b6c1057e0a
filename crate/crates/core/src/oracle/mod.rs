//! Uncertainty estimators for the learned model `x⁺ = A x + B u + ĥ(x, u)`.
//!
//! The network oracle splits into a hidden stack producing bounded features
//! `φ = [1; ψ_L(…)]` and an output matrix `K` adapted online by a projected
//! normalised-gradient law. The hidden stack is retrained offline by
//! [`train`] and swapped in whole.

mod buffer;
mod l2nw;
pub mod train;

pub use buffer::{ReplayBuffer, Sample, WritePolicy};
pub use l2nw::L2nwEstimator;
pub use train::{
    batch_loss, batch_loss_gradient, draw_batch, train_hidden, train_on_batch, TrainConfig, TrainOutcome,
};

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plant::PlantModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("buffer holds {have} samples, {need} required")]
    InsufficientData { have: usize, need: usize },
    #[error("non-finite sample")]
    NonFinite,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, OracleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative given the pre-activation `v` and the output `a = ψ(v)`.
    fn derivative(self, v: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// `|ψ| ≤ 1` everywhere.
    pub fn is_bounded(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
        }
    }

    fn from_name(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            _ => Err(OracleError::Parse(format!("unknown activation {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkArch {
    /// `d + m`.
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub activations: Vec<Activation>,
    /// `d`.
    pub output_dim: usize,
}

impl NetworkArch {
    pub fn new(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        activations: Vec<Activation>,
        output_dim: usize,
    ) -> Result<Self> {
        let arch = Self { input_dim, hidden_widths, activations, output_dim };
        arch.validate()?;
        Ok(arch)
    }

    /// Two tanh layers of widths 32 and 16.
    pub fn default_for(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_widths: vec![32, 16],
            activations: vec![Activation::Tanh; 2],
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(OracleError::InvalidArch("zero input or output width".into()));
        }
        if self.hidden_widths.is_empty() {
            return Err(OracleError::InvalidArch("at least one hidden layer is required".into()));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(OracleError::InvalidArch("zero hidden width".into()));
        }
        if self.activations.len() != self.hidden_widths.len() {
            return Err(OracleError::InvalidArch("one activation per hidden layer".into()));
        }
        if !self.activations.last().is_some_and(|a| a.is_bounded()) {
            return Err(OracleError::InvalidArch("last hidden activation must be bounded".into()));
        }
        Ok(())
    }

    /// `n_L + 1`.
    pub fn feature_dim(&self) -> usize {
        self.hidden_widths.last().copied().unwrap_or(0) + 1
    }

    /// `√(n_L + 1)`, the feature-norm bound.
    pub fn sigma(&self) -> f64 {
        (self.feature_dim() as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Forward-pass intermediates of one input.
struct ForwardCache {
    /// Scaled network input.
    input: DVector<f64>,
    pre: Vec<DVector<f64>>,
    post: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStack {
    pub layers: Vec<DenseLayer>,
    pub activations: Vec<Activation>,
}

impl HiddenStack {
    /// Uniform weights in `±1/√fan_in`, zero biases.
    pub fn init<R: Rng>(arch: &NetworkArch, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(arch.hidden_widths.len());
        let mut fan_in = arch.input_dim;
        for &w in &arch.hidden_widths {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weights = DMatrix::from_fn(w, fan_in, |_, _| rng.gen_range(-bound..=bound));
            layers.push(DenseLayer { weights, bias: DVector::zeros(w) });
            fan_in = w;
        }
        Self { layers, activations: arch.activations.clone() }
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.weights.shape()).collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flattened parameters: per layer, weights column-major then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(OracleError::ShapeMismatch(format!(
                "{} parameters for a stack of {}",
                params.len(),
                self.n_params()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.as_mut_slice().copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    fn forward_cache(&self, input: DVector<f64>) -> ForwardCache {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<DVector<f64>> = Vec::with_capacity(self.layers.len());
        for (l, act) in self.layers.iter().zip(&self.activations) {
            let a_in = post.last().unwrap_or(&input);
            let v = &l.weights * a_in + &l.bias;
            let a = v.map(|s| act.apply(s));
            pre.push(v);
            post.push(a);
        }
        ForwardCache { input, pre, post }
    }

    /// Back-propagates `g = ∂ℓ/∂ψ_L` through the cache. Returns `∂ℓ/∂input`
    /// (scaled input) and, if `grads` is given, accumulates `scale · ∂ℓ/∂θ`
    /// into it in [`HiddenStack::params`] order.
    fn backward(
        &self,
        cache: &ForwardCache,
        g: DVector<f64>,
        mut grads: Option<(&mut [f64], f64)>,
    ) -> DVector<f64> {
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |acc, l| {
                let start = *acc;
                *acc += l.weights.len() + l.bias.len();
                Some(start)
            })
            .collect();
        let mut delta_post = g;
        for li in (0..self.layers.len()).rev() {
            let act = self.activations[li];
            let delta = cache.pre[li].zip_map(&cache.post[li], |v, a| act.derivative(v, a))
                .component_mul(&delta_post);
            let a_in = if li == 0 { &cache.input } else { &cache.post[li - 1] };
            if let Some((buf, scale)) = grads.as_mut() {
                let layer = &self.layers[li];
                let (rows, cols) = layer.weights.shape();
                let base = offsets[li];
                for c in 0..cols {
                    let ac = a_in[c] * *scale;
                    for r in 0..rows {
                        buf[base + c * rows + r] += delta[r] * ac;
                    }
                }
                let bbase = base + rows * cols;
                for r in 0..rows {
                    buf[bbase + r] += delta[r] * *scale;
                }
            }
            delta_post = self.layers[li].weights.tr_mul(&delta);
        }
        delta_post
    }

    fn check_against(&self, arch: &NetworkArch) -> Result<()> {
        let mut fan_in = arch.input_dim;
        if self.layers.len() != arch.hidden_widths.len() || self.activations != arch.activations {
            return Err(OracleError::ShapeMismatch("layer count or activations".into()));
        }
        for (l, &w) in self.layers.iter().zip(&arch.hidden_widths) {
            if l.weights.shape() != (w, fan_in) || l.bias.len() != w {
                return Err(OracleError::ShapeMismatch(format!(
                    "layer {:?}, expected ({w}, {fan_in})",
                    l.weights.shape()
                )));
            }
            fan_in = w;
        }
        Ok(())
    }

    /// Text snapshot: one `layer` header per layer followed by the weight rows and
    /// the bias line, 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "hidden {}", self.layers.len());
        for (l, act) in self.layers.iter().zip(&self.activations) {
            let (r, c) = l.weights.shape();
            let _ = writeln!(s, "layer {} {r} {c}", act.name());
            write_matrix_rows(&mut s, &l.weights);
            let _ = writeln!(s, "{}", join_values(l.bias.iter()));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let stack = Self::parse_lines(&mut lines)?;
        Ok(stack)
    }

    fn parse_lines<'a, I: Iterator<Item = &'a str>>(lines: &mut I) -> Result<Self> {
        let header = next_line(lines)?;
        let count: usize = parse_header(header, "hidden", 1)?[0]
            .parse()
            .map_err(|_| OracleError::Parse("layer count".into()))?;
        let mut layers = Vec::with_capacity(count);
        let mut activations = Vec::with_capacity(count);
        for _ in 0..count {
            let h = next_line(lines)?;
            let parts = parse_header(h, "layer", 3)?;
            activations.push(Activation::from_name(parts[0])?);
            let rows = parse_usize(parts[1])?;
            let cols = parse_usize(parts[2])?;
            let weights = read_matrix_rows(lines, rows, cols)?;
            let bias = DVector::from_vec(parse_values(next_line(lines)?, rows)?);
            layers.push(DenseLayer { weights, bias });
        }
        Ok(Self { layers, activations })
    }
}

fn fmt_value(v: f64) -> String {
    format!("{v:.16e}")
}

fn join_values<'a, I: Iterator<Item = &'a f64>>(vals: I) -> String {
    vals.map(|v| fmt_value(*v)).collect::<Vec<_>>().join(" ")
}

fn write_matrix_rows(s: &mut String, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        let _ = writeln!(s, "{}", join_values(m.row(r).iter()));
    }
}

fn next_line<'a, I: Iterator<Item = &'a str>>(lines: &mut I) -> Result<&'a str> {
    lines.next().ok_or_else(|| OracleError::Parse("unexpected end of snapshot".into()))
}

fn parse_header<'a>(line: &'a str, tag: &str, fields: usize) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.first() != Some(&tag) || parts.len() != fields + 1 {
        return Err(OracleError::Parse(format!("expected `{tag}` header, got {line:?}")));
    }
    Ok(parts[1..].to_vec())
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|_| OracleError::Parse(format!("bad count {s:?}")))
}

fn parse_values(line: &str, expect: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| OracleError::Parse(e.to_string())))
        .collect::<Result<_>>()?;
    if vals.len() != expect {
        return Err(OracleError::Parse(format!("expected {expect} values, got {}", vals.len())));
    }
    Ok(vals)
}

fn read_matrix_rows<'a, I: Iterator<Item = &'a str>>(
    lines: &mut I,
    rows: usize,
    cols: usize,
) -> Result<DMatrix<f64>> {
    let mut vals = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        vals.extend(parse_values(next_line(lines)?, cols)?);
    }
    Ok(DMatrix::from_row_slice(rows, cols, &vals))
}

/// Radial projection of each column of `k_bar` onto the ball of radius `w_bar[i]`.
pub fn project_columns(k_bar: &DMatrix<f64>, w_bar: &DVector<f64>) -> DMatrix<f64> {
    let mut k = k_bar.clone();
    for (i, mut col) in k.column_iter_mut().enumerate() {
        let norm = col.norm();
        if norm > w_bar[i] {
            col *= w_bar[i] / norm;
            // Rounding can leave the norm an ulp above the bound.
            while col.norm() > w_bar[i] {
                col *= 1.0 - f64::EPSILON;
            }
        }
    }
    k
}

/// `(1/γ) Σ_i ‖K^{(i)} − W*^{(i)}‖²`.
pub fn lyapunov_va(k: &DMatrix<f64>, w_star: &DMatrix<f64>, gamma: f64) -> f64 {
    (k - w_star).norm_squared() / gamma
}

/// Column bounds from the half-widths of a disturbance box: `factor · w`, floored.
pub fn column_bounds_from_box(half_widths: &DVector<f64>, factor: f64) -> DVector<f64> {
    half_widths.map(|w| (factor * w).max(1e-9))
}

/// Intermediate quantities of one adaptation step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptStep {
    pub x_tilde: DVector<f64>,
    pub k_prev: DMatrix<f64>,
    pub k_bar: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleState {
    arch: NetworkArch,
    hidden: HiddenStack,
    /// Elementwise multiplier applied to `(x, u)` before the first layer.
    input_scale: DVector<f64>,
    k: DMatrix<f64>,
    w_bar: DVector<f64>,
    gamma: f64,
    generation: u64,
}

impl OracleState {
    /// Seeded hidden stack, `K = 0`.
    pub fn new<R: Rng>(
        arch: NetworkArch,
        w_bar: DVector<f64>,
        gamma: f64,
        input_scale: DVector<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        let hidden = HiddenStack::init(&arch, rng);
        Self::from_parts(arch, hidden, input_scale, None, w_bar, gamma, 0)
    }

    pub fn from_parts(
        arch: NetworkArch,
        hidden: HiddenStack,
        input_scale: DVector<f64>,
        k: Option<DMatrix<f64>>,
        w_bar: DVector<f64>,
        gamma: f64,
        generation: u64,
    ) -> Result<Self> {
        arch.validate()?;
        hidden.check_against(&arch)?;
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(OracleError::InvalidParam(format!("learning rate {gamma} outside (0, 1)")));
        }
        if w_bar.len() != arch.output_dim || w_bar.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(OracleError::InvalidParam("column bounds must be positive, one per output".into()));
        }
        if input_scale.len() != arch.input_dim || input_scale.iter().any(|s| !s.is_finite()) {
            return Err(OracleError::InvalidParam("input scale".into()));
        }
        let k = k.unwrap_or_else(|| DMatrix::zeros(arch.feature_dim(), arch.output_dim));
        if k.shape() != (arch.feature_dim(), arch.output_dim) {
            return Err(OracleError::ShapeMismatch(format!("output weights {:?}", k.shape())));
        }
        let k = project_columns(&k, &w_bar);
        Ok(Self { arch, hidden, input_scale, k, w_bar, gamma, generation })
    }

    pub fn arch(&self) -> &NetworkArch {
        &self.arch
    }

    pub fn hidden(&self) -> &HiddenStack {
        &self.hidden
    }

    pub fn input_scale(&self) -> &DVector<f64> {
        &self.input_scale
    }

    pub fn output_weights(&self) -> &DMatrix<f64> {
        &self.k
    }

    /// Replaces `K`, projecting its columns onto the bounds.
    pub fn set_output_weights(&mut self, k: DMatrix<f64>) -> Result<()> {
        if k.shape() != self.k.shape() {
            return Err(OracleError::ShapeMismatch(format!("output weights {:?}", k.shape())));
        }
        self.k = project_columns(&k, &self.w_bar);
        Ok(())
    }

    pub fn column_bounds(&self) -> &DVector<f64> {
        &self.w_bar
    }

    /// `Σ_i W̄_i²`.
    pub fn w_bar_total(&self) -> f64 {
        self.w_bar.norm_squared()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn sigma(&self) -> f64 {
        self.arch.sigma()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    fn scaled_input(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(x.len() + u.len());
        z.rows_mut(0, x.len()).copy_from(x);
        z.rows_mut(x.len(), u.len()).copy_from(u);
        z.component_mul(&self.input_scale)
    }

    fn check_io(&self, x: &DVector<f64>, u: &DVector<f64>) {
        assert_eq!(x.len() + u.len(), self.arch.input_dim, "oracle input dimension");
    }

    /// `φ = [1; ψ_L(…)]`.
    pub fn features(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.check_io(x, u);
        let cache = self.hidden.forward_cache(self.scaled_input(x, u));
        let last = cache.post.last().expect("validated stack is nonempty");
        let mut phi = DVector::zeros(last.len() + 1);
        phi[0] = 1.0;
        phi.rows_mut(1, last.len()).copy_from(last);
        phi
    }

    /// `Kᵀφ`.
    pub fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.k.tr_mul(&self.features(x, u))
    }

    /// Prediction with `Kᵀφ` given precomputed features.
    pub fn predict_from_features(&self, phi: &DVector<f64>) -> DVector<f64> {
        self.k.tr_mul(phi)
    }

    /// Features, prediction and the prediction's Jacobians `(∂ĥ/∂x, ∂ĥ/∂u)`,
    /// one reverse pass per output.
    pub fn predict_with_jacobian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        self.check_io(x, u);
        let cache = self.hidden.forward_cache(self.scaled_input(x, u));
        let last = cache.post.last().expect("validated stack is nonempty");
        let mut phi = DVector::zeros(last.len() + 1);
        phi[0] = 1.0;
        phi.rows_mut(1, last.len()).copy_from(last);
        let h = self.k.tr_mul(&phi);
        let d = self.arch.output_dim;
        let mut jac = DMatrix::zeros(d, self.arch.input_dim);
        for i in 0..d {
            let g = self.k.column(i).rows(1, last.len()).into_owned();
            let row = self.hidden.backward(&cache, g, None).component_mul(&self.input_scale);
            jac.row_mut(i).copy_from(&row.transpose());
        }
        let jx = jac.columns(0, x.len()).into_owned();
        let ju = jac.columns(x.len(), u.len()).into_owned();
        (phi, h, jx, ju)
    }

    /// One projected update from cached features and the estimation error
    /// `x̃ = x̂ − x⁺`.
    pub fn adapt_with_features(&mut self, phi: &DVector<f64>, x_tilde: &DVector<f64>) -> AdaptStep {
        let k_prev = self.k.clone();
        let k_bar = &self.k - phi * x_tilde.transpose() * (self.gamma / phi.norm_squared());
        self.k = project_columns(&k_bar, &self.w_bar);
        AdaptStep { x_tilde: x_tilde.clone(), k_prev, k_bar }
    }

    /// Forms `x̂⁺ = A x + B u + ĥ(x, u)` with the current generation and adapts.
    pub fn adapt(
        &mut self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        x_next: &DVector<f64>,
        model: &PlantModel,
    ) -> AdaptStep {
        let phi = self.features(x, u);
        let x_hat = model.predict(x, u) + self.k.tr_mul(&phi);
        self.adapt_with_features(&phi, &(x_hat - x_next))
    }

    pub fn lyapunov_va(&self, w_star: &DMatrix<f64>) -> f64 {
        lyapunov_va(&self.k, w_star, self.gamma)
    }

    /// Installs a retrained hidden stack and bumps the generation; `K` is kept.
    pub fn swap_hidden(&mut self, hidden: HiddenStack) -> Result<()> {
        hidden.check_against(&self.arch)?;
        self.hidden = hidden;
        self.generation += 1;
        Ok(())
    }

    /// Full snapshot in the same text format as [`HiddenStack::to_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "oracle {} {}", self.arch.input_dim, self.arch.output_dim);
        let _ = writeln!(s, "generation {}", self.generation);
        let _ = writeln!(s, "gamma {}", fmt_value(self.gamma));
        let _ = writeln!(s, "input_scale {}", self.input_scale.len());
        let _ = writeln!(s, "{}", join_values(self.input_scale.iter()));
        let _ = writeln!(s, "w_bar {}", self.w_bar.len());
        let _ = writeln!(s, "{}", join_values(self.w_bar.iter()));
        s.push_str(&self.hidden.to_text());
        let _ = writeln!(s, "output {} {}", self.k.nrows(), self.k.ncols());
        write_matrix_rows(&mut s, &self.k);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let dims = parse_header(next_line(&mut lines)?, "oracle", 2)?;
        let (input_dim, output_dim) = (parse_usize(dims[0])?, parse_usize(dims[1])?);
        let generation: u64 = parse_header(next_line(&mut lines)?, "generation", 1)?[0]
            .parse()
            .map_err(|_| OracleError::Parse("generation".into()))?;
        let gamma: f64 = parse_header(next_line(&mut lines)?, "gamma", 1)?[0]
            .parse()
            .map_err(|_| OracleError::Parse("gamma".into()))?;
        let n = parse_usize(parse_header(next_line(&mut lines)?, "input_scale", 1)?[0])?;
        let input_scale = DVector::from_vec(parse_values(next_line(&mut lines)?, n)?);
        let n = parse_usize(parse_header(next_line(&mut lines)?, "w_bar", 1)?[0])?;
        let w_bar = DVector::from_vec(parse_values(next_line(&mut lines)?, n)?);
        let hidden = HiddenStack::parse_lines(&mut lines)?;
        let kd = parse_header(next_line(&mut lines)?, "output", 2)?;
        let k = read_matrix_rows(&mut lines, parse_usize(kd[0])?, parse_usize(kd[1])?)?;
        let arch = NetworkArch::new(
            input_dim,
            hidden.layers.iter().map(|l| l.bias.len()).collect(),
            hidden.activations.clone(),
            output_dim,
        )?;
        Self::from_parts(arch, hidden, input_scale, Some(k), w_bar, gamma, generation)
    }
}

/// The estimator plugged into the MPC cost.
#[derive(Debug, Clone, PartialEq)]
pub enum Oracle {
    Zero { state_dim: usize },
    Dnn(OracleState),
    L2nw(L2nwEstimator),
}

impl Oracle {
    pub fn is_zero(&self) -> bool {
        matches!(self, Oracle::Zero { .. })
    }

    pub fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self {
            Oracle::Zero { state_dim } => DVector::zeros(*state_dim),
            Oracle::Dnn(s) => s.predict(x, u),
            Oracle::L2nw(e) => e.predict(x, u),
        }
    }

    /// `(ĥ, ∂ĥ/∂x, ∂ĥ/∂u)`.
    pub fn predict_with_jacobian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        match self {
            Oracle::Zero { state_dim } => (
                DVector::zeros(*state_dim),
                DMatrix::zeros(*state_dim, x.len()),
                DMatrix::zeros(*state_dim, u.len()),
            ),
            Oracle::Dnn(s) => {
                let (_, h, jx, ju) = s.predict_with_jacobian(x, u);
                (h, jx, ju)
            }
            Oracle::L2nw(e) => e.predict_with_jacobian(x, u),
        }
    }
}
