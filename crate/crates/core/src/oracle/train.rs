//! Supervised retraining of the hidden stack with the output layer frozen.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HiddenStack, OracleError, OracleState, ReplayBuffer, Result, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// `M`.
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Heavy-ball coefficient; 0 is plain gradient descent.
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 256, epochs: 20, learning_rate: 1e-3, momentum: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub hidden: HiddenStack,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn scaled(input: &DVector<f64>, scale: &DVector<f64>) -> DVector<f64> {
    input.component_mul(scale)
}

/// `(1/M) Σ ‖h − Kᵀφ‖²`.
pub fn batch_loss(hidden: &HiddenStack, k: &DMatrix<f64>, input_scale: &DVector<f64>, batch: &[Sample]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let total: f64 = batch
        .iter()
        .map(|s| {
            let cache = hidden.forward_cache(scaled(&s.input, input_scale));
            let last = cache.post.last().expect("nonempty stack");
            let pred = k.rows(0, 1).transpose() + k.rows(1, last.len()).tr_mul(last);
            (pred.column(0) - &s.label).norm_squared()
        })
        .sum();
    total / batch.len() as f64
}

/// Loss and its gradient in [`HiddenStack::params`] order.
pub fn batch_loss_gradient(
    hidden: &HiddenStack,
    k: &DMatrix<f64>,
    input_scale: &DVector<f64>,
    batch: &[Sample],
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; hidden.n_params()];
    if batch.is_empty() {
        return (0.0, grad);
    }
    let inv_m = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for s in batch {
        let cache = hidden.forward_cache(scaled(&s.input, input_scale));
        let last = cache.post.last().expect("nonempty stack");
        let nl = last.len();
        let resid = k.row(0).transpose() + k.rows(1, nl).tr_mul(last) - &s.label;
        loss += resid.norm_squared();
        let g = k.rows(1, nl) * &resid * 2.0;
        hidden.backward(&cache, g, Some((&mut grad, inv_m)));
    }
    (loss * inv_m, grad)
}

/// Gradient descent on a fixed batch. The returned stack is the best one seen,
/// so `final_loss ≤ initial_loss`.
pub fn train_on_batch(
    hidden: &HiddenStack,
    k: &DMatrix<f64>,
    input_scale: &DVector<f64>,
    batch: &[Sample],
    cfg: &TrainConfig,
) -> TrainOutcome {
    let mut current = hidden.clone();
    let mut params = current.params();
    let mut velocity = vec![0.0; params.len()];
    let initial_loss = batch_loss(hidden, k, input_scale, batch);
    let mut best = (initial_loss, params.clone());
    for _ in 0..cfg.epochs {
        let (loss, grad) = batch_loss_gradient(&current, k, input_scale, batch);
        if loss < best.0 {
            best = (loss, params.clone());
        }
        for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
            *v = cfg.momentum * *v - cfg.learning_rate * g;
            *p += *v;
        }
        current.set_params(&params).expect("same shape");
    }
    if cfg.epochs > 0 {
        let loss = batch_loss(&current, k, input_scale, batch);
        if loss < best.0 {
            best = (loss, params);
        }
    }
    let mut out = hidden.clone();
    out.set_params(&best.1).expect("same shape");
    TrainOutcome { hidden: out, initial_loss, final_loss: best.0 }
}

/// Draws `M` distinct samples uniformly from `buf`.
pub fn draw_batch(buf: &ReplayBuffer, batch_size: usize, seed: u64) -> Result<Vec<Sample>> {
    if buf.len() < batch_size {
        return Err(OracleError::InsufficientData { have: buf.len(), need: batch_size });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample_indices(&mut rng, buf.len(), batch_size).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| buf.entries()[i].clone()).collect())
}

/// Retrains the hidden stack of `state` against its current output weights.
pub fn train_hidden(state: &OracleState, buf: &ReplayBuffer, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    let batch = draw_batch(buf, cfg.batch_size, seed)?;
    Ok(train_on_batch(state.hidden(), state.output_weights(), state.input_scale(), &batch, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{Activation, NetworkArch, WritePolicy};
    use rand::Rng;

    fn setup(seed: u64) -> (OracleState, ReplayBuffer) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = NetworkArch::new(3, vec![6, 4], vec![Activation::Tanh; 2], 2).unwrap();
        let w_bar = DVector::from_element(2, 5.0);
        let mut s = OracleState::new(arch, w_bar, 0.5, DVector::from_element(3, 1.0), &mut rng).unwrap();
        s.set_output_weights(DMatrix::from_fn(5, 2, |_, _| rng.gen_range(-1.0..1.0))).unwrap();
        let mut buf = ReplayBuffer::new(64, WritePolicy::Fifo).unwrap();
        for _ in 0..64 {
            let input = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let label = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            buf.push(Sample { input, label }).unwrap();
        }
        (s, buf)
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (s, buf) = setup(1);
        let cfg = TrainConfig { batch_size: 16, epochs: 0, ..Default::default() };
        let out = train_hidden(&s, &buf, &cfg, 3).unwrap();
        assert_eq!(&out.hidden, s.hidden());
        assert_eq!(out.final_loss, out.initial_loss);
    }

    #[test]
    fn insufficient_data() {
        let (s, buf) = setup(2);
        let cfg = TrainConfig { batch_size: 65, ..Default::default() };
        assert_eq!(
            train_hidden(&s, &buf, &cfg, 0),
            Err(OracleError::InsufficientData { have: 64, need: 65 })
        );
    }

    #[test]
    fn loss_never_increases() {
        let (s, buf) = setup(3);
        // A step size far too large for the problem still returns the best stack.
        let cfg = TrainConfig { batch_size: 32, epochs: 10, learning_rate: 50.0, momentum: 0.0 };
        let out = train_hidden(&s, &buf, &cfg, 4).unwrap();
        assert!(out.final_loss <= out.initial_loss);
    }

    #[test]
    fn batches_are_seeded() {
        let (_, buf) = setup(4);
        assert_eq!(draw_batch(&buf, 10, 9).unwrap(), draw_batch(&buf, 10, 9).unwrap());
        assert_ne!(draw_batch(&buf, 10, 9).unwrap(), draw_batch(&buf, 10, 10).unwrap());
    }
}
