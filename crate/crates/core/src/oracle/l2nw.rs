use nalgebra::{DMatrix, DVector};

use super::{OracleError, Result};

/// Regularised Nadaraya-Watson regression over a fixed-size ring buffer.
///
/// Slots start as zero sentinels with a cleared validity bit; invalid slots
/// carry exactly zero kernel weight.
#[derive(Debug, Clone, PartialEq)]
pub struct L2nwEstimator {
    inputs: Vec<DVector<f64>>,
    labels: Vec<DVector<f64>>,
    valid: Vec<bool>,
    next: usize,
    bandwidth: f64,
    lambda: f64,
    state_dim: usize,
}

impl L2nwEstimator {
    pub fn new(
        capacity: usize,
        state_dim: usize,
        input_dim: usize,
        bandwidth: f64,
        lambda: f64,
    ) -> Result<Self> {
        if capacity == 0 {
            return Err(OracleError::InvalidParam("capacity must be positive".into()));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) || !(lambda > 0.0 && lambda.is_finite()) {
            return Err(OracleError::InvalidParam("bandwidth and regulariser must be positive".into()));
        }
        Ok(Self {
            inputs: vec![DVector::zeros(state_dim + input_dim); capacity],
            labels: vec![DVector::zeros(state_dim); capacity],
            valid: vec![false; capacity],
            next: 0,
            bandwidth,
            lambda,
            state_dim,
        })
    }

    pub fn capacity(&self) -> usize {
        self.valid.len()
    }

    pub fn len(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Stores `((x, u), h)`, overwriting the oldest slot once full.
    pub fn push(&mut self, x: &DVector<f64>, u: &DVector<f64>, h: &DVector<f64>) -> Result<()> {
        if x.len() + u.len() != self.inputs[0].len() || h.len() != self.state_dim {
            return Err(OracleError::ShapeMismatch("L2NW sample".into()));
        }
        if x.iter().chain(u.iter()).chain(h.iter()).any(|v| !v.is_finite()) {
            return Err(OracleError::NonFinite);
        }
        let slot = self.next;
        self.inputs[slot].rows_mut(0, x.len()).copy_from(x);
        self.inputs[slot].rows_mut(x.len(), u.len()).copy_from(u);
        self.labels[slot].copy_from(h);
        self.valid[slot] = true;
        self.next = (self.next + 1) % self.capacity();
        Ok(())
    }

    fn query(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut q = DVector::zeros(x.len() + u.len());
        q.rows_mut(0, x.len()).copy_from(x);
        q.rows_mut(x.len(), u.len()).copy_from(u);
        q
    }

    fn kernel(&self, i: usize, q: &DVector<f64>) -> f64 {
        if !self.valid[i] {
            return 0.0;
        }
        let d2 = (q - &self.inputs[i]).norm_squared();
        (-d2 / (2.0 * self.bandwidth * self.bandwidth)).exp()
    }

    /// `Σ k_i h_i / (λ + Σ k_i)`.
    pub fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let q = Self::query(x, u);
        let mut num = DVector::zeros(self.state_dim);
        let mut den = self.lambda;
        for i in 0..self.capacity() {
            let k = self.kernel(i, &q);
            if k != 0.0 {
                num.axpy(k, &self.labels[i], 1.0);
                den += k;
            }
        }
        num / den
    }

    /// `(ĥ, ∂ĥ/∂x, ∂ĥ/∂u)`.
    pub fn predict_with_jacobian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let q = Self::query(x, u);
        let nq = q.len();
        let mut num = DVector::zeros(self.state_dim);
        let mut den = self.lambda;
        let mut dnum = DMatrix::zeros(self.state_dim, nq);
        let mut dden = DVector::zeros(nq);
        let inv_bw2 = 1.0 / (self.bandwidth * self.bandwidth);
        for i in 0..self.capacity() {
            let k = self.kernel(i, &q);
            if k == 0.0 {
                continue;
            }
            num.axpy(k, &self.labels[i], 1.0);
            den += k;
            // ∂k/∂q = −k (q − q_i) / b²
            let dk = (&q - &self.inputs[i]) * (-k * inv_bw2);
            dnum += &self.labels[i] * dk.transpose();
            dden += dk;
        }
        let h = &num / den;
        let jac = (dnum - &h * dden.transpose()) / den;
        let jx = jac.columns(0, x.len()).into_owned();
        let ju = jac.columns(x.len(), u.len()).into_owned();
        (h, jx, ju)
    }
}
