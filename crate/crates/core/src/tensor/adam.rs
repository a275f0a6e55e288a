use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adam coefficients other than the learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers and step counter of Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub lr: f64,
    pub hyper: AdamHyper,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>], lr: f64, hyper: AdamHyper) -> Self {
        let zeros = |t: &Tensor<T>| vec![T::zero(); t.len()];
        AdamState {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
            lr,
            hyper,
        }
    }

    /// One update of every parameter from its gradient buffer.
    ///
    /// Gradients are left in place; the caller zeroes them.
    pub fn step(&mut self, params: &mut [Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::shape(format!("parameter {i} has no gradient")));
            }
            if p.len() != self.m[i].len() {
                return Err(Error::shape(format!("parameter {i} changed size")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let bc1 = T::of(1.0 - beta1.powi(t));
        let bc2 = T::of(1.0 - beta2.powi(t));
        let (lr, eps) = (T::of(self.lr), T::of(eps));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad().expect("checked above").to_vec();
            for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
