//! Bias-corrected Adam.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the given (parameter, gradient) pairs. All pairs share
    /// the same step counter, matching a single optimizer step over a model.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (pid, grad) in grads {
            let param = store.get_mut(*pid);
            if param.shape() != grad.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: param.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let n = param.numel();
            let (m, v) = self
                .moments
                .entry(*pid)
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let pdata = param.data_mut();
            for i in 0..n {
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                pdata[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Plain SGD update at the same learning rate (used by the optional
    /// non-adaptive mode of the dynamic-weighting trainer).
    pub fn sgd_step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        self.step += 1;
        for (pid, grad) in grads {
            let param = store.get_mut(*pid);
            if param.shape() != grad.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    lhs: param.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                *p -= self.lr * g;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_magnitude_equals_lr() {
        // With any constant nonzero gradient, the bias-corrected first update
        // is lr * g / (|g| + eps) ~ lr in magnitude.
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]), true);
        let before = store.get(p).clone();
        let mut adam = AdamState::new(0.01);
        let g = Tensor::new(vec![3], vec![0.7, -0.7, 0.7]);
        adam.step(&mut store, &[(p, g)]).unwrap();
        for i in 0..3 {
            let delta = (store.get(p).data()[i] - before.data()[i]).abs();
            assert!((delta - 0.01).abs() < 1e-6, "delta={delta}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(vec![2], vec![1.0, 2.0]), true);
        let before = store.get(p).clone();
        let mut adam = AdamState::new(0.1);
        adam.step(&mut store, &[(p, Tensor::zeros(&[2]))]).unwrap();
        assert_eq!(store.get(p), &before);
    }

    #[test]
    fn two_steps_descend_quadratic() {
        // f(x) = x^2 from x=1 with lr=0.1: x must strictly decrease twice.
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::scalar(1.0), true);
        let mut adam = AdamState::new(0.1);
        let mut prev = store.get(p).item();
        for _ in 0..2 {
            let x = store.get(p).item();
            let g = Tensor::scalar(2.0 * x);
            adam.step(&mut store, &[(p, g)]).unwrap();
            let now = store.get(p).item();
            assert!(now < prev, "expected decrease, {now} >= {prev}");
            prev = now;
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::zeros(&[2]), true);
        let mut adam = AdamState::new(0.1);
        let err = adam.step(&mut store, &[(p, Tensor::zeros(&[3]))]);
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }
}
