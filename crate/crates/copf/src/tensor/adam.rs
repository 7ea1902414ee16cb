//! Adam with bias correction: m, v moment buffers per parameter, update
//! `theta -= lr * m_hat / (sqrt(v_hat) + eps)`.

use crate::error::{CopfError, Result};
use crate::tensor::params::ParameterStore;

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0 }
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// One update over every parameter in the store. Aborts without
    /// touching anything if any gradient entry is non-finite, naming the
    /// offending parameter.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        for (_, p) in store.iter() {
            if !p.grad.is_finite() {
                return Err(CopfError::Numeric(format!(
                    "non-finite gradient for parameter {}",
                    p.name
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.param_mut(id);
            let grads = p.grad.values().to_vec();
            for (i, &g) in grads.iter().enumerate() {
                let m = &mut p.moment1.values_mut()[i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                let m_hat = *m / bias1;
                let v = &mut p.moment2.values_mut()[i];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let v_hat = *v / bias2;
                p.value.values_mut()[i] -=
                    self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dense::DenseMatrix;

    /// Hand recursion of the update rule, independent of the optimizer code.
    fn reference_updates(grads: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut m, mut v, mut theta) = (0.0, 0.0, 0.0);
        let mut out = Vec::new();
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            let before = theta;
            theta -= lr * m_hat / (v_hat.sqrt() + eps);
            out.push(theta - before);
        }
        out
    }

    fn scalar_store(value: f64) -> ParameterStore {
        let mut store = ParameterStore::new();
        store.add("theta", DenseMatrix::scalar(value)).unwrap();
        store
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = scalar_store(0.7);
        let mut adam = Adam::new(1e-3);
        adam.step(&mut store).unwrap();
        let id = store.id("theta").unwrap();
        assert_eq!(store.value(id).scalar_value(), 0.7);
        assert_eq!(store.param(id).moment1.scalar_value(), 0.0);
        assert_eq!(store.param(id).moment2.scalar_value(), 0.0);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let mut store = scalar_store(0.0);
        let id = store.id("theta").unwrap();
        store.grad_mut(id).values_mut()[0] = 1.0;
        let mut adam = Adam::new(1e-3);
        adam.step(&mut store).unwrap();
        let update = store.value(id).scalar_value();
        let expected = reference_updates(&[1.0], 1e-3)[0];
        assert_eq!(update, expected);
        // The bias-corrected first step is lr within epsilon wiggle.
        assert!((update + 1e-3).abs() < 1e-8, "update {update}");
    }

    #[test]
    fn repeated_identical_gradients_follow_the_moment_recursion() {
        let mut store = scalar_store(0.0);
        let id = store.id("theta").unwrap();
        let mut adam = Adam::new(1e-3);
        let expected = reference_updates(&[1.0, 1.0], 1e-3);
        let mut prev = 0.0;
        for step_expected in expected {
            store.zero_grads();
            store.grad_mut(id).values_mut()[0] = 1.0;
            adam.step(&mut store).unwrap();
            let now = store.value(id).scalar_value();
            assert_eq!(now - prev, step_expected);
            // Effective step stays strictly below lr.
            assert!((now - prev).abs() < 1e-3);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let mut store = scalar_store(0.0);
        let id = store.id("theta").unwrap();
        store.grad_mut(id).values_mut()[0] = f64::NAN;
        let mut adam = Adam::new(1e-3);
        let err = adam.step(&mut store).unwrap_err().to_string();
        assert!(err.contains("theta"), "{err}");
        assert_eq!(store.value(id).scalar_value(), 0.0);
    }
}
