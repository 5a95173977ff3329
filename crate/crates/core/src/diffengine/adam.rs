//! Adam optimizer with bias correction.

use std::collections::HashMap;

use ndarray::ArrayD;

use crate::error::{Result, TcsError};

use super::params::ParamSet;

/// Optimizer state: per-parameter first/second moment accumulators plus the
/// shared step count and hyperparameters.
#[derive(Debug)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first_moment: HashMap<String, ArrayD<f64>>,
    second_moment: HashMap<String, ArrayD<f64>>,
}

impl AdamState {
    /// Defaults beta1=0.9, beta2=0.999, epsilon=1e-8.
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: HashMap::new(),
            second_moment: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    /// Apply one Adam update to every parameter in the set, reading the
    /// gradients accumulated by `backward`. Aborts on any non-finite
    /// gradient, naming the parameter.
    pub fn step(&mut self, params: &ParamSet) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, tensor) in params.iter() {
            let grad = tensor.grad().ok_or_else(|| TcsError::InvalidInput(format!(
                "adam_step: parameter `{name}` has no gradient accumulator"
            )))?;
            if let Some(v) = grad.iter().find(|v| !v.is_finite()) {
                return Err(TcsError::NonFinite {
                    context: "adam_step".into(),
                    detail: format!("gradient of parameter `{name}` contains {v}"),
                });
            }
            let m = self
                .first_moment
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .second_moment
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            if m.shape() != grad.shape() {
                return Err(TcsError::ShapeMismatch(format!(
                    "adam_step: moment shape {:?} vs grad {:?} for `{name}`",
                    m.shape(),
                    grad.shape()
                )));
            }
            m.zip_mut_with(&grad, |mv, &g| *mv = self.beta1 * *mv + (1.0 - self.beta1) * g);
            v.zip_mut_with(&grad, |vv, &g| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g
            });
            let mut new_values = tensor.values().clone();
            ndarray::Zip::from(&mut new_values)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mv, &vv| {
                    let m_hat = mv / bc1;
                    let v_hat = vv / bc2;
                    *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                });
            tensor.set_values(new_values)?;
        }
        Ok(())
    }

    /// Drop moment state for parameters no longer present (after a head
    /// swap the fresh head must not inherit stale moments).
    pub fn retain_params(&mut self, params: &ParamSet) {
        let keep: std::collections::HashSet<&str> =
            params.iter().map(|(n, _)| n).collect();
        self.first_moment.retain(|k, _| keep.contains(k.as_str()));
        self.second_moment.retain(|k, _| keep.contains(k.as_str()));
    }
}
