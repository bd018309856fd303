//! Adam with bias correction, one moment pair per named parameter.

use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const DEFAULT_LR: f64 = 1e-3;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &impl ParamSet, lr: f64) -> Self {
        let sizes: Vec<usize> = params.params().iter().map(|m| m.numel()).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update; `grads` must be in the parameter set's canonical order.
    pub fn step(&mut self, params: &mut impl ParamSet, grads: &[Vec<f64>]) -> Result<()> {
        let mut slots = params.params_mut();
        if grads.len() != slots.len() {
            return Err(Error::Contract(format!(
                "optimizer got {} gradient buffers for {} parameters",
                grads.len(),
                slots.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((slot, grad), (m, v)) in slots
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if grad.len() != slot.numel() {
                return Err(Error::Contract(format!(
                    "gradient buffer of {} values for parameter of {}",
                    grad.len(),
                    slot.numel()
                )));
            }
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                slot.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
