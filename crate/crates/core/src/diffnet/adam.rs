use serde::{Deserialize, Serialize};

use super::{Gradients, ParamVector};
use crate::{Error, Result};

/// Bias-corrected Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::Config(format!(
                "Adam betas must lie in (0, 1), got beta1={} beta2={}",
                self.beta1, self.beta2
            )));
        }
        if self.first_moment.len() != self.second_moment.len() {
            return Err(Error::Config("Adam moment arrays differ in length".into()));
        }
        if !(self.lr > 0.0 && self.eps > 0.0) {
            return Err(Error::Config("Adam lr and eps must be positive".into()));
        }
        Ok(())
    }

    /// Applies one update to `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Input(format!(
                "Adam length mismatch: params {}, grads {}, state {}",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("gradient entry {i} is not finite")));
        }
        self.step_count += 1;
        let step = self.step_count as i32;
        let correction1 = 1.0 - self.beta1.powi(step);
        let correction2 = 1.0 - self.beta2.powi(step);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::update`].
pub fn adam_step(
    params: &ParamVector,
    grads: &Gradients,
    state: &AdamState,
) -> Result<(ParamVector, AdamState)> {
    let mut next_params = params.clone();
    let mut next_state = state.clone();
    next_state.update(next_params.values_mut(), &grads.values)?;
    Ok((next_params, next_state))
}
