use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn with_learning_rate(self, learning_rate: f64) -> Self {
        AdamWConfig {
            learning_rate,
            ..self
        }
    }

    pub fn with_weight_decay(self, weight_decay: f64) -> Self {
        AdamWConfig {
            weight_decay,
            ..self
        }
    }

    pub fn with_betas(self, beta1: f64, beta2: f64) -> Self {
        AdamWConfig {
            beta1,
            beta2,
            ..self
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(len: usize, config: AdamWConfig) -> Self {
        AdamWState {
            config,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    pub fn reset(&mut self) {
        self.first_moment.iter_mut().for_each(|m| *m = 0.0);
        self.second_moment.iter_mut().for_each(|v| *v = 0.0);
        self.step = 0;
    }

    /// One AdamW update of `param` in place.
    ///
    /// Decay is decoupled: the parameter is first scaled by
    /// `1 - lr * weight_decay`, then moved by the bias-corrected Adam step.
    /// Nothing is modified when `grad` contains a non-finite entry.
    pub fn step(&mut self, param: &mut [f64], grad: &[f64]) -> Result<()> {
        if param.len() != self.len() || grad.len() != self.len() {
            return Err(Error::Dimension(format!(
                "adamw: param {} / grad {} / state {}",
                param.len(),
                grad.len(),
                self.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient entry {i} ({})",
                grad[i]
            )));
        }
        self.step += 1;
        let AdamWConfig {
            learning_rate: lr,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for (((p, &g), m), v) in param
            .iter_mut()
            .zip(grad)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *p *= decay;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamWState::step`].
pub fn adamw_step(param: &mut [f64], grad: &[f64], state: &mut AdamWState) -> Result<()> {
    state.step(param, grad)
}
