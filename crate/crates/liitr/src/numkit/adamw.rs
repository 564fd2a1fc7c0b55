//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn with_learning_rate(lr: f64) -> Self {
        Self {
            learning_rate: lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [self.learning_rate, self.beta1, self.beta2, self.epsilon];
        if pos.iter().any(|v| !(*v > 0.0)) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "invalid AdamW hyperparameters: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Optimizer state: step counter and first/second moment estimates, one
/// entry per parameter in the caller's canonical order.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    pub config: AdamWConfig,
}

impl AdamWState {
    pub fn new(param_count: usize, config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            step: 0,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            config,
        })
    }
}

/// One AdamW update over zipped parameter/gradient iterators.
///
/// `param ← param − lr · (m̂ / (√v̂ + ε) + weight_decay · param)` with
/// bias-corrected moments. The iterators must yield parameters in the same
/// order every call, matching the order used when sizing the state.
pub fn adamw_step<'a, P, G>(params: P, grads: G, state: &mut AdamWState) -> Result<()>
where
    P: Iterator<Item = &'a mut f64>,
    G: Iterator<Item = &'a f64>,
{
    state.step += 1;
    let c = &state.config;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);

    let mut count = 0usize;
    for (i, (p, g)) in params.zip(grads).enumerate() {
        if i >= state.first_moment.len() {
            return Err(Error::Usage(
                "more parameters than the optimizer state was sized for".into(),
            ));
        }
        if !g.is_finite() {
            return Err(Error::Training(format!(
                "non-finite gradient at parameter index {i}"
            )));
        }
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= c.learning_rate * (m_hat / (v_hat.sqrt() + c.epsilon) + c.weight_decay * *p);
        count = i + 1;
    }
    if count != state.first_moment.len() {
        return Err(Error::Usage(
            "fewer parameters than the optimizer state was sized for".into(),
        ));
    }
    Ok(())
}
