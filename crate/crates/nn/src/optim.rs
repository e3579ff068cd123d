use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moment estimates for every parameter of one store.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        let v = m.clone();
        Self { config, m, v, t: 0 }
    }
}

/// One bias-corrected Adam update using the gradients held in `store`.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(NnError::ShapeMismatch { op: "adam_step", lhs: vec![state.m.len()], rhs: vec![store.len()] });
    }
    state.t += 1;
    let AdamConfig { lr, beta1, beta2, epsilon } = state.config;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (k, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let grad = p.grad.data();
        let value = p.value.data_mut();
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            value[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        if value.iter().any(|x| !x.is_finite()) {
            return Err(NnError::NonFinite("adam_step"));
        }
    }
    Ok(())
}

/// Mini-batch training schedule shared by every trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingPolicy {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: Option<usize>,
    pub l2_lambda: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainingPolicy {
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.batch_size == 0 {
            errors.push("training.batch_size must be >= 1".to_string());
        }
        if self.max_epochs == 0 {
            errors.push("training.max_epochs must be >= 1".to_string());
        }
        if self.early_stop_patience == Some(0) {
            errors.push("training.early_stop_patience must be >= 1 when set".to_string());
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            errors.push("training.l2_lambda must be a finite value >= 0".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errors.push("training.learning_rate must be > 0".to_string());
        }
        errors
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, ..AdamConfig::default() }
    }
}

/// Tracks the best validation loss and signals when patience runs out.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: None, bad_epochs: 0 }
    }

    /// Records an epoch's loss. Returns `true` when the loss improved on the best so far.
    pub fn record(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}
