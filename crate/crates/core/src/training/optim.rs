use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::numeric::Gradients;
use crate::training::params::ParameterStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to the parameters named in `grads`.
    ///
    /// Every gradient must belong to `trainable`; anything else is an error, so
    /// a frozen tensor can never be written. Trainable parameters without a
    /// gradient in this step are left untouched.
    pub fn update(&mut self, store: &mut ParameterStore, grads: &Gradients<f32>, trainable: &BTreeSet<String>) -> Result<(), ModelError> {
        for (name, g) in grads {
            if !trainable.contains(name) {
                return Err(ModelError::InvalidConfig {
                    field: name.clone(),
                    msg: "gradient offered for a frozen parameter".into(),
                });
            }
            let p = store.get(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(ModelError::Shape(format!("gradient for {name} has shape {:?}, parameter {:?}", g.shape(), p.shape())));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let p = store.get_mut(name).expect("checked above");
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi as f64;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                let xv = *x as f64;
                *x = (xv - c.learning_rate * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * xv)) as f32;
            }
        }
        Ok(())
    }
}
