use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::rng::SeededRng;

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    HeFanIn(usize),
    Zeros,
}

/// Named parameters with matching gradient buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    inits: Vec<Init>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers and initializes a parameter, returning its id.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut SeededRng) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name '{name}'")));
        }
        let mut value = Tensor::zeros(shape);
        if let Init::HeFanIn(fan_in) = init {
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            value.data_mut().iter_mut().for_each(|v| *v = rng.normal() * std);
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(shape));
        self.values.push(value);
        self.inits.push(init);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn init(&self, id: usize) -> Init {
        self.inits[id]
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn grad(&self, id: usize) -> &Tensor {
        &self.grads[id]
    }

    pub fn grad_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.grads[id]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces every value with the same-named entry of `entries`.
    pub fn load(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::Checkpoint(format!("expected {} parameters, found {}", self.len(), entries.len())));
        }
        for (name, t) in entries {
            let id = self.id(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
            if t.shape() != self.values[id].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.values[id].shape()
                )));
            }
            self.values[id] = t.clone();
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0005 }
    }
}

/// Adam moments with bias correction. Weight decay is added to the gradient
/// as `weight_decay * theta` before the moment update.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.values.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in 0..store.len() {
            let (values, grads) = (&mut store.values[id], &store.grads[id]);
            let (m, v) = (self.m[id].data_mut(), self.v[id].data_mut());
            for (i, (theta, &g0)) in values.data_mut().iter_mut().zip(grads.data()).enumerate() {
                let g = g0 + c.weight_decay * *theta;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *theta -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}
