use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Adam with bias correction over a fixed set of registered parameters.
///
/// Gradients are read but never cleared; the caller zeroes them between steps.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    params: Vec<ParamId>,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore, params: Vec<ParamId>) -> Self {
        let first_moment = params.iter().map(|&id| vec![0.0; store.get(id).len()]).collect::<Vec<_>>();
        let second_moment = first_moment.clone();
        Self {
            config,
            params,
            first_moment,
            second_moment,
            step_count: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.first_moment[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.second_moment[i]
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for &id in &self.params {
            if store.get(id).grad().is_none() {
                return Err(Error::MissingGrad(store.name(id).into()));
            }
        }
        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as f64;
        let bc1 = 1.0 - libm::pow(c.beta1, t);
        let bc2 = 1.0 - libm::pow(c.beta2, t);
        for (i, &id) in self.params.iter().enumerate() {
            let p = store.get_mut(id);
            let g = p.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.first_moment[i], &mut self.second_moment[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= c.learning_rate * mhat / (libm::sqrt(vhat) + c.epsilon);
            }
        }
        Ok(())
    }
}
