//! Decoupled-weight-decay Adam.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::Parameters;
use super::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every non-frozen parameter of `model` accepted
    /// by `trainable`. Gradients are checked for finiteness before anything
    /// is modified.
    pub fn step<P: Parameters>(
        &mut self,
        model: &mut P,
        grads: &P,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<()> {
        let grads = grads.params();
        let params = model.params_mut();
        if grads.len() != params.len() {
            return Err(Error::Shape("gradient set does not match parameter set".into()));
        }
        for (p, g) in params.iter().zip(&grads) {
            if p.frozen || !trainable(&p.name) {
                continue;
            }
            if p.value.shape() != g.value.shape() {
                return Err(Error::Shape(format!("gradient shape mismatch for `{}`", p.name)));
            }
            if !g.value.is_finite() {
                return Err(Error::Divergence { param: p.name.clone(), epoch: None });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (p, g) in params.into_iter().zip(grads) {
            if p.frozen || !trainable(&p.name) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (Matrix::zeros(p.value.rows(), p.value.cols()), Matrix::zeros(p.value.rows(), p.value.cols())));
            let theta = p.value.as_mut_slice();
            let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
            for (((th, &gi), mi), vi) in theta.iter_mut().zip(g.value.as_slice()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *th -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *th);
            }
        }
        Ok(())
    }
}
