//! Feed-forward stacks of adapter-capable linear layers.

use serde::{Deserialize, Serialize};

use super::lora::{Dropout, LoraCache, LoraLinear, Mix};
use super::params::{ParamMut, ParamRef, Parameters};
use super::rng::Stream;
use super::softmax::sigmoid;
use crate::error::{Error, Result};

/// SiLU, `x · σ(x)`.
#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Linear layers with SiLU between them (none after the last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<LoraLinear>,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    pre: Vec<Vec<f64>>,
    lin: Vec<LoraCache>,
}

impl Mlp {
    /// `dims = [d_in, h1, ..., d_out]`
    pub fn new(dims: &[usize], rng: &mut Stream) -> Self {
        let layers = dims.windows(2).map(|w| LoraLinear::new(w[0], w[1], true, rng)).collect();
        Self { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().expect("non-empty").d_out()
    }

    pub fn add_adapter(&mut self, name: &str, rank: usize, alpha: f64, rng: &mut Stream) -> Result<()> {
        for l in &mut self.layers {
            let r = rank.min(l.d_in().min(l.d_out()));
            l.add_adapter(name, r, alpha, rng)?;
        }
        Ok(())
    }

    pub fn adapter_index(&self, name: &str) -> Result<usize> {
        self.layers[0].adapter_index(name)
    }

    pub fn freeze_base(&mut self) {
        self.layers.iter_mut().for_each(LoraLinear::freeze_base);
    }

    pub fn set_adapter_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.layers.iter_mut().try_for_each(|l| l.set_adapter_frozen(name, frozen))
    }

    pub fn forward(&self, x: &[f64], mix: &Mix) -> Result<Vec<f64>> {
        if x.len() != self.d_in() {
            return Err(Error::Shape(format!("mlp expects {} inputs, got {}", self.d_in(), x.len())));
        }
        Ok(self.forward_train(x, mix, None).0)
    }

    pub fn forward_train(&self, x: &[f64], mix: &Mix, mut dropout: Option<&mut Dropout<'_>>) -> (Vec<f64>, MlpCache) {
        let mut h = x.to_vec();
        let mut cache = MlpCache { pre: Vec::new(), lin: Vec::new() };
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            let (y, c) = l.forward_mix(&h, mix, dropout.as_deref_mut());
            cache.lin.push(c);
            if i + 1 < n {
                h = y.iter().map(|&v| silu(v)).collect();
                cache.pre.push(y);
            } else {
                h = y;
            }
        }
        (h, cache)
    }

    /// Returns the input gradient; accumulates parameter gradients.
    pub fn backward(&self, cache: &MlpCache, dy: &[f64], grads: &mut Mlp, mut dmix: Option<&mut [f64]>) -> Vec<f64> {
        let mut d = dy.to_vec();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let mut dx = vec![0.0; l.d_in()];
            l.backward(&cache.lin[i], &d, &mut grads.layers[i], &mut dx, dmix.as_deref_mut());
            if i > 0 {
                for (g, &p) in dx.iter_mut().zip(&cache.pre[i - 1]) {
                    *g *= silu_grad(p);
                }
            }
            d = dx;
        }
        d
    }
}

impl Parameters for Mlp {
    fn params(&self) -> Vec<ParamRef<'_>> {
        self.layers.iter().enumerate().flat_map(|(i, l)| l.params_prefixed(&format!("l{i}"))).collect()
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        self.layers.iter_mut().enumerate().flat_map(|(i, l)| l.params_mut_prefixed(&format!("l{i}"))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, GradCheckOptions};
    use crate::nn::rng::RngSeed;

    #[test]
    fn mlp_with_adapter_passes_grad_check() {
        let mut rng = RngSeed::new(11, "mlp").stream();
        let mut mlp = Mlp::new(&[5, 7, 3], &mut rng);
        mlp.add_adapter("d", 2, 4.0, &mut rng).unwrap();
        for l in &mut mlp.layers {
            let b = rng.normal_matrix(l.d_out(), 2, 0.3);
            l.adapter_mut(0).b = b;
        }
        let x = rng.normal_vec(5, 1.0);
        let target = rng.normal_vec(3, 1.0);
        let mix = [(0usize, 0.7)];
        let loss = |m: &Mlp| {
            let y = m.forward(&x, &mix).unwrap();
            y.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        let (y, cache) = mlp.forward_train(&x, &mix, None);
        let dy: Vec<f64> = y.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
        let mut g = mlp.zeroed();
        mlp.backward(&cache, &dy, &mut g, None);
        let r = grad_check(&mlp, &g, loss, GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
