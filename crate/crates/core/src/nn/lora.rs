//! Linear maps with named low-rank adapters.

use serde::{Deserialize, Serialize};

use super::params::{LoraMeta, ParamMut, ParamRef, Parameters};
use super::rng::Stream;
use super::{axpy, dot, Matrix};
use crate::error::{Error, Result};

/// One low-rank pair: `delta(x) = scale · B (A x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub name: String,
    /// `rank x d_in`
    pub a: Matrix,
    /// `d_out x rank`
    pub b: Matrix,
    pub alpha: f64,
    pub scale: f64,
    pub frozen: bool,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }
}

/// Mixing weight per adapter index, as consumed by [`LoraLinear::forward_mix`].
pub type Mix = [(usize, f64)];

/// Dropout applied to `A x` while training.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut Stream,
}

#[derive(Clone, Debug)]
pub struct LoraCache {
    x: Vec<f64>,
    /// (adapter index, mix weight, dropped-out `A x`, dropout multipliers)
    branches: Vec<(usize, f64, Vec<f64>, Option<Vec<f64>>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraLinear {
    /// Frozen-able base weight `W0`, `d_out x d_in`.
    pub weight: Matrix,
    pub bias: Option<Matrix>,
    pub base_frozen: bool,
    adapters: Vec<LoraAdapter>,
    active: Vec<(usize, f64)>,
}

impl LoraLinear {
    pub fn new(d_in: usize, d_out: usize, bias: bool, rng: &mut Stream) -> Self {
        Self::from_weight(rng.xavier(d_out, d_in), bias)
    }

    pub fn from_weight(weight: Matrix, bias: bool) -> Self {
        let d_out = weight.rows();
        Self {
            weight,
            bias: bias.then(|| Matrix::zeros(1, d_out)),
            base_frozen: false,
            adapters: Vec::new(),
            active: Vec::new(),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn adapter_mut(&mut self, idx: usize) -> &mut LoraAdapter {
        &mut self.adapters[idx]
    }

    /// Adds an adapter with Xavier-uniform `A` and all-zero `B`, so the
    /// adapted map equals the base map until `B` is trained.
    pub fn add_adapter(
        &mut self,
        name: &str,
        rank: usize,
        alpha: f64,
        rng: &mut Stream,
    ) -> Result<usize> {
        if rank == 0 || rank > self.d_in().min(self.d_out()) {
            return Err(Error::Config(format!(
                "adapter `{name}` rank {rank} must be in 1..={}",
                self.d_in().min(self.d_out())
            )));
        }
        if self.adapters.iter().any(|a| a.name == name) {
            return Err(Error::Config(format!("adapter `{name}` already exists")));
        }
        let a = rng.xavier(rank, self.d_in());
        self.adapters.push(LoraAdapter {
            name: name.to_string(),
            a,
            b: Matrix::zeros(self.d_out(), rank),
            alpha,
            scale: alpha / rank as f64,
            frozen: false,
        });
        Ok(self.adapters.len() - 1)
    }

    pub fn adapter_index(&self, name: &str) -> Result<usize> {
        self.adapters
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::lookup("adapter", name))
    }

    pub fn set_active(&mut self, active: &[(&str, f64)]) -> Result<()> {
        self.active = active
            .iter()
            .map(|(n, w)| Ok((self.adapter_index(n)?, *w)))
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn freeze_base(&mut self) {
        self.base_frozen = true;
    }

    pub fn set_adapter_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let i = self.adapter_index(name)?;
        self.adapters[i].frozen = frozen;
        Ok(())
    }

    /// `W0 x + b + Σ_active w · scale · B (A x)` using the stored active set.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in() {
            return Err(Error::Shape(format!(
                "linear expects input of length {}, got {}",
                self.d_in(),
                x.len()
            )));
        }
        Ok(self.forward_mix(x, &self.active, None).0)
    }

    pub fn forward_mix(
        &self,
        x: &[f64],
        mix: &Mix,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> (Vec<f64>, LoraCache) {
        let mut y = self.weight.matvec(x);
        if let Some(b) = &self.bias {
            axpy(1.0, b.as_slice(), &mut y);
        }
        let mut branches = Vec::with_capacity(mix.len());
        for &(idx, w) in mix {
            let ad = &self.adapters[idx];
            let mut u = ad.a.matvec(x);
            let mask = match dropout.as_deref_mut() {
                Some(d) if d.rate > 0.0 => {
                    let keep = 1.0 / (1.0 - d.rate);
                    let m: Vec<f64> = (0..u.len())
                        .map(|_| if d.rng.bernoulli(d.rate) { 0.0 } else { keep })
                        .collect();
                    u.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                    Some(m)
                }
                _ => None,
            };
            let s = w * ad.scale;
            for (yo, brow) in y.iter_mut().zip(ad.b.as_slice().chunks_exact(ad.rank())) {
                *yo += s * dot(brow, &u);
            }
            branches.push((idx, w, u, mask));
        }
        (y, LoraCache { x: x.to_vec(), branches })
    }

    /// Accumulates parameter gradients into `grads`, input gradient into
    /// `dx` and mix-weight gradients into `dmix[adapter index]`.
    pub fn backward(
        &self,
        cache: &LoraCache,
        dy: &[f64],
        grads: &mut LoraLinear,
        dx: &mut [f64],
        dmix: Option<&mut [f64]>,
    ) {
        if !self.base_frozen {
            grads.weight.add_outer(1.0, dy, &cache.x);
            if let Some(gb) = &mut grads.bias {
                axpy(1.0, dy, gb.as_mut_slice());
            }
        }
        self.weight.matvec_t_acc(dy, dx);
        let mut dmix = dmix;
        for (idx, w, u, mask) in &cache.branches {
            let ad = &self.adapters[*idx];
            let s = w * ad.scale;
            // B^T dy
            let mut bt = vec![0.0; ad.rank()];
            ad.b.matvec_t_acc(dy, &mut bt);
            if let Some(dm) = dmix.as_deref_mut() {
                dm[*idx] += ad.scale * dot(&bt, u);
            }
            let mut du: Vec<f64> = bt.iter().map(|v| v * s).collect();
            if let Some(m) = mask {
                du.iter_mut().zip(m).for_each(|(d, k)| *d *= k);
            }
            if !ad.frozen {
                let g = &mut grads.adapters[*idx];
                g.b.add_outer(s, dy, u);
                g.a.add_outer(1.0, &du, &cache.x);
            }
            ad.a.matvec_t_acc(&du, dx);
        }
    }
}

impl Parameters for LoraLinear {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut v = vec![ParamRef::new("weight", &self.weight, self.base_frozen)];
        if let Some(b) = &self.bias {
            v.push(ParamRef::new("bias", b, self.base_frozen));
        }
        for ad in &self.adapters {
            let mut a = ParamRef::new(format!("lora.{}.a", ad.name), &ad.a, ad.frozen);
            a.lora = Some(LoraMeta { rank: ad.rank(), alpha: ad.alpha, scale: ad.scale });
            v.push(a);
            v.push(ParamRef::new(format!("lora.{}.b", ad.name), &ad.b, ad.frozen));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let frozen = self.base_frozen;
        let mut v = vec![ParamMut::new("weight", &mut self.weight, frozen)];
        if let Some(b) = &mut self.bias {
            v.push(ParamMut::new("bias", b, frozen));
        }
        for ad in &mut self.adapters {
            let f = ad.frozen;
            v.push(ParamMut::new(format!("lora.{}.a", ad.name), &mut ad.a, f));
            v.push(ParamMut::new(format!("lora.{}.b", ad.name), &mut ad.b, f));
        }
        v
    }
}
