//! A two-way gate read from a Gaussian bottleneck sample.

use serde::{Deserialize, Serialize};

use crate::nn::lora::LoraCache;
use crate::nn::mlp::{silu, silu_grad, Mlp, MlpCache};
use crate::nn::params::{ParamMut, ParamRef, Parameters};
use crate::nn::softmax::sigmoid;
use crate::nn::{LoraLinear, Stream};

/// KL divergence of `N(m, diag(exp(s)))` from the standard normal.
pub fn vib_kl(m: &[f64], s: &[f64]) -> f64 {
    0.5 * m.iter().zip(s).map(|(mi, si)| mi * mi + si.exp() - 1.0 - si).sum::<f64>()
}

/// How the bottleneck is read.
#[derive(Clone, Copy, Debug)]
pub enum Sample<'a> {
    /// Posterior mean, no sampling.
    Eval,
    /// Reparameterised sample with the given standard-normal noise.
    Noise(&'a [f64]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VibRouter {
    pub trunk: Mlp,
    pub mean: LoraLinear,
    pub logvar: LoraLinear,
    pub gate: LoraLinear,
    pub frozen: bool,
}

pub struct RouterCache {
    trunk: MlpCache,
    pre: Vec<f64>,
    feat: Vec<f64>,
    mean: LoraCache,
    logvar: LoraCache,
    m: Vec<f64>,
    s: Vec<f64>,
    noise: Option<Vec<f64>>,
    gate: LoraCache,
    pub alpha: f64,
    pub kl: f64,
}

impl VibRouter {
    /// Trunk `d_in -> hidden -> hidden`, heads of width `d_r`, scalar gate.
    pub fn new(d_in: usize, hidden: usize, d_r: usize, rng: &mut Stream) -> Self {
        let mut logvar = LoraLinear::new(hidden, d_r, true, rng);
        logvar.weight.scale(0.1);
        Self {
            trunk: Mlp::new(&[d_in, hidden, hidden], rng),
            mean: LoraLinear::new(hidden, d_r, true, rng),
            logvar,
            gate: LoraLinear::new(d_r, 1, true, rng),
            frozen: false,
        }
    }

    pub fn d_r(&self) -> usize {
        self.mean.d_out()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.trunk.freeze_base();
        for l in [&mut self.mean, &mut self.logvar, &mut self.gate] {
            l.freeze_base();
        }
    }

    pub fn set_gate_bias(&mut self, b: f64) {
        self.gate.bias.as_mut().expect("gate has a bias").set(0, 0, b);
    }

    pub fn forward(&self, x: &[f64], sample: Sample<'_>) -> RouterCache {
        let (pre, trunk) = self.trunk.forward_train(x, &[], None);
        let feat: Vec<f64> = pre.iter().map(|&v| silu(v)).collect();
        let (m, mean) = self.mean.forward_mix(&feat, &[], None);
        let (s, logvar) = self.logvar.forward_mix(&feat, &[], None);
        let (z, noise) = match sample {
            Sample::Eval => (m.clone(), None),
            Sample::Noise(eps) => {
                let z = m.iter().zip(&s).zip(eps).map(|((mi, si), e)| mi + (0.5 * si).exp() * e).collect();
                (z, Some(eps.to_vec()))
            }
        };
        let (g, gate) = self.gate.forward_mix(&z, &[], None);
        let kl = vib_kl(&m, &s);
        RouterCache { trunk, pre, feat, mean, logvar, m, s, noise, gate, alpha: sigmoid(g[0]), kl }
    }

    pub fn alpha(&self, x: &[f64], sample: Sample<'_>) -> f64 {
        self.forward(x, sample).alpha
    }

    /// Accumulates gradients of `dalpha · α + kl_weight · KL`.
    pub fn backward(&self, c: &RouterCache, dalpha: f64, kl_weight: f64, grads: &mut VibRouter) {
        let dg = [dalpha * c.alpha * (1.0 - c.alpha)];
        let mut dz = vec![0.0; self.d_r()];
        self.gate.backward(&c.gate, &dg, &mut grads.gate, &mut dz, None);
        let mut dm: Vec<f64> = dz.clone();
        let mut ds = vec![0.0; self.d_r()];
        if let Some(eps) = &c.noise {
            for ((d, (si, e)), z) in ds.iter_mut().zip(c.s.iter().zip(eps)).zip(&dz) {
                *d += z * 0.5 * (0.5 * si).exp() * e;
            }
        }
        for ((dmi, dsi), (mi, si)) in dm.iter_mut().zip(ds.iter_mut()).zip(c.m.iter().zip(&c.s)) {
            *dmi += kl_weight * mi;
            *dsi += kl_weight * 0.5 * (si.exp() - 1.0);
        }
        let mut dfeat = vec![0.0; c.feat.len()];
        self.mean.backward(&c.mean, &dm, &mut grads.mean, &mut dfeat, None);
        self.logvar.backward(&c.logvar, &ds, &mut grads.logvar, &mut dfeat, None);
        let dpre: Vec<f64> = dfeat.iter().zip(&c.pre).map(|(d, p)| d * silu_grad(*p)).collect();
        self.trunk.backward(&c.trunk, &dpre, &mut grads.trunk, None);
    }
}

impl Parameters for VibRouter {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut v = self.trunk.params_prefixed("trunk");
        v.extend(self.mean.params_prefixed("mean"));
        v.extend(self.logvar.params_prefixed("logvar"));
        v.extend(self.gate.params_prefixed("gate"));
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut v = self.trunk.params_mut_prefixed("trunk");
        v.extend(self.mean.params_mut_prefixed("mean"));
        v.extend(self.logvar.params_mut_prefixed("logvar"));
        v.extend(self.gate.params_mut_prefixed("gate"));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, GradCheckOptions};
    use crate::nn::RngSeed;

    #[test]
    fn kl_closed_forms() {
        assert_eq!(vib_kl(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((vib_kl(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
        assert!((vib_kl(&[0.0], &[1.0]) - 0.5 * (std::f64::consts::E - 2.0)).abs() < 1e-12);
        assert!((vib_kl(&[0.0], &[1.0]) - 0.35914).abs() < 1e-5);
    }

    #[test]
    fn gate_bias_extremes_saturate() {
        let mut rng = RngSeed::new(1, "r").stream();
        let mut r = VibRouter::new(4, 8, 3, &mut rng);
        let x = rng.normal_vec(4, 1.0);
        r.set_gate_bias(f64::NEG_INFINITY);
        assert_eq!(r.alpha(&x, Sample::Eval), 0.0);
        r.set_gate_bias(f64::INFINITY);
        assert_eq!(r.alpha(&x, Sample::Eval), 1.0);
    }

    #[test]
    fn reparameterised_gradient_passes_check() {
        let mut rng = RngSeed::new(2, "r").stream();
        let r = VibRouter::new(4, 6, 3, &mut rng);
        let x = rng.normal_vec(4, 1.0);
        let eps = rng.normal_vec(3, 1.0);
        // Objective: 1.7 α + 0.3 KL.
        let c = r.forward(&x, Sample::Noise(&eps));
        let mut g = r.zeroed();
        r.backward(&c, 1.7, 0.3, &mut g);
        let loss = |p: &VibRouter| {
            let c = p.forward(&x, Sample::Noise(&eps));
            1.7 * c.alpha + 0.3 * c.kl
        };
        let rep = grad_check(&r, &g, loss, GradCheckOptions::default()).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    proptest::proptest! {
        #[test]
        fn kl_is_non_negative_and_zero_only_at_the_prior(m in proptest::collection::vec(-5.0f64..5.0, 1..8), s in proptest::collection::vec(-5.0f64..5.0, 8)) {
            let s = &s[..m.len()];
            let kl = vib_kl(&m, s);
            proptest::prop_assert!(kl >= 0.0);
            let at_prior = m.iter().chain(s).all(|v| *v == 0.0);
            proptest::prop_assert_eq!(kl == 0.0, at_prior);
        }
    }
}
