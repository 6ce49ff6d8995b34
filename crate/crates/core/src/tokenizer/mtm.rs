//! Masked code modelling: a small bidirectional transformer predicts masked
//! code levels from the remaining ones.
//!
//! Unmasked positions are embedded by projecting their codebook vector, so
//! the masked-code loss also shapes the codebooks.

use serde::{Deserialize, Serialize};

use super::quantize::CodebookSet;
use crate::error::{Error, Result};
use crate::nn::params::{ParamMut, ParamRef, Parameters};
use crate::nn::softmax::cross_entropy;
use crate::nn::transformer::{Transformer, TransformerCache, TransformerConfig};
use crate::nn::lora::LoraCache;
use crate::nn::{axpy, LoraLinear, Matrix, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtxConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
}

impl Default for CtxConfig {
    fn default() -> Self {
        Self { d_model: 32, n_heads: 2, d_ff: 64, n_layers: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtxModel {
    /// `d_model x d_z`
    pub proj: Matrix,
    /// `M x d_model`
    pub level_emb: Matrix,
    pub mask_emb: Matrix,
    pub tf: Transformer,
    /// One classification head per level.
    pub heads: Vec<LoraLinear>,
    pub frozen: bool,
}

pub struct MtmCache {
    codes: Vec<usize>,
    masked: Vec<bool>,
    tf: TransformerCache,
    /// (position, head cache, logits gradient)
    dlogits: Vec<(usize, LoraCache, Vec<f64>)>,
}

impl CtxModel {
    pub fn new(cfg: CtxConfig, sizes: &[usize], d_z: usize, rng: &mut Stream) -> Self {
        let tcfg = TransformerConfig { d_model: cfg.d_model, n_heads: cfg.n_heads, d_ff: cfg.d_ff, n_layers: cfg.n_layers, causal: false };
        Self {
            proj: rng.xavier(cfg.d_model, d_z),
            level_emb: rng.normal_matrix(sizes.len(), cfg.d_model, 0.1),
            mask_emb: rng.normal_matrix(1, cfg.d_model, 0.1),
            tf: Transformer::new(tcfg, rng),
            heads: sizes.iter().map(|&k| LoraLinear::new(cfg.d_model, k, true, rng)).collect(),
            frozen: false,
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.tf.freeze_base();
        self.heads.iter_mut().for_each(LoraLinear::freeze_base);
    }

    fn inputs(&self, codes: &[usize], masked: &[bool], codebooks: &CodebookSet) -> Vec<Vec<f64>> {
        codes
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                let mut h = if masked[l] {
                    self.mask_emb.row(0).to_vec()
                } else {
                    self.proj.matvec(codebooks.levels[l].entry(c))
                };
                axpy(1.0, self.level_emb.row(l), &mut h);
                h
            })
            .collect()
    }

    /// Mean negative log-likelihood of the true codes at the masked
    /// positions, plus a cache for [`CtxModel::backward`].
    pub fn loss(&self, codes: &[usize], mask_positions: &[usize], codebooks: &CodebookSet) -> Result<(f64, MtmCache)> {
        let m = codes.len();
        if mask_positions.is_empty() {
            return Err(Error::Input("no masked positions".into()));
        }
        if let Some(&p) = mask_positions.iter().find(|&&p| p >= m) {
            return Err(Error::Input(format!("mask position {p} outside 0..{m}")));
        }
        if m == 1 {
            return Err(Error::DegenerateContext("a single-level code has no context once masked".into()));
        }
        let mut masked = vec![false; m];
        mask_positions.iter().for_each(|&p| masked[p] = true);
        let x = self.inputs(codes, &masked, codebooks);
        let mixes = vec![Vec::new(); m];
        let (hidden, tf_cache, _) = self.tf.forward(&x, &mixes, &[], None);
        let n_masked = masked.iter().filter(|&&b| b).count() as f64;
        let mut total = 0.0;
        let mut dlogits = Vec::new();
        for l in (0..m).filter(|&l| masked[l]) {
            let (logits, hc) = self.heads[l].forward_mix(&hidden[l], &[], None);
            let (ce, g) = cross_entropy(&logits, codes[l], None)?;
            total += ce;
            dlogits.push((l, hc, g.into_iter().map(|v| v / n_masked).collect()));
        }
        Ok((total / n_masked, MtmCache { codes: codes.to_vec(), masked, tf: tf_cache, dlogits }))
    }

    /// Accumulates `scale · ∂loss` into `grads` and `cb_grads`.
    pub fn backward(&self, cache: &MtmCache, scale: f64, codebooks: &CodebookSet, grads: &mut CtxModel, cb_grads: &mut CodebookSet) {
        let m = cache.codes.len();
        let d = self.tf.config.d_model;
        let mut dh = vec![vec![0.0; d]; m];
        for (l, hc, g) in &cache.dlogits {
            let g: Vec<f64> = g.iter().map(|v| v * scale).collect();
            self.heads[*l].backward(hc, &g, &mut grads.heads[*l], &mut dh[*l], None);
        }
        let (dx, _) = self.tf.backward(&cache.tf, &dh, &mut grads.tf);
        for (l, dxl) in dx.iter().enumerate() {
            if !self.frozen {
                axpy(1.0, dxl, grads.level_emb.row_mut(l));
            }
            if cache.masked[l] {
                if !self.frozen {
                    axpy(1.0, dxl, grads.mask_emb.row_mut(0));
                }
            } else {
                let e = codebooks.levels[l].entry(cache.codes[l]);
                if !self.frozen {
                    grads.proj.add_outer(1.0, dxl, e);
                }
                if !codebooks.levels[l].frozen {
                    self.proj.matvec_t_acc(dxl, cb_grads.levels[l].entries.row_mut(cache.codes[l]));
                }
            }
        }
    }
}

impl Parameters for CtxModel {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let f = self.frozen;
        let mut v = vec![
            ParamRef::new("proj", &self.proj, f),
            ParamRef::new("level_emb", &self.level_emb, f),
            ParamRef::new("mask_emb", &self.mask_emb, f),
        ];
        v.extend(self.tf.params_prefixed("tf"));
        for (i, h) in self.heads.iter().enumerate() {
            v.extend(h.params_prefixed(&format!("head{i}")));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let f = self.frozen;
        let mut v = vec![
            ParamMut::new("proj", &mut self.proj, f),
            ParamMut::new("level_emb", &mut self.level_emb, f),
            ParamMut::new("mask_emb", &mut self.mask_emb, f),
        ];
        v.extend(self.tf.params_mut_prefixed("tf"));
        for (i, h) in self.heads.iter_mut().enumerate() {
            v.extend(h.params_mut_prefixed(&format!("head{i}")));
        }
        v
    }
}

/// Samples mask positions: each level independently with `rate`, forcing at
/// least one masked and (for `m > 1`) at least one visible position.
pub fn sample_mask(m: usize, rate: f64, rng: &mut Stream) -> Vec<usize> {
    let mut mask: Vec<bool> = (0..m).map(|_| rng.bernoulli(rate)).collect();
    if !mask.iter().any(|&b| b) {
        mask[rng.below(m)] = true;
    }
    if m > 1 && mask.iter().all(|&b| b) {
        mask[rng.below(m)] = false;
    }
    (0..m).filter(|&i| mask[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, GradCheckOptions};
    use crate::nn::RngSeed;

    fn setup() -> (CtxModel, CodebookSet) {
        let mut rng = RngSeed::new(9, "mtm").stream();
        let cb = CodebookSet::new(3, 4, 6, &mut rng);
        let ctx = CtxModel::new(CtxConfig { d_model: 8, n_heads: 2, d_ff: 12, n_layers: 2 }, &[4, 4, 4], 6, &mut rng);
        (ctx, cb)
    }

    #[test]
    fn uniform_head_gives_ln_k() {
        let (mut ctx, cb) = setup();
        for h in &mut ctx.heads {
            h.weight.fill(0.0);
        }
        let (l, _) = ctx.loss(&[1, 2, 3], &[0, 2], &cb).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn certain_head_gives_near_zero() {
        let (mut ctx, cb) = setup();
        let codes = [1usize, 2, 3];
        for (l, h) in ctx.heads.iter_mut().enumerate() {
            h.weight.fill(0.0);
            h.bias.as_mut().unwrap().set(0, codes[l], 60.0);
        }
        let (l, _) = ctx.loss(&codes, &[1], &cb).unwrap();
        assert!(l < 1e-20);
    }

    #[test]
    fn single_level_is_degenerate() {
        let mut rng = RngSeed::new(9, "mtm").stream();
        let cb = CodebookSet::new(1, 4, 6, &mut rng);
        let ctx = CtxModel::new(CtxConfig::default(), &[4], 6, &mut rng);
        assert!(matches!(ctx.loss(&[0], &[0], &cb), Err(Error::DegenerateContext(_))));
    }

    #[test]
    fn gradients_pass_check() {
        let (ctx, cb) = setup();
        let codes = [2usize, 0, 3];
        let mask = [1usize];
        let (_, cache) = ctx.loss(&codes, &mask, &cb).unwrap();
        let mut g = ctx.zeroed();
        let mut gcb = cb.zeroed();
        ctx.backward(&cache, 1.0, &cb, &mut g, &mut gcb);
        let r = grad_check(&ctx, &g, |m| m.loss(&codes, &mask, &cb).unwrap().0, GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let r = grad_check(&cb, &gcb, |c| ctx.loss(&codes, &mask, c).unwrap().0, GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn mask_sampling_keeps_context() {
        let mut rng = RngSeed::new(1, "m").stream();
        for _ in 0..200 {
            let m = sample_mask(3, 0.9, &mut rng);
            assert!(!m.is_empty() && m.len() < 3);
        }
    }
}
