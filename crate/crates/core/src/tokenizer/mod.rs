//! Residual-quantised autoencoder that turns item embeddings into semantic
//! IDs, with reconstruction, commitment and masked-code objectives.

pub mod mtm;
mod pretrain;
pub mod quantize;
pub mod sids;

use serde::{Deserialize, Serialize};

pub use mtm::{sample_mask, CtxConfig, CtxModel};
pub use pretrain::{pretrain, EpochLog, PretrainLog};
pub use quantize::{kmeans, residual_quantize, Codebook, CodebookSet, Quantized};
pub use sids::{assign_dedup, read_sids, write_sids, SemanticId, SidMap};

use crate::data::Catalog;
use crate::error::{Error, Result};
use crate::nn::mlp::{Mlp, MlpCache};
use crate::nn::params::{ParamMut, ParamRef, Parameters};
use crate::nn::{sq_dist, Stream};

/// Architecture of the tokenizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    /// Number of code levels `M`.
    pub levels: usize,
    /// Entries per codebook `K`.
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub ctx: CtxConfig,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { levels: 3, codebook_size: 256, latent_dim: 32, hidden: vec![128, 128], ctx: CtxConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub mu: f64,
    pub lambda: f64,
    pub beta: f64,
    /// Defaults to `1/M` when unset.
    pub mask_rate: Option<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub kmeans_iters: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { mu: 1.0, lambda: 0.1, beta: 0.25, mask_rate: None, epochs: 100, lr: 1e-4, batch: 512, kmeans_iters: 20 }
    }
}

impl PretrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { mu: self.mu, lambda: self.lambda, beta: self.beta }
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.mu < 0.0 || self.lambda < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("pretraining weights must be non-negative".into()));
        }
        let r = self.mask_rate(levels);
        if levels > 1 && !(r > 0.0 && r < 1.0) {
            return Err(Error::Config(format!("mask rate {r} outside (0, 1)")));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn mask_rate(&self, levels: usize) -> f64 {
        self.mask_rate.unwrap_or(1.0 / levels.max(1) as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub mu: f64,
    pub lambda: f64,
    pub beta: f64,
}

/// Per-item loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub rec: f64,
    pub q: f64,
    pub mtm: f64,
    pub total: f64,
}

impl LossParts {
    pub fn add(&mut self, o: &LossParts) {
        self.rec += o.rec;
        self.q += o.q;
        self.mtm += o.mtm;
        self.total += o.total;
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.rec *= s;
        self.q *= s;
        self.mtm *= s;
        self.total *= s;
        self
    }
}

/// `(L_REC, L_Q)` for one item. `residuals[d]` is the residual quantised at
/// level `d`.
pub fn rq_losses(x: &[f64], x_hat: &[f64], residuals: &[Vec<f64>], codes: &[usize], codebooks: &CodebookSet, beta: f64) -> Result<(f64, f64)> {
    if x.len() != x_hat.len() || residuals.len() != codes.len() || codes.len() != codebooks.depth() {
        return Err(Error::Shape("inconsistent reconstruction or quantisation shapes".into()));
    }
    let rec = sq_dist(x, x_hat);
    let q = residuals
        .iter()
        .zip(codes)
        .zip(&codebooks.levels)
        .map(|((r, &c), cb)| (1.0 + beta) * sq_dist(r, cb.entry(c)))
        .sum();
    Ok((rec, q))
}

/// Stop-gradient backward of `weight · L_Q`: the codebook term moves the
/// selected entries toward the residuals, the commitment term moves the
/// residuals (hence the encoder output) toward the entries. Returns the
/// latent gradient.
pub fn rq_quant_backward(residuals: &[Vec<f64>], codes: &[usize], codebooks: &CodebookSet, beta: f64, weight: f64, cb_grads: &mut CodebookSet) -> Vec<f64> {
    let mut dz = vec![0.0; codebooks.dim()];
    for ((r, &c), (cb, g)) in residuals.iter().zip(codes).zip(codebooks.levels.iter().zip(&mut cb_grads.levels)) {
        let e = cb.entry(c);
        if !cb.frozen {
            for ((gi, ei), ri) in g.entries.row_mut(c).iter_mut().zip(e).zip(r) {
                *gi += 2.0 * weight * (ei - ri);
            }
        }
        for ((di, ei), ri) in dz.iter_mut().zip(e).zip(r) {
            *di += 2.0 * weight * beta * (ri - ei);
        }
    }
    dz
}

/// Base-point values that the stop-gradient and straight-through operators
/// hold constant. Finite differences of [`RqVae::surrogate_loss`] around the
/// base point reproduce the analytic gradient.
#[derive(Clone, Debug)]
pub struct Anchor {
    pub z: Vec<f64>,
    pub quant: Quantized,
    /// Selected entry per level at the base point.
    pub entries: Vec<Vec<f64>>,
    pub mask: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RqVae {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub codebooks: CodebookSet,
    pub ctx: CtxModel,
    pub frozen: bool,
}

impl RqVae {
    pub fn new(input_dim: usize, cfg: &TokenizerConfig, rng: &mut Stream) -> Result<Self> {
        if cfg.levels == 0 || cfg.codebook_size < 2 || cfg.latent_dim == 0 {
            return Err(Error::Config("tokenizer needs M >= 1 levels of K >= 2 entries".into()));
        }
        let mut enc_dims = vec![input_dim];
        enc_dims.extend(&cfg.hidden);
        enc_dims.push(cfg.latent_dim);
        let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
        let encoder = Mlp::new(&enc_dims, rng);
        let decoder = Mlp::new(&dec_dims, rng);
        let codebooks = CodebookSet::new(cfg.levels, cfg.codebook_size, cfg.latent_dim, rng);
        let ctx = CtxModel::new(cfg.ctx, &codebooks.sizes(), cfg.latent_dim, rng);
        Ok(Self { encoder, decoder, codebooks, ctx, frozen: false })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.d_in()
    }

    pub fn levels(&self) -> usize {
        self.codebooks.depth()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.encoder.freeze_base();
        self.decoder.freeze_base();
        self.codebooks.levels.iter_mut().for_each(|c| c.frozen = true);
        self.ctx.freeze();
    }

    /// Hash over the encoder, decoder and codebook arrays.
    pub fn frozen_hash(&self) -> String {
        self.param_hash(&|n| !n.starts_with("ctx.") && !n.contains(".lora."))
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.encoder.forward(x, &[])
    }

    pub fn quantize(&self, x: &[f64]) -> Result<Quantized> {
        residual_quantize(&self.encode(x)?, &self.codebooks)
    }

    /// `D(Q(E(x)))`.
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        let q = self.quantize(x)?;
        self.decoder.forward(&q.z_hat, &[])
    }

    pub fn reconstruct_latent(&self, z: &[f64]) -> Result<Vec<f64>> {
        let q = residual_quantize(z, &self.codebooks)?;
        self.decoder.forward(&q.z_hat, &[])
    }

    /// Loss components for one item; the masked-code term is zero when
    /// `mask` is empty.
    pub fn item_loss(&self, x: &[f64], mask: &[usize], w: LossWeights) -> Result<LossParts> {
        let z = self.encode(x)?;
        let quant = residual_quantize(&z, &self.codebooks)?;
        let x_hat = self.decoder.forward(&quant.z_hat, &[])?;
        let (rec, q) = rq_losses(x, &x_hat, &quant.residuals, &quant.codes, &self.codebooks, w.beta)?;
        let mtm = if mask.is_empty() { 0.0 } else { self.ctx.loss(&quant.codes, mask, &self.codebooks)?.0 };
        Ok(LossParts { rec, q, mtm, total: rec + w.mu * q + w.lambda * mtm })
    }

    /// Loss components for one item with gradients accumulated into `grads`
    /// (scaled by `scale`). Quantisation is crossed with the straight-through
    /// estimator.
    pub fn item_loss_grad(&self, x: &[f64], mask: &[usize], w: LossWeights, scale: f64, grads: &mut RqVae) -> Result<(LossParts, Quantized)> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!("item embedding has length {}, expected {}", x.len(), self.input_dim())));
        }
        let (z, enc_cache): (Vec<f64>, MlpCache) = self.encoder.forward_train(x, &[], None);
        let quant = residual_quantize(&z, &self.codebooks)?;
        let (x_hat, dec_cache) = self.decoder.forward_train(&quant.z_hat, &[], None);
        let (rec, q) = rq_losses(x, &x_hat, &quant.residuals, &quant.codes, &self.codebooks, w.beta)?;
        let dxh: Vec<f64> = x_hat.iter().zip(x).map(|(a, b)| 2.0 * scale * (a - b)).collect();
        let mut dz = self.decoder.backward(&dec_cache, &dxh, &mut grads.decoder, None);
        let dq = rq_quant_backward(&quant.residuals, &quant.codes, &self.codebooks, w.beta, scale * w.mu, &mut grads.codebooks);
        dz.iter_mut().zip(&dq).for_each(|(a, b)| *a += b);
        let mut mtm = 0.0;
        if !mask.is_empty() {
            let (l, cache) = self.ctx.loss(&quant.codes, mask, &self.codebooks)?;
            mtm = l;
            if w.lambda > 0.0 {
                self.ctx.backward(&cache, scale * w.lambda, &self.codebooks, &mut grads.ctx, &mut grads.codebooks);
            }
        }
        self.encoder.backward(&enc_cache, &dz, &mut grads.encoder, None);
        Ok((LossParts { rec, q, mtm, total: rec + w.mu * q + w.lambda * mtm }, quant))
    }

    pub fn anchor(&self, x: &[f64], mask: &[usize]) -> Result<Anchor> {
        let z = self.encode(x)?;
        let quant = residual_quantize(&z, &self.codebooks)?;
        let entries = quant.codes.iter().zip(&self.codebooks.levels).map(|(&c, cb)| cb.entry(c).to_vec()).collect();
        Ok(Anchor { z, quant, entries, mask: mask.to_vec() })
    }

    /// The pretraining objective with every stop-gradient operand and the
    /// straight-through offset fixed at `anchor`. Equals
    /// [`RqVae::item_loss`] at the anchor's base point.
    pub fn surrogate_loss(&self, x: &[f64], anchor: &Anchor, w: LossWeights) -> f64 {
        let (rec, commit, codebook, mtm) = self.surrogate_terms(x, anchor);
        rec + w.mu * (codebook + w.beta * commit) + w.lambda * mtm
    }

    /// `(L_REC, commitment sum, codebook sum, L_MTM)` of the surrogate.
    pub fn surrogate_terms(&self, x: &[f64], anchor: &Anchor) -> (f64, f64, f64, f64) {
        let z = self.encode(x).expect("anchor built from this input");
        let zq: Vec<f64> = z.iter().zip(anchor.quant.z_hat.iter().zip(&anchor.z)).map(|(zi, (h, b))| zi + (h - b)).collect();
        let x_hat = self.decoder.forward(&zq, &[]).expect("latent shape");
        let rec = sq_dist(x, &x_hat);
        let mut commit = 0.0;
        let mut codebook = 0.0;
        for (d, &c) in anchor.quant.codes.iter().enumerate() {
            let r_base = &anchor.quant.residuals[d];
            let r: Vec<f64> = z.iter().zip(r_base.iter().zip(&anchor.z)).map(|(zi, (rb, zb))| zi - (zb - rb)).collect();
            codebook += sq_dist(r_base, self.codebooks.levels[d].entry(c));
            commit += sq_dist(&r, &anchor.entries[d]);
        }
        let mtm = if anchor.mask.is_empty() { 0.0 } else { self.ctx.loss(&anchor.quant.codes, &anchor.mask, &self.codebooks).expect("valid mask").0 };
        (rec, commit, codebook, mtm)
    }

    /// Quantises every catalog item and resolves collisions.
    pub fn assign_sids(&self, catalog: &Catalog) -> Result<SidMap> {
        let codes = catalog
            .items()
            .iter()
            .map(|it| Ok((it.item_id.clone(), self.quantize(&it.embedding)?.codes)))
            .collect::<Result<Vec<_>>>()?;
        Ok(assign_dedup(codes))
    }
}

impl Parameters for RqVae {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut v = self.encoder.params_prefixed("enc");
        v.extend(self.decoder.params_prefixed("dec"));
        v.extend(self.codebooks.params_prefixed("codebooks"));
        v.extend(self.ctx.params_prefixed("ctx"));
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut v = self.encoder.params_mut_prefixed("enc");
        v.extend(self.decoder.params_mut_prefixed("dec"));
        v.extend(self.codebooks.params_mut_prefixed("codebooks"));
        v.extend(self.ctx.params_mut_prefixed("ctx"));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, GradCheckOptions};
    use crate::nn::{Matrix, RngSeed};

    fn small() -> (RqVae, Vec<f64>) {
        let mut rng = RngSeed::new(5, "rq").stream();
        let cfg = TokenizerConfig {
            levels: 3,
            codebook_size: 4,
            latent_dim: 4,
            hidden: vec![6],
            ctx: CtxConfig { d_model: 8, n_heads: 2, d_ff: 8, n_layers: 1 },
        };
        let mut m = RqVae::new(5, &cfg, &mut rng).unwrap();
        // Entries on the scale of the latents so every level is exercised.
        for cb in &mut m.codebooks.levels {
            cb.entries = rng.normal_matrix(4, 4, 0.5);
        }
        let x = rng.normal_vec(5, 1.0);
        (m, x)
    }

    #[test]
    fn identical_reconstruction_has_zero_rec() {
        let cb = CodebookSet::from_entries(vec![Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap()]).unwrap();
        let (rec, _) = rq_losses(&[1.0, 2.0], &[1.0, 2.0], &[vec![0.0, 0.0]], &[0], &cb, 0.25).unwrap();
        assert_eq!(rec, 0.0);
    }

    #[test]
    fn single_level_commitment_value() {
        let cb = CodebookSet::from_entries(vec![Matrix::from_rows(&[vec![0.0, 0.0], vec![5.0, 5.0]]).unwrap()]).unwrap();
        let (_, q) = rq_losses(&[0.0], &[0.0], &[vec![1.0, 0.0]], &[0], &cb, 0.25).unwrap();
        assert!((q - 1.25).abs() < 1e-15);
    }

    #[test]
    fn surrogate_equals_loss_at_base_point() {
        let (m, x) = small();
        let w = LossWeights { mu: 1.0, lambda: 0.1, beta: 0.25 };
        let a = m.anchor(&x, &[1]).unwrap();
        let direct = m.item_loss(&x, &[1], w).unwrap().total;
        assert!((m.surrogate_loss(&x, &a, w) - direct).abs() < 1e-12);
    }

    #[test]
    fn full_objective_passes_grad_check() {
        let (m, x) = small();
        let w = LossWeights { mu: 1.0, lambda: 0.1, beta: 0.25 };
        let mask = [0usize, 2];
        let mut g = m.zeroed();
        m.item_loss_grad(&x, &mask, w, 1.0, &mut g).unwrap();
        let a = m.anchor(&x, &mask).unwrap();
        let r = grad_check(&m, &g, |p| p.surrogate_loss(&x, &a, w), GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    /// The commitment term reaches only the encoder and the codebook term
    /// reaches only the codebooks.
    #[test]
    fn stop_gradient_routing() {
        let (m, x) = small();
        let a = m.anchor(&x, &[]).unwrap();
        let commit_only = |p: &RqVae| p.surrogate_terms(&x, &a).1;
        let codebook_only = |p: &RqVae| p.surrogate_terms(&x, &a).2;

        let mut g_commit = m.zeroed();
        let dz = rq_quant_backward(&a.quant.residuals, &a.quant.codes, &m.codebooks, 1.0, 1.0, &mut m.codebooks.zeroed());
        let (_, cache) = m.encoder.forward_train(&x, &[], None);
        m.encoder.backward(&cache, &dz, &mut g_commit.encoder, None);
        assert!(g_commit.codebooks.params().iter().all(|p| p.value.as_slice().iter().all(|&v| v == 0.0)));
        let r = grad_check(&m, &g_commit, commit_only, GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");

        let mut g_cb = m.zeroed();
        let dz = rq_quant_backward(&a.quant.residuals, &a.quant.codes, &m.codebooks, 0.0, 1.0, &mut g_cb.codebooks);
        assert!(dz.iter().all(|&v| v == 0.0));
        let r = grad_check(&m, &g_cb, codebook_only, GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn sids_are_total_and_injective() {
        let (m, _) = small();
        let mut rng = RngSeed::new(3, "items").stream();
        let items = (0..60)
            .map(|i| crate::data::ItemRecord { item_id: format!("i{i}"), domain: "a".into(), embedding: rng.normal_vec(5, 1.0) })
            .collect();
        let cat = Catalog::new(items).unwrap();
        let sids = m.assign_sids(&cat).unwrap();
        assert_eq!(sids.len(), 60);
        let set: std::collections::HashSet<_> = sids.values().collect();
        assert_eq!(set.len(), 60);
    }
}
