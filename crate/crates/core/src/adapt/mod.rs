//! Per-domain low-rank adapters on the frozen tokenizer encoder and the
//! item router that blends universal and domain-specific latents.

mod router;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use router::{vib_kl, RouterCache, Sample, VibRouter};

use crate::data::Catalog;
use crate::error::{Error, Result};
use crate::nn::lora::Dropout;
use crate::nn::mlp::Mlp;
use crate::nn::params::{ParamMut, ParamRef, Parameters};
use crate::nn::{sq_dist, AdamW, AdamWConfig, RngSeed};
use crate::par::Exec;
use crate::tokenizer::{assign_dedup, residual_quantize, RqVae, SidMap};

const CHUNKS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Weight of the commitment term `||z - sg(ẑ)||²` that keeps adapted
    /// latents near the frozen codebooks.
    pub beta: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 64, alpha: 32.0, dropout: 0.05, beta: 0.25, epochs: 50, lr: 5e-5, batch: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    pub hidden: usize,
    pub d_r: usize,
    pub vib_weight: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self { hidden: 128, d_r: 16, vib_weight: 1e-3, epochs: 20, lr: 1e-3, batch: 64 }
    }
}

pub fn adapter_name(domain: &str) -> String {
    format!("dom:{domain}")
}

/// A copy of the tokenizer encoder with one adapter per domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainAdapterSet {
    pub encoder: Mlp,
    pub domains: Vec<String>,
    pub dropout: f64,
}

impl DomainAdapterSet {
    pub fn new(tokenizer: &RqVae, domains: &[String], cfg: &AdapterConfig, seed: u64) -> Result<Self> {
        let mut encoder = tokenizer.encoder.clone();
        encoder.freeze_base();
        for d in domains {
            let mut rng = RngSeed::new(seed, format!("adapter-init:{d}")).stream();
            encoder.add_adapter(&adapter_name(d), cfg.rank, cfg.alpha, &mut rng)?;
            encoder.set_adapter_frozen(&adapter_name(d), true)?;
        }
        Ok(Self { encoder, domains: domains.to_vec(), dropout: cfg.dropout })
    }

    pub fn index(&self, domain: &str) -> Result<usize> {
        self.encoder.adapter_index(&adapter_name(domain)).map_err(|_| Error::lookup("domain adapter", domain))
    }

    /// `E_{θ_d}(x)` without dropout.
    pub fn encode(&self, x: &[f64], domain: &str) -> Result<Vec<f64>> {
        let idx = self.index(domain)?;
        self.encoder.forward(x, &[(idx, 1.0)])
    }

    /// Hash of one domain's adapter arrays.
    pub fn adapter_hash(&self, domain: &str) -> String {
        let tag = format!(".lora.{}.", adapter_name(domain));
        self.param_hash(&|n| n.contains(&tag))
    }

    pub fn freeze(&mut self) -> Result<()> {
        for d in self.domains.clone() {
            self.encoder.set_adapter_frozen(&adapter_name(&d), true)?;
        }
        Ok(())
    }
}

impl Parameters for DomainAdapterSet {
    fn params(&self) -> Vec<ParamRef<'_>> {
        self.encoder.params()
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        self.encoder.params_mut()
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AdapterLog {
    pub domain: String,
    /// Mean reconstruction error of the universal encoder on the domain.
    pub universal: f64,
    pub initial: f64,
    pub epochs: Vec<f64>,
    /// Epoch whose parameters were kept; `None` keeps the zero-initialised adapter.
    pub best_epoch: Option<usize>,
    pub last: f64,
}

/// Mean `||x - D(Q(E_θd(x)))||²` over `xs`.
pub fn adapted_recon_error(set: &DomainAdapterSet, domain: &str, xs: &[&[f64]], tok: &RqVae, exec: Exec) -> Result<f64> {
    let errs = exec.map(xs, |x| -> Result<f64> { Ok(sq_dist(x, &tok.reconstruct_latent(&set.encode(x, domain)?)?)) });
    Ok(errs.into_iter().sum::<Result<f64>>()? / xs.len() as f64)
}

pub fn universal_recon_error(xs: &[&[f64]], tok: &RqVae, exec: Exec) -> Result<f64> {
    let errs = exec.map(xs, |x| -> Result<f64> { Ok(sq_dist(x, &tok.reconstruct(x)?)) });
    Ok(errs.into_iter().sum::<Result<f64>>()? / xs.len() as f64)
}

/// Trains the adapter of `domain` alone on reconstruction through the frozen
/// quantiser and decoder (straight-through across quantisation), keeping the
/// epoch with the lowest reconstruction error.
pub fn train_adapter(
    set: &mut DomainAdapterSet,
    domain: &str,
    xs: &[&[f64]],
    tok: &RqVae,
    cfg: &AdapterConfig,
    seed: u64,
    exec: Exec,
) -> Result<AdapterLog> {
    if xs.is_empty() {
        return Err(Error::Input(format!("domain `{domain}` has no items")));
    }
    let name = adapter_name(domain);
    let idx = set.index(domain)?;
    let mut log = AdapterLog {
        domain: domain.to_string(),
        universal: universal_recon_error(xs, tok, exec)?,
        initial: adapted_recon_error(set, domain, xs, tok, exec)?,
        ..Default::default()
    };
    set.encoder.set_adapter_frozen(&name, false)?;
    let tag = format!(".lora.{name}.");
    let root = RngSeed::new(seed, format!("adapter-train:{domain}"));
    let mut rng = root.child("order").stream();
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.lr));
    let mix = [(idx, 1.0)];
    let mut best = (log.initial, set.encoder.clone());
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..xs.len()).collect();
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch.max(1)).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let model = &*set;
            let zero_enc = model.encoder.zeroed();
            let zero_dec = tok.decoder.zeroed();
            let parts = exec.map_chunks(batch.len(), CHUNKS, |range| -> Result<(Mlp, f64)> {
                let mut g = zero_enc.clone();
                let mut scratch = zero_dec.clone();
                let mut loss = 0.0;
                for j in range {
                    let x = xs[batch[j]];
                    let mut drng = root.child(format!("drop:{epoch}:{b}:{j}")).stream();
                    let mut dropout = Dropout { rate: model.dropout, rng: &mut drng };
                    let (z, enc_cache) = model.encoder.forward_train(x, &mix, Some(&mut dropout));
                    let q = residual_quantize(&z, &tok.codebooks)?;
                    let (x_hat, dec_cache) = tok.decoder.forward_train(&q.z_hat, &[], None);
                    loss += sq_dist(x, &x_hat);
                    let dxh: Vec<f64> = x_hat.iter().zip(x).map(|(a, b)| 2.0 * scale * (a - b)).collect();
                    let mut dz = tok.decoder.backward(&dec_cache, &dxh, &mut scratch, None);
                    for ((d, zi), h) in dz.iter_mut().zip(&z).zip(&q.z_hat) {
                        *d += 2.0 * scale * cfg.beta * (zi - h);
                    }
                    model.encoder.backward(&enc_cache, &dz, &mut g, None);
                }
                Ok((g, loss))
            });
            let mut grads = DomainAdapterSet { encoder: zero_enc, domains: Vec::new(), dropout: 0.0 };
            for p in parts {
                let (g, l) = p?;
                grads.encoder.add_assign_params(&g);
                total += l;
            }
            if !total.is_finite() {
                return Err(Error::Divergence { param: format!("adapter `{domain}` loss"), epoch: Some(epoch) });
            }
            opt.step(set, &grads, &|n| n.contains(&tag)).map_err(|e| with_epoch(e, epoch))?;
        }
        log.epochs.push(total / xs.len() as f64);
        log::debug!("adapter {domain} epoch {epoch}: {:.5}", total / xs.len() as f64);
        let err = adapted_recon_error(set, domain, xs, tok, exec)?;
        if err < best.0 {
            best = (err, set.encoder.clone());
            log.best_epoch = Some(epoch);
        }
    }
    set.encoder = best.1;
    set.encoder.set_adapter_frozen(&name, true)?;
    log.last = adapted_recon_error(set, domain, xs, tok, exec)?;
    Ok(log)
}

pub(crate) fn with_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Divergence { param, .. } => Error::Divergence { param, epoch: Some(epoch) },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedLatent {
    pub z_uni: Vec<f64>,
    pub z_spec: Vec<f64>,
    pub alpha: f64,
    pub z_fused: Vec<f64>,
}

/// `(1 - α) z_uni + α z_spec`, exact at the endpoints.
pub fn fuse_latents(z_uni: &[f64], z_spec: &[f64], alpha: f64) -> Vec<f64> {
    if alpha == 0.0 {
        return z_uni.to_vec();
    }
    if alpha == 1.0 {
        return z_spec.to_vec();
    }
    z_uni.iter().zip(z_spec).map(|(u, s)| (1.0 - alpha) * u + alpha * s).collect()
}

pub fn route_item(x: &[f64], domain: &str, tok: &RqVae, adapters: &DomainAdapterSet, router: &VibRouter, sample: Sample<'_>) -> Result<FusedLatent> {
    let z_spec = adapters.encode(x, domain)?;
    let z_uni = tok.encode(x)?;
    let alpha = router.alpha(x, sample);
    let z_fused = fuse_latents(&z_uni, &z_spec, alpha);
    Ok(FusedLatent { z_uni, z_spec, alpha, z_fused })
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RouterEpoch {
    pub rec: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RouterLog {
    pub universal: f64,
    pub epochs: Vec<RouterEpoch>,
    /// Mean reconstruction error of eval-mode fused latents after training.
    pub last: f64,
}

/// Per-item reconstruction loss of a fused latent and its gradient with
/// respect to `α` (straight-through across quantisation).
fn fused_loss(x: &[f64], zu: &[f64], zs: &[f64], alpha: f64, tok: &RqVae) -> Result<(f64, f64)> {
    let zf = fuse_latents(zu, zs, alpha);
    let q = residual_quantize(&zf, &tok.codebooks)?;
    let (x_hat, cache) = tok.decoder.forward_train(&q.z_hat, &[], None);
    let dxh: Vec<f64> = x_hat.iter().zip(x).map(|(a, b)| 2.0 * (a - b)).collect();
    let dz = tok.decoder.backward(&cache, &dxh, &mut tok.decoder.zeroed(), None);
    let dalpha = dz.iter().zip(zs.iter().zip(zu)).map(|(d, (s, u))| d * (s - u)).sum();
    Ok((sq_dist(x, &x_hat), dalpha))
}

/// Trains the item router on every catalog item with adapters and
/// tokenizer frozen.
pub fn train_router(catalog: &Catalog, tok: &RqVae, adapters: &DomainAdapterSet, cfg: &RouterConfig, seed: u64, exec: Exec) -> Result<(VibRouter, RouterLog)> {
    if catalog.is_empty() {
        return Err(Error::Input("cannot train the router on an empty catalog".into()));
    }
    let root = RngSeed::new(seed, "item-router");
    let mut router = VibRouter::new(catalog.dim(), cfg.hidden, cfg.d_r, &mut root.child("init").stream());
    let items = catalog.items();
    let latents = exec.map(items, |it| -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((tok.encode(&it.embedding)?, adapters.encode(&it.embedding, &it.domain)?))
    });
    let latents: Vec<(Vec<f64>, Vec<f64>)> = latents.into_iter().collect::<Result<_>>()?;
    let xs: Vec<&[f64]> = items.iter().map(|i| i.embedding.as_slice()).collect();
    let mut log = RouterLog { universal: universal_recon_error(&xs, tok, exec)?, ..Default::default() };
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.lr));
    let mut rng = root.child("train").stream();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        rng.shuffle(&mut order);
        let mut ep = RouterEpoch::default();
        for batch in order.chunks(cfg.batch.max(1)) {
            let noise: Vec<Vec<f64>> = batch.iter().map(|_| rng.normal_vec(cfg.d_r, 1.0)).collect();
            let scale = 1.0 / batch.len() as f64;
            let zero = router.zeroed();
            let r = &router;
            let parts = exec.map_chunks(batch.len(), CHUNKS, |range| -> Result<(VibRouter, f64, f64)> {
                let mut g = zero.clone();
                let (mut rec, mut kl) = (0.0, 0.0);
                for j in range {
                    let i = batch[j];
                    let c = r.forward(xs[i], Sample::Noise(&noise[j]));
                    let (l, dalpha) = fused_loss(xs[i], &latents[i].0, &latents[i].1, c.alpha, tok)?;
                    r.backward(&c, scale * dalpha, scale * cfg.vib_weight, &mut g);
                    rec += l;
                    kl += c.kl;
                }
                Ok((g, rec, kl))
            });
            let mut grads = zero;
            for p in parts {
                let (g, rec, kl) = p?;
                grads.add_assign_params(&g);
                ep.rec += rec;
                ep.kl += kl;
            }
            if !(ep.rec.is_finite() && ep.kl.is_finite()) {
                return Err(Error::Divergence { param: "item-router loss".into(), epoch: Some(epoch) });
            }
            opt.step(&mut router, &grads, &|_| true).map_err(|e| with_epoch(e, epoch))?;
        }
        ep.rec /= items.len() as f64;
        ep.kl /= items.len() as f64;
        log::debug!("item router epoch {epoch}: rec {:.5} kl {:.5}", ep.rec, ep.kl);
        log.epochs.push(ep);
    }
    router.freeze();
    let errs = exec.map_range(items.len(), |i| -> Result<f64> {
        let a = router.alpha(xs[i], Sample::Eval);
        Ok(fused_loss(xs[i], &latents[i].0, &latents[i].1, a, tok)?.0)
    });
    log.last = errs.into_iter().sum::<Result<f64>>()? / items.len() as f64;
    Ok((router, log))
}

/// Eval-mode routing of every catalog item.
pub fn route_catalog(catalog: &Catalog, tok: &RqVae, adapters: &DomainAdapterSet, router: &VibRouter, exec: Exec) -> Result<Vec<FusedLatent>> {
    exec.map(catalog.items(), |it| route_item(&it.embedding, &it.domain, tok, adapters, router, Sample::Eval)).into_iter().collect()
}

/// Quantises each item's fused latent and resolves collisions.
pub fn assign_fused_sids(catalog: &Catalog, tok: &RqVae, adapters: &DomainAdapterSet, router: &VibRouter, exec: Exec) -> Result<SidMap> {
    let fused = route_catalog(catalog, tok, adapters, router, exec)?;
    fused_to_sids(catalog, &fused, tok)
}

pub fn fused_to_sids(catalog: &Catalog, fused: &[FusedLatent], tok: &RqVae) -> Result<SidMap> {
    let codes = catalog
        .items()
        .iter()
        .zip(fused)
        .map(|(it, f)| Ok((it.item_id.clone(), residual_quantize(&f.z_fused, &tok.codebooks)?.codes)))
        .collect::<Result<Vec<_>>>()?;
    Ok(assign_dedup(codes))
}

/// `item_id, domain, alpha` rows.
pub fn format_routing_report(catalog: &Catalog, fused: &[FusedLatent]) -> String {
    let mut out = String::from("item_id\tdomain\talpha\n");
    for (it, f) in catalog.items().iter().zip(fused) {
        let _ = writeln!(out, "{}\t{}\t{:.6}", it.item_id, it.domain, f.alpha);
    }
    out
}

/// One JSON object per item with all three latents.
pub fn format_embedding_dump(catalog: &Catalog, fused: &[FusedLatent]) -> Result<String> {
    let mut out = String::new();
    for (it, f) in catalog.items().iter().zip(fused) {
        let v = serde_json::json!({
            "item_id": it.item_id,
            "domain": it.domain,
            "alpha": f.alpha,
            "z_uni": f.z_uni,
            "z_spec": f.z_spec,
            "z_fused": f.z_fused,
        });
        out.push_str(&serde_json::to_string(&v)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ItemRecord;
    use crate::nn::gradcheck::{grad_check, GradCheckOptions};
    use crate::tokenizer::{pretrain, CtxConfig, PretrainConfig, TokenizerConfig};

    fn setup() -> (Catalog, RqVae) {
        let mut rng = RngSeed::new(4, "cat").stream();
        let centers: Vec<Vec<f64>> = (0..6).map(|_| rng.normal_vec(6, 1.0)).collect();
        let items = (0..80)
            .map(|i| {
                let d = if i % 2 == 0 { "a" } else { "b" };
                let shift = if d == "b" { 0.8 } else { 0.0 };
                let e = centers[i % 6].iter().map(|v| v + shift + 0.1 * rng.normal()).collect();
                ItemRecord { item_id: format!("i{i:03}"), domain: d.into(), embedding: e }
            })
            .collect();
        let cat = Catalog::new(items).unwrap();
        let tcfg = TokenizerConfig { levels: 2, codebook_size: 8, latent_dim: 4, hidden: vec![12], ctx: CtxConfig { d_model: 8, n_heads: 2, d_ff: 8, n_layers: 1 } };
        let (tok, _) = pretrain(&cat, &tcfg, &PretrainConfig { epochs: 3, lr: 1e-3, batch: 40, ..Default::default() }, 1, Exec::Sequential).unwrap();
        (cat, tok)
    }

    fn small_adapter() -> AdapterConfig {
        AdapterConfig { rank: 2, alpha: 4.0, epochs: 3, lr: 1e-3, batch: 16, ..Default::default() }
    }

    #[test]
    fn paper_defaults() {
        let a = AdapterConfig::default();
        assert_eq!((a.rank, a.alpha, a.dropout, a.epochs, a.lr), (64, 32.0, 0.05, 50, 5e-5));
        let r = RouterConfig::default();
        assert_eq!((r.hidden, r.d_r, r.vib_weight), (128, 16, 1e-3));
    }

    #[test]
    fn untrained_adapter_matches_universal_exactly() {
        let (cat, tok) = setup();
        let set = DomainAdapterSet::new(&tok, cat.domains(), &small_adapter(), 3).unwrap();
        for it in cat.items() {
            assert_eq!(set.encode(&it.embedding, &it.domain).unwrap(), tok.encode(&it.embedding).unwrap());
        }
    }

    #[test]
    fn adapter_training_touches_only_its_adapter() {
        let (cat, tok) = setup();
        let mut set = DomainAdapterSet::new(&tok, cat.domains(), &small_adapter(), 3).unwrap();
        let tok_hash = tok.frozen_hash();
        let base_hash = set.param_hash(&|n| !n.contains(".lora."));
        let other = set.adapter_hash("a");
        let mine = set.adapter_hash("b");
        let xs: Vec<&[f64]> = cat.in_domain("b").map(|i| i.embedding.as_slice()).collect();
        let log = train_adapter(&mut set, "b", &xs, &tok, &small_adapter(), 5, Exec::Parallel).unwrap();
        assert_eq!(log.initial, log.universal);
        assert_eq!(set.adapter_hash("a"), other);
        assert_eq!(set.adapter_hash("b") != mine, log.best_epoch.is_some());
        assert!(log.last <= log.initial);
        assert_eq!(set.param_hash(&|n| !n.contains(".lora.")), base_hash);
        assert_eq!(tok.frozen_hash(), tok_hash);
    }

    #[test]
    fn missing_adapter_and_empty_domain() {
        let (cat, tok) = setup();
        let mut set = DomainAdapterSet::new(&tok, cat.domains(), &small_adapter(), 3).unwrap();
        let router = VibRouter::new(6, 8, 3, &mut RngSeed::new(1, "r").stream());
        let x = &cat.items()[0].embedding;
        assert!(matches!(route_item(x, "zzz", &tok, &set, &router, Sample::Eval), Err(Error::Lookup { .. })));
        assert!(matches!(train_adapter(&mut set, "a", &[], &tok, &small_adapter(), 1, Exec::Sequential), Err(Error::Input(_))));
    }

    #[test]
    fn fusion_boundaries_are_exact() {
        assert_eq!(fuse_latents(&[1.0, 0.0], &[0.0, 1.0], 0.5), vec![0.5, 0.5]);
        let u = [0.3, -1.7];
        let s = [2.2, 0.1];
        assert_eq!(fuse_latents(&u, &s, 0.0), u.to_vec());
        assert_eq!(fuse_latents(&u, &s, 1.0), s.to_vec());
    }

    #[test]
    fn router_with_identity_adapters_matches_universal() {
        let (cat, tok) = setup();
        let set = DomainAdapterSet::new(&tok, cat.domains(), &small_adapter(), 3).unwrap();
        let cfg = RouterConfig { hidden: 8, d_r: 3, epochs: 2, batch: 20, ..Default::default() };
        let (router, log) = train_router(&cat, &tok, &set, &cfg, 2, Exec::Parallel).unwrap();
        assert!((log.last - log.universal).abs() < 1e-9);
        assert!(router.frozen);
        let a = route_item(&cat.items()[3].embedding, "b", &tok, &set, &router, Sample::Eval).unwrap();
        let b = route_item(&cat.items()[3].embedding, "b", &tok, &set, &router, Sample::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_alpha_reduces_to_universal_sids() {
        let (cat, tok) = setup();
        let mut set = DomainAdapterSet::new(&tok, cat.domains(), &small_adapter(), 3).unwrap();
        let xs: Vec<&[f64]> = cat.in_domain("a").map(|i| i.embedding.as_slice()).collect();
        train_adapter(&mut set, "a", &xs, &tok, &small_adapter(), 5, Exec::Sequential).unwrap();
        let mut router = VibRouter::new(6, 8, 3, &mut RngSeed::new(1, "r").stream());
        router.set_gate_bias(f64::NEG_INFINITY);
        let fused = assign_fused_sids(&cat, &tok, &set, &router, Exec::Sequential).unwrap();
        assert_eq!(fused, tok.assign_sids(&cat).unwrap());
        router.set_gate_bias(f64::INFINITY);
        let r = route_item(&cat.items()[0].embedding, "a", &tok, &set, &router, Sample::Eval).unwrap();
        assert_eq!(r.z_fused, r.z_spec);
    }

    /// The router objective (straight-through reconstruction plus weighted
    /// KL) with the quantised offset held at the base point.
    #[test]
    fn router_objective_passes_grad_check() {
        let (cat, tok) = setup();
        let mut set = DomainAdapterSet::new(&tok, cat.domains(), &small_adapter(), 3).unwrap();
        for l in &mut set.encoder.layers {
            let r = l.adapters()[1].rank();
            l.adapter_mut(1).b = RngSeed::new(8, "b").stream().normal_matrix(l.d_out(), r, 0.5);
        }
        let it = &cat.items()[1];
        let x = &it.embedding;
        let zu = tok.encode(x).unwrap();
        let zs = set.encode(x, &it.domain).unwrap();
        let mut rng = RngSeed::new(3, "router").stream();
        let router = VibRouter::new(6, 8, 3, &mut rng);
        let eps = rng.normal_vec(3, 1.0);
        let c = router.forward(x, Sample::Noise(&eps));
        let zf = fuse_latents(&zu, &zs, c.alpha);
        let offset: Vec<f64> = residual_quantize(&zf, &tok.codebooks).unwrap().z_hat.iter().zip(&zf).map(|(h, f)| h - f).collect();
        let w = 0.3;
        let (_, dalpha) = fused_loss(x, &zu, &zs, c.alpha, &tok).unwrap();
        let mut g = router.zeroed();
        router.backward(&c, dalpha, w, &mut g);
        let loss = |r: &VibRouter| {
            let c = r.forward(x, Sample::Noise(&eps));
            let zq: Vec<f64> = fuse_latents(&zu, &zs, c.alpha).iter().zip(&offset).map(|(a, b)| a + b).collect();
            sq_dist(x, &tok.decoder.forward(&zq, &[]).unwrap()) + w * c.kl
        };
        let rep = grad_check(&router, &g, loss, GradCheckOptions::default()).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    /// Adapter reconstruction objective with dropout disabled.
    #[test]
    fn adapter_objective_passes_grad_check() {
        let (cat, tok) = setup();
        let mut set = DomainAdapterSet::new(&tok, cat.domains(), &small_adapter(), 3).unwrap();
        set.encoder.set_adapter_frozen("dom:a", false).unwrap();
        for l in &mut set.encoder.layers {
            let r = l.adapters()[0].rank();
            l.adapter_mut(0).b = RngSeed::new(8, "b").stream().normal_matrix(l.d_out(), r, 0.5);
        }
        let x = &cat.items()[0].embedding;
        let mix = [(0usize, 1.0)];
        let (z, ec) = set.encoder.forward_train(x, &mix, None);
        let q = residual_quantize(&z, &tok.codebooks).unwrap();
        let offset: Vec<f64> = q.z_hat.iter().zip(&z).map(|(h, zi)| h - zi).collect();
        let (xh, dc) = tok.decoder.forward_train(&q.z_hat, &[], None);
        let dxh: Vec<f64> = xh.iter().zip(x).map(|(a, b)| 2.0 * (a - b)).collect();
        let mut dz = tok.decoder.backward(&dc, &dxh, &mut tok.decoder.zeroed(), None);
        let beta = small_adapter().beta;
        for ((d, zi), h) in dz.iter_mut().zip(&z).zip(&q.z_hat) {
            *d += 2.0 * beta * (zi - h);
        }
        let mut g = set.zeroed();
        set.encoder.backward(&ec, &dz, &mut g.encoder, None);
        let loss = |s: &DomainAdapterSet| {
            let z = s.encoder.forward(x, &mix).unwrap();
            let zq: Vec<f64> = z.iter().zip(&offset).map(|(a, b)| a + b).collect();
            sq_dist(x, &tok.decoder.forward(&zq, &[]).unwrap()) + beta * sq_dist(&z, &q.z_hat)
        };
        let filter = |n: &str| n.contains(".lora.dom:a.");
        let rep = grad_check(&set, &g, loss, GradCheckOptions { filter: &filter, ..Default::default() }).unwrap();
        assert!(rep.checked > 0 && rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
