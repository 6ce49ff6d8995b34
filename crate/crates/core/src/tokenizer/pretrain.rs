use serde::{Deserialize, Serialize};

use super::{kmeans, sample_mask, LossParts, PretrainConfig, RqVae, TokenizerConfig};
use crate::data::Catalog;
use crate::error::{Error, Result};
use crate::nn::params::Parameters;
use crate::nn::{AdamW, AdamWConfig, Matrix, RngSeed};
use crate::par::Exec;

/// Gradient chunks per batch; fixed so results do not depend on threads.
const CHUNKS: usize = 8;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossParts,
    /// Codebook entries re-seeded after going unused for the whole epoch.
    pub reseeded: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PretrainLog {
    pub initial: LossParts,
    pub epochs: Vec<EpochLog>,
    pub last: LossParts,
}

/// Mean loss over the catalog with masks drawn from a fixed stream.
fn evaluate(model: &RqVae, xs: &[&[f64]], cfg: &PretrainConfig, seed: &RngSeed, exec: Exec) -> Result<LossParts> {
    let m = model.levels();
    let mut rng = seed.child("eval-mask").stream();
    let masks: Vec<Vec<usize>> =
        xs.iter().map(|_| if m > 1 { sample_mask(m, cfg.mask_rate(m), &mut rng) } else { Vec::new() }).collect();
    let parts = exec.map_range(xs.len(), |i| model.item_loss(xs[i], &masks[i], cfg.weights()));
    let mut sum = LossParts::default();
    for p in parts {
        sum.add(&p?);
    }
    Ok(sum.scaled(1.0 / xs.len() as f64))
}

fn init_codebooks(model: &mut RqVae, xs: &[&[f64]], cfg: &PretrainConfig, seed: &RngSeed) -> Result<()> {
    let mut rng = seed.child("codebook-init").stream();
    let mut order: Vec<usize> = (0..xs.len()).collect();
    rng.shuffle(&mut order);
    let first: Vec<usize> = order.into_iter().take(cfg.batch.max(2)).collect();
    let mut residuals: Vec<Vec<f64>> = first.iter().map(|&i| model.encode(xs[i])).collect::<Result<_>>()?;
    let k0 = model.codebooks.levels[0].size();
    model.codebooks.levels[0].entries = kmeans(&residuals, k0, cfg.kmeans_iters, &mut rng);
    for l in 0..model.levels() {
        if l > 0 {
            // Deeper levels start from perturbed samples of their residuals.
            let k = model.codebooks.levels[l].size();
            let spread = (residuals.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
                / (residuals.len() * model.codebooks.dim()) as f64)
                .sqrt();
            let rows: Vec<Vec<f64>> = (0..k)
                .map(|_| residuals[rng.below(residuals.len())].iter().map(|v| v + 0.1 * spread * rng.normal()).collect())
                .collect();
            model.codebooks.levels[l].entries = Matrix::from_rows(&rows)?;
        }
        let cb = &model.codebooks.levels[l];
        for r in &mut residuals {
            let e = cb.entry(cb.nearest(r));
            r.iter_mut().zip(e).for_each(|(a, b)| *a -= b);
        }
    }
    Ok(())
}

/// Jointly trains encoder, decoder, codebooks and the masked-code model on
/// every catalog item, then freezes the result.
pub fn pretrain(catalog: &Catalog, tcfg: &TokenizerConfig, cfg: &PretrainConfig, seed: u64, exec: Exec) -> Result<(RqVae, PretrainLog)> {
    if catalog.is_empty() {
        return Err(Error::Input("cannot pretrain on an empty catalog".into()));
    }
    cfg.validate(tcfg.levels)?;
    let root = RngSeed::new(seed, "tokenizer");
    let mut model = RqVae::new(catalog.dim(), tcfg, &mut root.child("init").stream())?;
    let xs: Vec<&[f64]> = catalog.items().iter().map(|i| i.embedding.as_slice()).collect();
    init_codebooks(&mut model, &xs, cfg, &root)?;

    let mut log = PretrainLog { initial: evaluate(&model, &xs, cfg, &root, exec)?, ..Default::default() };
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.lr));
    let mut rng = root.child("train").stream();
    let m = model.levels();
    let w = cfg.weights();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..xs.len()).collect();
        rng.shuffle(&mut order);
        let mut usage: Vec<Vec<usize>> = model.codebooks.sizes().into_iter().map(|k| vec![0; k]).collect();
        let mut seen_residuals: Vec<Vec<Vec<f64>>> = vec![Vec::new(); m];
        let mut sum = LossParts::default();
        for batch in order.chunks(cfg.batch) {
            let masks: Vec<Vec<usize>> =
                batch.iter().map(|_| if m > 1 { sample_mask(m, cfg.mask_rate(m), &mut rng) } else { Vec::new() }).collect();
            let scale = 1.0 / batch.len() as f64;
            let zero = model.zeroed();
            let parts = exec.map_chunks(batch.len(), CHUNKS, |range| {
                let mut g = zero.clone();
                let mut out = Vec::with_capacity(range.len());
                for j in range {
                    let r = model.item_loss_grad(xs[batch[j]], &masks[j], w, scale, &mut g);
                    out.push(r.map(|(p, q)| (p, q.codes, q.residuals)));
                }
                (g, out)
            });
            let mut grads = zero;
            for (g, out) in parts {
                grads.add_assign_params(&g);
                for r in out {
                    let (p, codes, residuals) = r?;
                    sum.add(&p);
                    for (l, (c, res)) in codes.into_iter().zip(residuals).enumerate() {
                        usage[l][c] += 1;
                        seen_residuals[l].push(res);
                    }
                }
            }
            if !sum.total.is_finite() {
                return Err(Error::Divergence { param: "pretraining loss".into(), epoch: Some(epoch) });
            }
            opt.step(&mut model, &grads, &|_| true).map_err(|e| match e {
                Error::Divergence { param, .. } => Error::Divergence { param, epoch: Some(epoch) },
                other => other,
            })?;
        }
        let mut reseeded = 0;
        for (l, counts) in usage.iter().enumerate() {
            for (k, &n) in counts.iter().enumerate() {
                if n == 0 {
                    let pick = &seen_residuals[l][rng.below(seen_residuals[l].len())];
                    model.codebooks.levels[l].entries.row_mut(k).copy_from_slice(pick);
                    reseeded += 1;
                }
            }
        }
        log.epochs.push(EpochLog { epoch, loss: sum.scaled(1.0 / xs.len() as f64), reseeded });
        log::debug!("tokenizer epoch {epoch}: total {:.5} reseeded {reseeded}", sum.total / xs.len() as f64);
    }
    log.last = evaluate(&model, &xs, cfg, &root, exec)?;
    model.freeze();
    Ok((model, log))
}

/// Median final-residual norm per depth, used to check that extra levels
/// keep reducing quantisation error.
#[cfg(test)]
fn residual_norm(model: &RqVae, xs: &[&[f64]]) -> f64 {
    xs.iter()
        .map(|x| {
            let z = model.encode(x).unwrap();
            let q = super::residual_quantize(&z, &model.codebooks).unwrap();
            crate::nn::sq_dist(&z, &q.z_hat)
        })
        .sum::<f64>()
        / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ItemRecord;
    use crate::tokenizer::CtxConfig;

    fn catalog(n: usize, seed: u64) -> Catalog {
        let mut rng = RngSeed::new(seed, "cat").stream();
        let centers: Vec<Vec<f64>> = (0..10).map(|_| rng.normal_vec(8, 1.0)).collect();
        let items = (0..n)
            .map(|i| {
                let c = &centers[i % 10];
                let e = c.iter().map(|v| v + 0.2 * rng.normal()).collect();
                ItemRecord { item_id: format!("i{i:04}"), domain: if i % 2 == 0 { "a" } else { "b" }.into(), embedding: e }
            })
            .collect();
        Catalog::new(items).unwrap()
    }

    fn small_cfg(levels: usize) -> TokenizerConfig {
        TokenizerConfig { levels, codebook_size: 16, latent_dim: 6, hidden: vec![24], ctx: CtxConfig { d_model: 8, n_heads: 2, d_ff: 16, n_layers: 1 } }
    }

    #[test]
    fn paper_defaults() {
        let c = PretrainConfig::default();
        assert_eq!((c.lr, c.batch, c.epochs), (1e-4, 512, 100));
        assert!((c.mask_rate(3) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pretraining_lowers_the_objective_and_freezes() {
        let cat = catalog(500, 1);
        let cfg = PretrainConfig { epochs: 30, lr: 3e-3, batch: 64, ..Default::default() };
        let (model, log) = pretrain(&cat, &small_cfg(3), &cfg, 7, Exec::Parallel).unwrap();
        assert!(log.last.total < log.initial.total, "{:?} vs {:?}", log.last, log.initial);
        assert_eq!(log.epochs.len(), 30);
        assert!(model.frozen && model.codebooks.levels.iter().all(|c| c.frozen));
    }

    #[test]
    fn zero_weights_still_report_quantisation_loss() {
        let cat = catalog(60, 2);
        let cfg = PretrainConfig { epochs: 2, lr: 1e-3, batch: 16, mu: 0.0, lambda: 0.0, ..Default::default() };
        let (_, log) = pretrain(&cat, &small_cfg(2), &cfg, 7, Exec::Sequential).unwrap();
        assert!(log.epochs.iter().all(|e| e.loss.q > 0.0 && (e.loss.total - e.loss.rec).abs() < 1e-12));
    }

    #[test]
    fn execution_modes_agree_bitwise() {
        let cat = catalog(80, 3);
        let cfg = PretrainConfig { epochs: 2, lr: 1e-3, batch: 32, ..Default::default() };
        let (a, _) = pretrain(&cat, &small_cfg(2), &cfg, 9, Exec::Sequential).unwrap();
        let (b, _) = pretrain(&cat, &small_cfg(2), &cfg, 9, Exec::Parallel).unwrap();
        assert_eq!(a.param_hash(&|_| true), b.param_hash(&|_| true));
    }

    #[test]
    fn empty_catalog_rejected() {
        let cat = Catalog::new(Vec::new()).unwrap();
        assert!(matches!(pretrain(&cat, &small_cfg(2), &PretrainConfig::default(), 1, Exec::Sequential), Err(Error::Input(_))));
    }

    #[test]
    fn deeper_codes_reduce_error() {
        let mut medians = Vec::new();
        for levels in 1..=4 {
            let mut errs: Vec<f64> = (0..5)
                .map(|s| {
                    let cat = catalog(200, 10 + s);
                    let cfg = PretrainConfig { epochs: 0, batch: 200, ..Default::default() };
                    let (model, _) = pretrain(&cat, &small_cfg(levels), &cfg, s, Exec::Sequential).unwrap();
                    let xs: Vec<&[f64]> = cat.items().iter().map(|i| i.embedding.as_slice()).collect();
                    residual_norm(&model, &xs)
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            medians.push(errs[2]);
        }
        assert!(medians.windows(2).all(|w| w[1] <= w[0]), "{medians:?}");
    }
}
