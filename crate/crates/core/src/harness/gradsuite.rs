//! Finite-difference checks of every training objective on small models.

use serde::Serialize;

use crate::adapt::{adapter_name, fuse_latents, AdapterConfig, DomainAdapterSet, Sample, VibRouter};
use crate::error::Result;
use crate::nn::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::nn::{sq_dist, Parameters, RngSeed, Stream};
use crate::rec::{case_nll, sequence_ce, Gating, ModelConfig, RouterCase, SeqModel, SidVocabulary, Token, BOS, SEP};
use crate::tokenizer::{residual_quantize, CtxConfig, LossWeights, RqVae, TokenizerConfig};

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckLine {
    pub objective: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

fn line(objective: &str, r: GradCheckReport) -> GradCheckLine {
    GradCheckLine { objective: objective.to_string(), max_rel_error: r.max_rel_error, checked: r.checked }
}

fn jitter<P: Parameters>(p: &mut P, rng: &mut Stream, std: f64) {
    for q in p.params_mut() {
        for v in q.value.as_mut_slice() {
            *v += std * rng.normal();
        }
    }
}

fn tokenizer(rng: &mut Stream) -> Result<RqVae> {
    let cfg = TokenizerConfig {
        levels: 3,
        codebook_size: 4,
        latent_dim: 4,
        hidden: vec![6],
        ctx: CtxConfig { d_model: 8, n_heads: 2, d_ff: 8, n_layers: 1 },
    };
    let mut m = RqVae::new(5, &cfg, rng)?;
    for cb in &mut m.codebooks.levels {
        cb.entries = rng.normal_matrix(4, 4, 0.5);
    }
    Ok(m)
}

/// Reconstruction, quantisation and masked-code objectives together.
fn tokenizer_check(rng: &mut Stream) -> Result<GradCheckLine> {
    let m = tokenizer(rng)?;
    let x = rng.normal_vec(5, 1.0);
    let w = LossWeights { mu: 1.0, lambda: 0.1, beta: 0.25 };
    let mask = [0usize, 2];
    let mut g = m.zeroed();
    m.item_loss_grad(&x, &mask, w, 1.0, &mut g)?;
    let a = m.anchor(&x, &mask)?;
    Ok(line("tokenizer rec+quant+mtm", grad_check(&m, &g, |p| p.surrogate_loss(&x, &a, w), GradCheckOptions::default())?))
}

fn adapter_set(tok: &RqVae, rng: &mut Stream) -> Result<DomainAdapterSet> {
    let cfg = AdapterConfig { rank: 2, alpha: 4.0, ..Default::default() };
    let mut set = DomainAdapterSet::new(tok, &["a".to_string(), "b".to_string()], &cfg, 3)?;
    for l in &mut set.encoder.layers {
        for i in 0..l.adapters().len() {
            let r = l.adapters()[i].rank();
            l.adapter_mut(i).b = rng.normal_matrix(l.d_out(), r, 0.5);
        }
    }
    Ok(set)
}

/// Straight-through reconstruction through one domain adapter plus commitment.
fn adapter_check(rng: &mut Stream) -> Result<GradCheckLine> {
    let tok = tokenizer(rng)?;
    let mut set = adapter_set(&tok, rng)?;
    set.encoder.set_adapter_frozen(&adapter_name("a"), false)?;
    let x = rng.normal_vec(5, 1.0);
    let mix = [(set.index("a")?, 1.0)];
    let (z, ec) = set.encoder.forward_train(&x, &mix, None);
    let q = residual_quantize(&z, &tok.codebooks)?;
    let offset: Vec<f64> = q.z_hat.iter().zip(&z).map(|(h, zi)| h - zi).collect();
    let (xh, dc) = tok.decoder.forward_train(&q.z_hat, &[], None);
    let dxh: Vec<f64> = xh.iter().zip(&x).map(|(a, b)| 2.0 * (a - b)).collect();
    let mut dz = tok.decoder.backward(&dc, &dxh, &mut tok.decoder.zeroed(), None);
    let beta = 0.25;
    for ((d, zi), h) in dz.iter_mut().zip(&z).zip(&q.z_hat) {
        *d += 2.0 * beta * (zi - h);
    }
    let mut g = set.zeroed();
    set.encoder.backward(&ec, &dz, &mut g.encoder, None);
    let loss = |s: &DomainAdapterSet| {
        let z = s.encoder.forward(&x, &mix).expect("adapter forward");
        let zq: Vec<f64> = z.iter().zip(&offset).map(|(a, b)| a + b).collect();
        sq_dist(&x, &tok.decoder.forward(&zq, &[]).expect("decoder forward")) + beta * sq_dist(&z, &q.z_hat)
    };
    let tag = format!(".lora.{}.", adapter_name("a"));
    let filter = |n: &str| n.contains(&tag);
    Ok(line("domain adapter rec+commit", grad_check(&set, &g, loss, GradCheckOptions { filter: &filter, ..Default::default() })?))
}

/// Straight-through reconstruction of the fused latent plus weighted KL.
fn item_router_check(rng: &mut Stream) -> Result<GradCheckLine> {
    let tok = tokenizer(rng)?;
    let set = adapter_set(&tok, rng)?;
    let x = rng.normal_vec(5, 1.0);
    let zu = tok.encode(&x)?;
    let zs = set.encode(&x, "b")?;
    let router = VibRouter::new(5, 8, 3, rng);
    let eps = rng.normal_vec(3, 1.0);
    let c = router.forward(&x, Sample::Noise(&eps));
    let zf = fuse_latents(&zu, &zs, c.alpha);
    let q = residual_quantize(&zf, &tok.codebooks)?;
    let offset: Vec<f64> = q.z_hat.iter().zip(&zf).map(|(h, f)| h - f).collect();
    let (xh, dc) = tok.decoder.forward_train(&q.z_hat, &[], None);
    let dxh: Vec<f64> = xh.iter().zip(&x).map(|(a, b)| 2.0 * (a - b)).collect();
    let dz = tok.decoder.backward(&dc, &dxh, &mut tok.decoder.zeroed(), None);
    let dalpha: f64 = dz.iter().zip(zs.iter().zip(&zu)).map(|(d, (s, u))| d * (s - u)).sum();
    let w = 0.3;
    let mut g = router.zeroed();
    router.backward(&c, dalpha, w, &mut g);
    let loss = |r: &VibRouter| {
        let c = r.forward(&x, Sample::Noise(&eps));
        let zq: Vec<f64> = fuse_latents(&zu, &zs, c.alpha).iter().zip(&offset).map(|(a, b)| a + b).collect();
        sq_dist(&x, &tok.decoder.forward(&zq, &[]).expect("decoder forward")) + w * c.kl
    };
    Ok(line("item router rec+vib", grad_check(&router, &g, loss, GradCheckOptions::default())?))
}

fn tiny_model(gating: Gating, rng: &mut Stream) -> Result<(SeqModel, Vec<Token>)> {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 12,
        max_len: 24,
        experts: 3,
        expert_rank: 2,
        expert_alpha: 4.0,
        spec_rank: 2,
        spec_alpha: 4.0,
        gating,
    };
    let vocab = SidVocabulary::new(vec!["A".into(), "B".into()], vec![4, 4], 2);
    let seq = vec![
        BOS,
        vocab.tag("A")?,
        vocab.code(0, 1)?,
        vocab.code(1, 2)?,
        vocab.dedup(0)?,
        SEP,
        vocab.tag("B")?,
        vocab.code(0, 3)?,
        vocab.code(1, 0)?,
        vocab.dedup(1)?,
        SEP,
    ];
    let mut m = SeqModel::new(cfg, vocab, rng)?;
    jitter(&mut m, rng, 0.2);
    Ok((m, seq))
}

/// Next-token cross-entropy of the universal model or one specific adapter.
fn sequence_check(name: &str, gating: Gating, spec_domain: Option<&str>, rng: &mut Stream) -> Result<GradCheckLine> {
    let (mut m, seq) = tiny_model(gating, rng)?;
    let spec = spec_domain.map(|d| m.spec_index(d)).transpose()?;
    if let Some(d) = spec_domain {
        m.freeze_universal()?;
        m.set_spec_frozen(d, false)?;
    }
    let loss = |p: &SeqModel| {
        let f = p.forward(&seq, spec).expect("model forward");
        sequence_ce(&f.logits, &seq).expect("cross-entropy").0
    };
    let (logits, cache) = m.forward_train(&seq, spec, None)?;
    let (_, _, dl) = sequence_ce(&logits, &seq)?;
    let mut g = m.zeroed();
    m.backward(&cache, &dl, &mut g);
    let tag = spec_domain.map(|d| format!("lora.{}.", crate::rec::spec_name(d)));
    let filter = |n: &str| match &tag {
        Some(t) => n.contains(t.as_str()),
        None => !n.contains("spec:"),
    };
    let opts = GradCheckOptions { filter: &filter, max_per_param: 6, ..Default::default() };
    Ok(line(name, grad_check(&m, &g, loss, opts)?))
}

/// Fused next-token likelihood of held-out paths plus weighted KL.
fn user_router_check(rng: &mut Stream) -> Result<GradCheckLine> {
    let cases: Vec<RouterCase> = (0..5)
        .map(|_| RouterCase {
            hidden: rng.normal_vec(6, 1.0),
            p_uni: (0..4).map(|_| rng.uniform_range(0.05, 1.0)).collect(),
            p_spec: (0..4).map(|_| rng.uniform_range(0.05, 1.0)).collect(),
        })
        .collect();
    let mut r = VibRouter::new(6, 8, 3, rng);
    jitter(&mut r, rng, 0.3);
    let noise: Vec<Vec<f64>> = cases.iter().map(|_| rng.normal_vec(3, 1.0)).collect();
    let w = 0.1;
    let loss = |p: &VibRouter| {
        cases
            .iter()
            .zip(&noise)
            .map(|(c, e)| {
                let fc = p.forward(&c.hidden, Sample::Noise(e));
                case_nll(c, fc.alpha).0 + w * fc.kl
            })
            .sum::<f64>()
    };
    let mut g = r.zeroed();
    for (c, e) in cases.iter().zip(&noise) {
        let fc = r.forward(&c.hidden, Sample::Noise(e));
        r.backward(&fc, case_nll(c, fc.alpha).1, w, &mut g);
    }
    Ok(line("user router nll+vib", grad_check(&r, &g, loss, GradCheckOptions::default())?))
}

/// Runs every check with a fixed seed.
pub fn grad_suite(seed: u64) -> Result<Vec<GradCheckLine>> {
    let root = RngSeed::new(seed, "grad-suite");
    Ok(vec![
        tokenizer_check(&mut root.child("tokenizer").stream())?,
        adapter_check(&mut root.child("adapter").stream())?,
        item_router_check(&mut root.child("item-router").stream())?,
        sequence_check("universal ce (sequence gate)", Gating::Sequence, None, &mut root.child("uni-seq").stream())?,
        sequence_check("universal ce (token gate)", Gating::Token, None, &mut root.child("uni-tok").stream())?,
        sequence_check("universal ce (average gate)", Gating::Average, None, &mut root.child("uni-avg").stream())?,
        sequence_check("specific ce", Gating::Sequence, Some("B"), &mut root.child("spec").stream())?,
        user_router_check(&mut root.child("user-router").stream())?,
    ])
}
