//! Universal and domain-specific training phases.

use serde::{Deserialize, Serialize};

use super::model::{sequence_ce, spec_name, SeqModel};
use super::vocab::Token;
use crate::error::{Error, Result};
use crate::nn::lora::Dropout;
use crate::nn::{AdamW, AdamWConfig, Parameters, RngSeed};
use crate::par::Exec;

const CHUNKS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniversalConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub dropout: f64,
    /// Validation interval for model selection, in epochs.
    pub eval_every: usize,
}

impl Default for UniversalConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 5e-5, batch: 8, dropout: 0.05, eval_every: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecificConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub dropout: f64,
    pub eval_every: usize,
}

impl Default for SpecificConfig {
    fn default() -> Self {
        Self { epochs: 15, lr: 5e-5, batch: 8, dropout: 0.05, eval_every: 1 }
    }
}

struct Phase<'a> {
    label: String,
    epochs: usize,
    lr: f64,
    batch: usize,
    dropout: f64,
    eval_every: usize,
    spec: Option<usize>,
    trainable: &'a dyn Fn(&str) -> bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training cross-entropy per predicted token.
    pub loss: f64,
    /// Validation score, when evaluated.
    pub val: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    pub initial: f64,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (1-based), when selection ran.
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    /// Mean cross-entropy on the training sequences after selection.
    pub last: f64,
}

/// Validation score (higher is better) used for model selection.
pub type Selector<'a> = dyn FnMut(&SeqModel) -> Result<f64> + 'a;

/// Mean next-token cross-entropy per predicted token (eval mode).
pub fn mean_ce(model: &SeqModel, seqs: &[Vec<Token>], spec: Option<usize>, exec: Exec) -> Result<f64> {
    let parts = exec.map(seqs, |s| -> Result<(f64, usize)> {
        let f = model.forward(s, spec)?;
        let (l, n, _) = sequence_ce(&f.logits, s)?;
        Ok((l, n))
    });
    let (mut total, mut count) = (0.0, 0usize);
    for p in parts {
        let (l, n) = p?;
        total += l;
        count += n;
    }
    if count == 0 {
        return Err(Error::Input("no predicted tokens".into()));
    }
    Ok(total / count as f64)
}

fn with_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Divergence { param, .. } => Error::Divergence { param, epoch: Some(epoch) },
        other => other,
    }
}

fn run_phase(model: &mut SeqModel, seqs: &[Vec<Token>], phase: Phase<'_>, seed: u64, exec: Exec, mut select: Option<&mut Selector<'_>>) -> Result<PhaseLog> {
    let seqs: Vec<&Vec<Token>> = seqs.iter().filter(|s| s.len() >= 2).collect();
    if seqs.is_empty() {
        return Err(Error::Input(format!("{}: no training sequences with a next token", phase.label)));
    }
    let owned: Vec<Vec<Token>> = seqs.iter().map(|s| (*s).clone()).collect();
    let mut log = PhaseLog { initial: mean_ce(model, &owned, phase.spec, exec)?, ..Default::default() };
    let root = RngSeed::new(seed, phase.label.as_str());
    let mut order_rng = root.child("order").stream();
    let mut opt = AdamW::new(AdamWConfig::with_lr(phase.lr));
    let mut best: Option<(f64, SeqModel, usize)> = None;
    for epoch in 0..phase.epochs {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order_rng.shuffle(&mut order);
        let (mut total, mut count) = (0.0, 0usize);
        for (bi, batch) in order.chunks(phase.batch.max(1)).enumerate() {
            let tokens: usize = batch.iter().map(|&i| seqs[i].len() - 1).sum();
            let scale = 1.0 / tokens as f64;
            let zero = model.zeroed();
            let m = &*model;
            let parts = exec.map_chunks(batch.len(), CHUNKS, |range| -> Result<(SeqModel, f64)> {
                let mut g = zero.clone();
                let mut loss = 0.0;
                for j in range {
                    let seq = seqs[batch[j]];
                    let mut rng = root.child(format!("drop:{epoch}:{bi}:{j}")).stream();
                    let mut drop = Dropout { rate: phase.dropout, rng: &mut rng };
                    let (logits, cache) = m.forward_train(seq, phase.spec, Some(&mut drop))?;
                    let (l, _, mut dl) = sequence_ce(&logits, seq)?;
                    dl.iter_mut().flatten().for_each(|v| *v *= scale);
                    m.backward(&cache, &dl, &mut g);
                    loss += l;
                }
                Ok((g, loss))
            });
            let mut grads = zero;
            for p in parts {
                let (g, l) = p?;
                grads.add_assign_params(&g);
                total += l;
            }
            count += tokens;
            if !total.is_finite() {
                return Err(Error::Divergence { param: format!("{} loss", phase.label), epoch: Some(epoch) });
            }
            opt.step(model, &grads, phase.trainable).map_err(|e| with_epoch(e, epoch))?;
        }
        let mut entry = EpochLog { epoch: epoch + 1, loss: total / count as f64, val: None };
        let due = (epoch + 1) % phase.eval_every.max(1) == 0 || epoch + 1 == phase.epochs;
        if let (Some(sel), true) = (select.as_deref_mut(), due) {
            let v = sel(model)?;
            entry.val = Some(v);
            if best.as_ref().is_none_or(|b| v > b.0) {
                best = Some((v, model.clone(), epoch + 1));
            }
        }
        log::info!("{} epoch {}: loss {:.5}{}", phase.label, epoch + 1, entry.loss, entry.val.map(|v| format!(" val {v:.4}")).unwrap_or_default());
        log.epochs.push(entry);
    }
    if let Some((v, m, e)) = best {
        *model = m;
        log.best_epoch = Some(e);
        log.best_val = Some(v);
    }
    log.last = mean_ce(model, &owned, phase.spec, exec)?;
    Ok(log)
}

/// Trains backbone, embeddings, head, gate and universal experts on
/// cross-domain sequences, then freezes all of them.
pub fn train_universal(model: &mut SeqModel, seqs: &[Vec<Token>], cfg: &UniversalConfig, seed: u64, exec: Exec, select: Option<&mut Selector<'_>>) -> Result<PhaseLog> {
    if model.emb_frozen {
        return Err(Error::Config("universal phase already complete".into()));
    }
    let trainable = |n: &str| !n.contains(".lora.spec:");
    let phase = Phase {
        label: "universal".into(),
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch: cfg.batch,
        dropout: cfg.dropout,
        eval_every: cfg.eval_every,
        spec: None,
        trainable: &trainable,
    };
    let log = run_phase(model, seqs, phase, seed, exec, select)?;
    model.freeze_universal()?;
    Ok(log)
}

/// Trains only `domain`'s specific adapter on its single-domain sequences.
/// The universal parameters are verified unchanged afterwards.
pub fn train_specific(model: &mut SeqModel, domain: &str, seqs: &[Vec<Token>], cfg: &SpecificConfig, seed: u64, exec: Exec, select: Option<&mut Selector<'_>>) -> Result<PhaseLog> {
    if !model.emb_frozen {
        return Err(Error::Dependency { stage: "rec-train-specific".into(), upstream: "rec-train-universal".into() });
    }
    if seqs.iter().all(|s| s.len() < 2) {
        return Err(Error::Input(format!("domain `{domain}` has no training sequences")));
    }
    let spec = model.spec_index(domain)?;
    let before = model.universal_hash();
    let tag = format!(".lora.{}.", spec_name(domain));
    let trainable = |n: &str| n.contains(&tag);
    model.set_spec_frozen(domain, false)?;
    let phase = Phase {
        label: format!("specific:{domain}"),
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch: cfg.batch,
        dropout: cfg.dropout,
        eval_every: cfg.eval_every,
        spec: Some(spec),
        trainable: &trainable,
    };
    let log = run_phase(model, seqs, phase, seed, exec, select);
    model.set_spec_frozen(domain, true)?;
    let log = log?;
    if model.universal_hash() != before {
        return Err(Error::Integrity("universal parameters changed during specific training".into()));
    }
    Ok(log)
}
