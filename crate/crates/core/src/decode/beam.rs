//! Beam search over a prefix tree with per-model masking and probability
//! fusion.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::tree::PrefixTree;
use crate::error::{Error, Result};
use crate::nn::masked_softmax;
use crate::nn::softmax::softmax;
use crate::rec::Token;

/// An autoregressive model conditioned on a fixed context.
pub trait Scorer {
    type State: Clone;

    /// Consumes the context; returns the state and next-token logits.
    fn start(&self) -> Result<(Self::State, Vec<f64>)>;

    /// Appends `token`; returns the new state and next-token logits.
    fn extend(&self, state: &Self::State, token: Token) -> Result<(Self::State, Vec<f64>)>;

    /// Logits before each token of `path`. The default replays `extend`;
    /// implementors may recompute the whole sequence instead.
    fn path_logits(&self, path: &[Token]) -> Result<Vec<Vec<f64>>> {
        let (mut s, mut l) = self.start()?;
        let mut out = Vec::with_capacity(path.len());
        for (i, &t) in path.iter().enumerate() {
            out.push(std::mem::take(&mut l));
            if i + 1 < path.len() {
                (s, l) = self.extend(&s, t)?;
            }
        }
        Ok(out)
    }
}

/// Models with their fusion weights (summing to one).
pub type Mixture<'a, S> = [(&'a S, f64)];

pub fn default_beam(k: usize) -> usize {
    (2 * k).max(20)
}

/// Where the prefix-tree mask sits relative to mixing the models.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionOrder {
    /// Mask and normalise each model, then mix.
    #[default]
    MaskThenFuse,
    /// Mix full softmaxes, then mask and renormalise.
    FuseThenMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeOptions {
    pub beam: usize,
    pub k: usize,
    /// Restrict every step to the prefix tree.
    pub constrained: bool,
    pub order: FusionOrder,
}

impl DecodeOptions {
    pub fn new(k: usize) -> Self {
        Self { beam: default_beam(k), k, constrained: true, order: FusionOrder::default() }
    }
}

fn mix(logits: &[Vec<f64>], weights: &[f64], valid: Option<&[usize]>) -> Result<Vec<f64>> {
    let mut out = vec![0.0; logits[0].len()];
    for (l, &w) in logits.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let p = match valid {
            Some(v) => masked_softmax(l, v)?,
            None => softmax(l),
        };
        out.iter_mut().zip(&p).for_each(|(o, pi)| *o += w * pi);
    }
    Ok(out)
}

/// Fused per-token probabilities over the vocabulary. Without `valid` the
/// models are mixed unmasked.
fn fused_probs(logits: &[Vec<f64>], weights: &[f64], valid: Option<&[usize]>, order: FusionOrder) -> Result<Vec<f64>> {
    match (valid, order) {
        (Some(v), FusionOrder::FuseThenMask) => {
            let full = mix(logits, weights, None)?;
            let z: f64 = v.iter().map(|&i| full[i]).sum();
            if !(z > 0.0) {
                return Err(Error::ConstraintViolation("no probability mass on the valid set".into()));
            }
            let mut out = vec![0.0; full.len()];
            for &i in v {
                out[i] = full[i] / z;
            }
            Ok(out)
        }
        _ => mix(logits, weights, valid),
    }
}

fn log_prob(p: f64) -> f64 {
    if p > 0.0 {
        p.ln().min(0.0)
    } else {
        f64::NEG_INFINITY
    }
}

/// Score descending, then token tuple ascending.
fn rank_order(a: (f64, &[Token]), b: (f64, &[Token])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// `(item_id, log-probability)`, best first.
    pub ranked: Vec<(String, f64)>,
    /// Finished sequences that are not catalog items of the tree's domain.
    pub invalid: usize,
}

struct Entry<S> {
    tokens: Vec<Token>,
    score: f64,
    states: Vec<S>,
    logits: Vec<Vec<f64>>,
}

/// Beam search of depth `tree.depth()`. Constrained search masks each step
/// to the tree; unconstrained search ranks the whole vocabulary and rejects
/// finished sequences that are not items.
pub fn beam_generate<S: Scorer>(models: &Mixture<'_, S>, tree: &PrefixTree, opts: &DecodeOptions) -> Result<Decoded> {
    let DecodeOptions { beam, k, constrained, order } = *opts;
    if beam < k || beam == 0 {
        return Err(Error::Config(format!("beam width {beam} must be at least K = {k} and positive")));
    }
    if tree.is_empty() {
        return Err(Error::Input(format!("prefix tree for `{}` is empty", tree.domain)));
    }
    let weights: Vec<f64> = models.iter().map(|m| m.1).collect();
    let mut states = Vec::with_capacity(models.len());
    let mut logits = Vec::with_capacity(models.len());
    for (m, _) in models {
        let (s, l) = m.start()?;
        states.push(s);
        logits.push(l);
    }
    let mut beams = vec![Entry { tokens: Vec::new(), score: 0.0, states, logits }];
    for depth in 0..tree.depth() {
        let mut cands: Vec<(f64, Vec<Token>, usize)> = Vec::new();
        for (bi, e) in beams.iter().enumerate() {
            if constrained {
                let valid: Vec<usize> = tree.valid_next(&e.tokens)?.into_iter().map(|t| t as usize).collect();
                let p = fused_probs(&e.logits, &weights, Some(&valid), order)?;
                for v in valid {
                    let mut t = e.tokens.clone();
                    t.push(v as Token);
                    cands.push((e.score + log_prob(p[v]), t, bi));
                }
            } else {
                let p = fused_probs(&e.logits, &weights, None, order)?;
                for (v, &pv) in p.iter().enumerate() {
                    let mut t = e.tokens.clone();
                    t.push(v as Token);
                    cands.push((e.score + log_prob(pv), t, bi));
                }
            }
        }
        cands.sort_by(|a, b| rank_order((a.0, &a.1), (b.0, &b.1)));
        cands.truncate(beam);
        let last = depth + 1 == tree.depth();
        let mut next = Vec::with_capacity(cands.len());
        for (score, tokens, bi) in cands {
            let parent = &beams[bi];
            let (states, logits) = if last {
                (Vec::new(), Vec::new())
            } else {
                let tok = *tokens.last().expect("non-empty");
                let mut st = Vec::with_capacity(models.len());
                let mut lg = Vec::with_capacity(models.len());
                for ((m, w), s) in models.iter().zip(&parent.states) {
                    if *w == 0.0 {
                        // Unused model: keep a placeholder state and logits.
                        st.push(s.clone());
                        lg.push(vec![0.0; parent.logits[0].len()]);
                        continue;
                    }
                    let (s2, l2) = m.extend(s, tok)?;
                    st.push(s2);
                    lg.push(l2);
                }
                (st, lg)
            };
            next.push(Entry { tokens, score, states, logits });
        }
        beams = next;
    }
    let mut ranked = Vec::with_capacity(k);
    let mut invalid = 0;
    for e in &beams {
        match tree.leaf_item(&e.tokens) {
            Some(id) => {
                if ranked.len() < k {
                    ranked.push((id.to_string(), e.score));
                }
            }
            None => invalid += 1,
        }
    }
    Ok(Decoded { ranked, invalid })
}

/// Scores every item path of `tree` independently and ranks them with the
/// same order as the beam.
pub fn exhaustive_rank<S: Scorer>(models: &Mixture<'_, S>, tree: &PrefixTree, order: FusionOrder) -> Result<Vec<(String, f64)>> {
    let weights: Vec<f64> = models.iter().map(|m| m.1).collect();
    let mut scored = Vec::with_capacity(tree.item_count());
    for (id, path) in tree.paths() {
        let per_model = models.iter().map(|(m, _)| m.path_logits(&path)).collect::<Result<Vec<_>>>()?;
        let mut score = 0.0;
        for d in 0..path.len() {
            let valid: Vec<usize> = tree.valid_next(&path[..d])?.into_iter().map(|t| t as usize).collect();
            let logits: Vec<Vec<f64>> = per_model.iter().map(|l| l[d].clone()).collect();
            let p = fused_probs(&logits, &weights, Some(&valid), order)?;
            score += log_prob(p[path[d] as usize]);
        }
        scored.push((score, path, id));
    }
    scored.sort_by(|a, b| rank_order((a.0, &a.1), (b.0, &b.1)));
    Ok(scored.into_iter().map(|(s, _, id)| (id, s)).collect())
}

/// Per-step masked probability of each model for the tokens of `path`.
pub fn path_step_probs<S: Scorer>(model: &S, tree: &PrefixTree, path: &[Token]) -> Result<Vec<f64>> {
    let logits = model.path_logits(path)?;
    (0..path.len())
        .map(|d| {
            let valid: Vec<usize> = tree.valid_next(&path[..d])?.into_iter().map(|t| t as usize).collect();
            Ok(masked_softmax(&logits[d], &valid)?[path[d] as usize])
        })
        .collect()
}
