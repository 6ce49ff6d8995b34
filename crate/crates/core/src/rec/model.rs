//! Decoder-only transformer over semantic-ID tokens with gated universal
//! experts and per-domain specific adapters.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::vocab::{SidVocabulary, Token};
use crate::decode::Scorer;
use crate::error::{Error, Result};
use crate::nn::lora::{Dropout, LoraCache};
use crate::nn::params::{ParamMut, ParamRef};
use crate::nn::softmax::softmax;
use crate::nn::transformer::{KvCache, Transformer, TransformerCache, TransformerConfig};
use crate::nn::{axpy, dot, LoraLinear, Matrix, Parameters, Stream};

/// What the expert gate conditions on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gating {
    /// Running mean of the input embeddings up to each position.
    Sequence,
    /// The input embedding at each position.
    Token,
    /// Fixed uniform weights `1/N`.
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Context budget in tokens.
    pub max_len: usize,
    pub experts: usize,
    pub expert_rank: usize,
    pub expert_alpha: f64,
    pub spec_rank: usize,
    pub spec_alpha: f64,
    pub gating: Gating,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_len: 256,
            experts: 4,
            expert_rank: 64,
            expert_alpha: 128.0,
            spec_rank: 64,
            spec_alpha: 128.0,
            gating: Gating::Sequence,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return Err(Error::Config("at least one universal expert is required".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads)));
        }
        if self.expert_rank == 0 || self.spec_rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        Ok(())
    }
}

pub fn expert_name(i: usize) -> String {
    format!("uni{i}")
}

pub fn spec_name(domain: &str) -> String {
    format!("spec:{domain}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqModel {
    pub config: ModelConfig,
    pub vocab: SidVocabulary,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub tf: Transformer,
    pub head: LoraLinear,
    /// `d_model -> N` expert logits.
    pub gate: LoraLinear,
    pub emb_frozen: bool,
}

/// Training-time activations of one sequence.
pub struct SeqCache {
    tokens: Vec<Token>,
    gates: Vec<Vec<f64>>,
    gate_caches: Vec<Option<LoraCache>>,
    tf: TransformerCache,
    head_caches: Vec<LoraCache>,
}

/// Eval-mode outputs of a full forward.
pub struct Forward {
    pub logits: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    pub gates: Vec<Vec<f64>>,
}

/// Incremental decoding state. The context cache is shared between beam
/// entries; only generated positions are copied.
#[derive(Clone, Debug)]
pub struct DecodeState {
    base: Arc<KvCache>,
    tail: KvCache,
    pos: usize,
    gate_sum: Vec<f64>,
}

impl SeqModel {
    /// Every universal expert and every domain's specific adapter is created
    /// here; specific adapters start frozen.
    pub fn new(config: ModelConfig, vocab: SidVocabulary, rng: &mut Stream) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let v = vocab.size();
        let tcfg = TransformerConfig { d_model: d, n_heads: config.n_heads, d_ff: config.d_ff, n_layers: config.n_layers, causal: true };
        let mut tf = Transformer::new(tcfg, rng);
        for i in 0..config.experts {
            tf.add_adapter(&expert_name(i), config.expert_rank, config.expert_alpha, rng)?;
        }
        for dom in &vocab.domains {
            let name = spec_name(dom);
            tf.add_adapter(&name, config.spec_rank, config.spec_alpha, rng)?;
            tf.set_adapter_frozen(&name, true)?;
        }
        let positions = config.max_len + vocab.item_len();
        Ok(Self {
            tok_emb: rng.normal_matrix(v, d, 0.5),
            pos_emb: rng.normal_matrix(positions, d, 0.1),
            tf,
            head: LoraLinear::from_weight(Matrix::zeros(v, d), false),
            gate: LoraLinear::from_weight(Matrix::zeros(config.experts, d), true),
            emb_frozen: false,
            config,
            vocab,
        })
    }

    pub fn experts(&self) -> usize {
        self.config.experts
    }

    /// Transformer adapter index of `domain`'s specific adapter.
    pub fn spec_index(&self, domain: &str) -> Result<usize> {
        self.tf.adapter_index(&spec_name(domain))
    }

    /// Freezes the backbone, embeddings, head, gate and universal experts.
    pub fn freeze_universal(&mut self) -> Result<()> {
        self.tf.freeze_base();
        for i in 0..self.experts() {
            self.tf.set_adapter_frozen(&expert_name(i), true)?;
        }
        self.head.freeze_base();
        self.gate.freeze_base();
        self.emb_frozen = true;
        Ok(())
    }

    pub fn set_spec_frozen(&mut self, domain: &str, frozen: bool) -> Result<()> {
        self.tf.set_adapter_frozen(&spec_name(domain), frozen)
    }

    /// Hash of everything the universal phase owns.
    pub fn universal_hash(&self) -> String {
        self.param_hash(&|n| !n.contains(".lora.spec:"))
    }

    pub fn spec_hash(&self, domain: &str) -> String {
        let tag = format!(".lora.{}.", spec_name(domain));
        self.param_hash(&|n| n.contains(&tag))
    }

    fn input_row(&self, t: Token, pos: usize) -> Result<Vec<f64>> {
        if t as usize >= self.tok_emb.rows() {
            return Err(Error::Shape(format!("token {t} outside vocabulary of {}", self.tok_emb.rows())));
        }
        if pos >= self.pos_emb.rows() {
            return Err(Error::Shape(format!("position {pos} beyond the {} learned positions", self.pos_emb.rows())));
        }
        Ok(self.tok_emb.row(t as usize).iter().zip(self.pos_emb.row(pos)).map(|(a, b)| a + b).collect())
    }

    fn gated(&self) -> bool {
        self.experts() > 1 && self.config.gating != Gating::Average
    }

    /// Gate weights from the gate input `m`.
    fn gate_weights(&self, m: &[f64]) -> (Vec<f64>, Option<LoraCache>) {
        let n = self.experts();
        if n == 1 {
            return (vec![1.0], None);
        }
        if !self.gated() {
            return (vec![1.0 / n as f64; n], None);
        }
        let (logits, c) = self.gate.forward_mix(m, &[], None);
        (softmax(&logits), Some(c))
    }

    fn gate_input(&self, sum: &[f64], x: &[f64], pos: usize) -> Vec<f64> {
        match self.config.gating {
            Gating::Token => x.to_vec(),
            _ => sum.iter().map(|s| s / (pos + 1) as f64).collect(),
        }
    }

    fn mix(gates: &[f64], spec: Option<usize>) -> Vec<(usize, f64)> {
        let mut m: Vec<(usize, f64)> = gates.iter().copied().enumerate().collect();
        if let Some(s) = spec {
            m.push((s, 1.0));
        }
        m
    }

    fn check_spec(&self, spec: Option<usize>) -> Result<()> {
        match spec {
            Some(s) if s < self.experts() || s >= self.tf.adapter_count() => {
                Err(Error::Config(format!("adapter index {s} is not a specific adapter")))
            }
            _ => Ok(()),
        }
    }

    /// Input rows, gate weights and gate caches for a whole sequence, with
    /// the running embedding sum after the last row.
    #[allow(clippy::type_complexity)]
    fn prepare(&self, tokens: &[Token], start: usize, sum: &mut [f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Option<LoraCache>>)> {
        let mut xs = Vec::with_capacity(tokens.len());
        let mut gates = Vec::with_capacity(tokens.len());
        let mut caches = Vec::with_capacity(tokens.len());
        for (k, &t) in tokens.iter().enumerate() {
            let x = self.input_row(t, start + k)?;
            axpy(1.0, &x, sum);
            let (g, c) = self.gate_weights(&self.gate_input(sum, &x, start + k));
            xs.push(x);
            gates.push(g);
            caches.push(c);
        }
        Ok((xs, gates, caches))
    }

    fn check_tokens(tokens: &[Token]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        Ok(())
    }

    /// Next-token logits at every position (eval mode).
    pub fn forward(&self, tokens: &[Token], spec: Option<usize>) -> Result<Forward> {
        Self::check_tokens(tokens)?;
        self.check_spec(spec)?;
        let mut sum = vec![0.0; self.config.d_model];
        let (xs, gates, _) = self.prepare(tokens, 0, &mut sum)?;
        let mixes: Vec<_> = gates.iter().map(|g| Self::mix(g, spec)).collect();
        let (hidden, _, _) = self.tf.forward(&xs, &mixes, &[], None);
        let logits = hidden.iter().map(|h| self.head.forward_mix(h, &[], None).0).collect();
        Ok(Forward { logits, hidden, gates })
    }

    /// Training forward: logits per position and the backward cache.
    pub fn forward_train(&self, tokens: &[Token], spec: Option<usize>, dropout: Option<&mut Dropout<'_>>) -> Result<(Vec<Vec<f64>>, SeqCache)> {
        Self::check_tokens(tokens)?;
        self.check_spec(spec)?;
        let mut sum = vec![0.0; self.config.d_model];
        let (xs, gates, gate_caches) = self.prepare(tokens, 0, &mut sum)?;
        let mixes: Vec<_> = gates.iter().map(|g| Self::mix(g, spec)).collect();
        let (hidden, tf_cache, _) = self.tf.forward(&xs, &mixes, &[], dropout);
        let mut logits = Vec::with_capacity(hidden.len());
        let mut head_caches = Vec::with_capacity(hidden.len());
        for h in &hidden {
            let (l, c) = self.head.forward_mix(h, &[], None);
            logits.push(l);
            head_caches.push(c);
        }
        Ok((logits, SeqCache { tokens: tokens.to_vec(), gates, gate_caches, tf: tf_cache, head_caches }))
    }

    /// Accumulates parameter gradients for upstream logit gradients.
    pub fn backward(&self, cache: &SeqCache, dlogits: &[Vec<f64>], grads: &mut SeqModel) {
        let d = self.config.d_model;
        let t = cache.tokens.len();
        let mut dh = vec![vec![0.0; d]; t];
        for k in 0..t {
            self.head.backward(&cache.head_caches[k], &dlogits[k], &mut grads.head, &mut dh[k], None);
        }
        let (mut dx, dmix) = self.tf.backward(&cache.tf, &dh, &mut grads.tf);
        if self.gated() {
            let n = self.experts();
            let mut dms = vec![vec![0.0; d]; t];
            for k in 0..t {
                let g = &cache.gates[k];
                let dg = &dmix[k][..n];
                let inner = dot(g, dg);
                let dl: Vec<f64> = g.iter().zip(dg).map(|(gi, di)| gi * (di - inner)).collect();
                let c = cache.gate_caches[k].as_ref().expect("gated positions keep their cache");
                self.gate.backward(c, &dl, &mut grads.gate, &mut dms[k], None);
            }
            match self.config.gating {
                Gating::Token => dx.iter_mut().zip(&dms).for_each(|(x, m)| axpy(1.0, m, x)),
                _ => {
                    let mut acc = vec![0.0; d];
                    for k in (0..t).rev() {
                        axpy(1.0 / (k + 1) as f64, &dms[k], &mut acc);
                        axpy(1.0, &acc, &mut dx[k]);
                    }
                }
            }
        }
        if !self.emb_frozen {
            for (k, (&tok, g)) in cache.tokens.iter().zip(&dx).enumerate() {
                axpy(1.0, g, grads.tok_emb.row_mut(tok as usize));
                axpy(1.0, g, grads.pos_emb.row_mut(k));
            }
        }
    }

    /// Processes a context; returns the decode state, the next-token logits
    /// and the final hidden state.
    pub fn prefill(&self, tokens: &[Token], spec: Option<usize>) -> Result<(DecodeState, Vec<f64>, Vec<f64>)> {
        Self::check_tokens(tokens)?;
        self.check_spec(spec)?;
        let mut sum = vec![0.0; self.config.d_model];
        let (xs, gates, _) = self.prepare(tokens, 0, &mut sum)?;
        let mixes: Vec<_> = gates.iter().map(|g| Self::mix(g, spec)).collect();
        let (hidden, _, kv) = self.tf.forward(&xs, &mixes, &[], None);
        let h = hidden.last().expect("non-empty").clone();
        let logits = self.head.forward_mix(&h, &[], None).0;
        let state = DecodeState { base: Arc::new(kv), tail: KvCache::default(), pos: tokens.len(), gate_sum: sum };
        Ok((state, logits, h))
    }

    /// Appends one token to a decode state.
    pub fn step(&self, state: &DecodeState, token: Token, spec: Option<usize>) -> Result<(DecodeState, Vec<f64>)> {
        let mut sum = state.gate_sum.clone();
        let (xs, gates, _) = self.prepare(&[token], state.pos, &mut sum)?;
        let mix = Self::mix(&gates[0], spec);
        let (hidden, _, kv) = self.tf.forward(&xs, &[mix], &[&state.base, &state.tail], None);
        let logits = self.head.forward_mix(&hidden[0], &[], None).0;
        let mut tail = state.tail.clone();
        if tail.keys.is_empty() {
            tail = kv;
        } else {
            for (l, (k, v)) in kv.keys.into_iter().zip(kv.values).enumerate() {
                tail.keys[l].extend(k);
                tail.values[l].extend(v);
            }
        }
        Ok((DecodeState { base: Arc::clone(&state.base), tail, pos: state.pos + 1, gate_sum: sum }, logits))
    }
}

impl Parameters for SeqModel {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut v = vec![ParamRef::new("tok_emb", &self.tok_emb, self.emb_frozen), ParamRef::new("pos_emb", &self.pos_emb, self.emb_frozen)];
        v.extend(self.tf.params_prefixed("tf"));
        v.extend(self.head.params_prefixed("head"));
        v.extend(self.gate.params_prefixed("gate"));
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let f = self.emb_frozen;
        let mut v = vec![ParamMut::new("tok_emb", &mut self.tok_emb, f), ParamMut::new("pos_emb", &mut self.pos_emb, f)];
        v.extend(self.tf.params_mut_prefixed("tf"));
        v.extend(self.head.params_mut_prefixed("head"));
        v.extend(self.gate.params_mut_prefixed("gate"));
        v
    }
}

/// A model bound to a context, ready for decoding. The context is
/// processed once at construction.
pub struct ModelScorer<'a> {
    pub model: &'a SeqModel,
    pub context: Vec<Token>,
    pub spec: Option<usize>,
    start: (DecodeState, Vec<f64>),
    /// Final hidden state of the context.
    pub hidden: Vec<f64>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a SeqModel, context: Vec<Token>, spec: Option<usize>) -> Result<Self> {
        let (state, logits, hidden) = model.prefill(&context, spec)?;
        Ok(Self { model, context, spec, start: (state, logits), hidden })
    }
}

impl Scorer for ModelScorer<'_> {
    type State = DecodeState;

    fn start(&self) -> Result<(DecodeState, Vec<f64>)> {
        Ok(self.start.clone())
    }

    fn extend(&self, state: &DecodeState, token: Token) -> Result<(DecodeState, Vec<f64>)> {
        self.model.step(state, token, self.spec)
    }

    /// One full forward over context and path.
    fn path_logits(&self, path: &[Token]) -> Result<Vec<Vec<f64>>> {
        let mut seq = self.context.clone();
        seq.extend_from_slice(&path[..path.len().saturating_sub(1)]);
        let f = self.model.forward(&seq, self.spec)?;
        Ok(f.logits[self.context.len() - 1..].to_vec())
    }
}

/// Summed next-token cross-entropy over the sequence, the number of
/// predicted tokens and the logit gradients (unscaled).
pub fn sequence_ce(logits: &[Vec<f64>], tokens: &[Token]) -> Result<(f64, usize, Vec<Vec<f64>>)> {
    let mut total = 0.0;
    let mut grads = vec![vec![0.0; logits[0].len()]; logits.len()];
    for k in 0..tokens.len().saturating_sub(1) {
        let (l, g) = crate::nn::softmax::cross_entropy(&logits[k], tokens[k + 1] as usize, None)?;
        total += l;
        grads[k] = g;
    }
    Ok((total, tokens.len().saturating_sub(1), grads))
}
