//! Experiment configuration in TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::SynthConfig;
use crate::adapt::{AdapterConfig, RouterConfig};
use crate::decode::{default_beam, FusionOrder};
use crate::error::{Error, Result};
use crate::rec::{ModelConfig, SpecificConfig, UniversalConfig};
use crate::tokenizer::{CtxConfig, PretrainConfig, TokenizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Ranking cutoff used by `recommend`; metrics always report @5 and @10.
    pub k: usize,
    /// Beam width; `None` means `max(2k, 20)`.
    pub beam: Option<usize>,
    pub fusion_order: FusionOrder,
    /// Validation cases scored per model-selection check; `None` uses all.
    pub selection_cases: Option<usize>,
    /// Run every ablation after the full model.
    pub ablations: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 10, beam: None, fusion_order: FusionOrder::MaskThenFuse, selection_cases: None, ablations: true }
    }
}

impl EvalConfig {
    pub fn beam_width(&self) -> usize {
        self.beam.unwrap_or_else(|| default_beam(self.k.max(10)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub tokenizer: TokenizerConfig,
    pub pretrain: PretrainConfig,
    pub adapters: AdapterConfig,
    pub item_router: RouterConfig,
    pub model: ModelConfig,
    pub universal: UniversalConfig,
    pub specific: SpecificConfig,
    pub user_router: RouterConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            synth: SynthConfig::default(),
            tokenizer: TokenizerConfig::default(),
            pretrain: PretrainConfig::default(),
            adapters: AdapterConfig::default(),
            item_router: RouterConfig::default(),
            model: ModelConfig::default(),
            universal: UniversalConfig::default(),
            specific: SpecificConfig::default(),
            user_router: RouterConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reduced sizes and larger learning rates for a single-CPU run on the
    /// synthetic default data.
    pub fn desk() -> Self {
        Self {
            tokenizer: TokenizerConfig {
                levels: 3,
                codebook_size: 32,
                latent_dim: 16,
                hidden: vec![64],
                ctx: CtxConfig { d_model: 16, n_heads: 2, n_layers: 1, d_ff: 32 },
            },
            pretrain: PretrainConfig { epochs: 30, lr: 3e-3, batch: 256, ..PretrainConfig::default() },
            adapters: AdapterConfig { rank: 8, alpha: 16.0, epochs: 10, lr: 1e-3, batch: 64, ..AdapterConfig::default() },
            item_router: RouterConfig { hidden: 32, d_r: 8, epochs: 5, lr: 1e-3, ..RouterConfig::default() },
            model: ModelConfig {
                d_model: 32,
                n_heads: 2,
                n_layers: 2,
                d_ff: 64,
                max_len: 72,
                experts: 4,
                expert_rank: 4,
                expert_alpha: 8.0,
                spec_rank: 4,
                spec_alpha: 8.0,
                ..ModelConfig::default()
            },
            universal: UniversalConfig { epochs: 8, lr: 3e-3, batch: 16, dropout: 0.05, eval_every: 2 },
            specific: SpecificConfig { epochs: 4, lr: 3e-3, batch: 16, dropout: 0.05, eval_every: 2 },
            user_router: RouterConfig { hidden: 32, d_r: 8, epochs: 10, lr: 3e-3, batch: 32, ..RouterConfig::default() },
            eval: EvalConfig { selection_cases: Some(200), ..EvalConfig::default() },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (expected `paper` or `desk`)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.pretrain.validate(self.tokenizer.levels)?;
        self.model.validate()?;
        if self.eval.k == 0 || self.eval.beam_width() < self.eval.k.max(10) {
            return Err(Error::Config(format!("beam {} must be at least max(k, 10) with k = {}", self.eval.beam_width(), self.eval.k)));
        }
        Ok(())
    }

    /// Hash of the whole configuration.
    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

/// SHA-256 of the canonical JSON form of `parts`.
pub fn hash_json<T: Serialize + ?Sized>(parts: &T) -> String {
    let bytes = serde_json::to_vec(parts).expect("hashable value serialises");
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_values() {
        let c = ExperimentConfig::default();
        assert_eq!((c.model.experts, c.model.expert_rank, c.model.expert_alpha), (4, 64, 128.0));
        assert_eq!((c.universal.epochs, c.universal.lr, c.universal.batch), (10, 5e-5, 8));
        assert!((10..=20).contains(&c.specific.epochs));
        assert_eq!(c.user_router.vib_weight, 1e-3);
        assert_eq!((c.pretrain.lr, c.pretrain.batch, c.pretrain.epochs), (1e-4, 512, 100));
        assert_eq!((c.adapters.rank, c.adapters.alpha, c.adapters.dropout, c.adapters.epochs), (64, 32.0, 0.05, 50));
        assert_eq!(c.item_router.hidden, 128);
        assert_eq!(c.model.max_len, 256);
        assert_eq!(c.eval.beam_width(), 20);
    }

    #[test]
    fn toml_round_trip() {
        for c in [ExperimentConfig::default(), ExperimentConfig::desk()] {
            let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let c = ExperimentConfig::from_toml("seed = 9\n[model]\nexperts = 2\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.model.experts, 2);
        assert_eq!(c.model.d_model, ModelConfig::default().d_model);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("[model]\nexperts = 0\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[eval]\nk = 10\nbeam = 5\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("bogus = 1\n"), Err(Error::Config(_))));
    }
}
