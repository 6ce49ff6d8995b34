//! Autoregressive recommender over semantic-ID token sequences.

pub mod fusion;
pub mod model;
pub mod train;
pub mod vocab;

pub use fusion::{case_nll, fuse_predictions, router_case, router_nll, train_user_router, user_route, RouterCase, UserRouterLog};
pub use model::{expert_name, sequence_ce, spec_name, DecodeState, Forward, Gating, ModelConfig, ModelScorer, SeqModel};
pub use train::{mean_ce, train_specific, train_universal, EpochLog, PhaseLog, Selector, SpecificConfig, UniversalConfig};
pub use vocab::{encode_history, encode_sequence, Event, SidVocabulary, Token, BOS, EOS, SEP};
