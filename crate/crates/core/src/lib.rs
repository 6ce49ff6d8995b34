//! Generative cross-domain sequential recommendation.
//!
//! Items are tokenised into residual-quantised semantic IDs, domain-specific
//! low-rank adapters refine those IDs per domain, an autoregressive model
//! mixes universal and domain-specific experts to predict the next ID, and
//! decoding is constrained to each domain's catalog through a prefix tree.

pub mod adapt;
pub mod data;
pub mod decode;
pub mod error;
pub mod harness;
pub mod nn;
pub mod par;
pub mod rec;
pub mod tokenizer;

pub use error::{Error, Result};
