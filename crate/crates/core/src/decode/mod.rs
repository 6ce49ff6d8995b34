//! Catalog-constrained decoding: prefix trees and beam search.

mod beam;
mod tree;

pub use beam::{beam_generate, default_beam, exhaustive_rank, path_step_probs, DecodeOptions, Decoded, FusionOrder, Mixture, Scorer};
pub use tree::{build_tree, constrained_step, PrefixTree};
