//! Small configurations shared by the integration tests.

#![allow(dead_code)]

use std::path::Path;

use xdrec::harness::{synth_generate, ExperimentConfig, SynthConfig};

/// A configuration that runs the whole pipeline in seconds.
pub fn tiny_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.seed = seed;
    c.synth = SynthConfig { users: 60, items_per_domain: 80, seed, ..SynthConfig::default() };
    c.pretrain.epochs = 3;
    c.adapters.epochs = 2;
    c.item_router.epochs = 2;
    c.universal.epochs = 2;
    c.universal.eval_every = 1;
    c.specific.epochs = 1;
    c.specific.eval_every = 1;
    c.user_router.epochs = 2;
    c.eval.selection_cases = Some(40);
    c.eval.ablations = false;
    c
}

/// A configuration large enough for learned effects to show.
pub fn small_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.seed = seed;
    c.synth = SynthConfig { users: 240, items_per_domain: 200, seed, ..SynthConfig::default() };
    c.pretrain.epochs = 15;
    c.universal.epochs = 4;
    c.specific.epochs = 2;
    c.eval.selection_cases = Some(100);
    c.eval.ablations = false;
    c
}

pub fn write_data(dir: &Path, cfg: &ExperimentConfig) {
    synth_generate(&cfg.synth).unwrap().write(dir).unwrap();
}
