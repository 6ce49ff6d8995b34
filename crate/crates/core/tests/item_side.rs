//! Tokenizer, domain adapters and item router on synthetic catalogs.

use std::collections::{BTreeMap, HashSet};

use xdrec::adapt::{adapted_recon_error, route_catalog, train_adapter, train_router, universal_recon_error, DomainAdapterSet};
use xdrec::data::Catalog;
use xdrec::harness::{synth_generate, ExperimentConfig, SynthConfig, SynthData};
use xdrec::par::Exec;
use xdrec::tokenizer::{pretrain, residual_quantize, RqVae};

fn synth(items_per_domain: usize, domains: usize, seed: u64) -> SynthData {
    synth_generate(&SynthConfig { users: 1, items_per_domain, domains, seed, ..SynthConfig::default() }).unwrap()
}

fn desk_tokenizer(catalog: &Catalog, epochs: usize, seed: u64) -> (RqVae, xdrec::tokenizer::PretrainLog) {
    let cfg = ExperimentConfig::desk();
    let pcfg = xdrec::tokenizer::PretrainConfig { epochs, ..cfg.pretrain };
    pretrain(catalog, &cfg.tokenizer, &pcfg, seed, Exec::Parallel).unwrap()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

#[test]
fn pretraining_on_500_items_lowers_the_objective() {
    let cat = Catalog::new(synth(500, 1, 7).items).unwrap();
    let (_, log) = desk_tokenizer(&cat, 30, 7);
    assert!(log.last.total < log.initial.total, "{:?} vs {:?}", log.last, log.initial);
}

#[test]
fn sids_are_injective_on_2000_items() {
    let cat = Catalog::new(synth(1000, 2, 7).items).unwrap();
    assert_eq!(cat.len(), 2000);
    let (tok, _) = desk_tokenizer(&cat, 3, 7);
    let sids = tok.assign_sids(&cat).unwrap();
    assert_eq!(sids.len(), 2000);
    let rows: Vec<(&String, _)> = sids.iter().collect();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            assert_ne!(rows[i].1, rows[j].1, "{} and {} share a semantic ID", rows[i].0, rows[j].0);
        }
    }
}

#[test]
fn adapters_beat_the_universal_encoder_on_shifted_domains() {
    let mut gains = Vec::new();
    for seed in [7, 8, 9] {
        let data = synth_generate(&SynthConfig { users: 1, items_per_domain: 300, domain_shift: 4.0, seed, ..SynthConfig::default() }).unwrap();
        let cat = Catalog::new(data.items).unwrap();
        let (tok, _) = desk_tokenizer(&cat, 10, seed);
        let cfg = xdrec::adapt::AdapterConfig { epochs: 30, ..ExperimentConfig::desk().adapters };
        let mut set = DomainAdapterSet::new(&tok, cat.domains(), &cfg, seed).unwrap();
        let xs: Vec<&[f64]> = cat.in_domain("B").map(|i| i.embedding.as_slice()).collect();
        train_adapter(&mut set, "B", &xs, &tok, &cfg, seed, Exec::Parallel).unwrap();
        let uni = universal_recon_error(&xs, &tok, Exec::Parallel).unwrap();
        let ada = adapted_recon_error(&set, "B", &xs, &tok, Exec::Parallel).unwrap();
        gains.push(uni - ada);
    }
    assert!(median(gains.clone()) > 0.0, "{gains:?}");
}

/// Fraction of same-concept cross-domain item pairs sharing the first code.
fn level0_sharing(cat: &Catalog, concept: &BTreeMap<String, usize>, codes: &BTreeMap<String, usize>) -> f64 {
    let (mut same, mut total) = (0usize, 0usize);
    let a: Vec<_> = cat.in_domain("A").collect();
    let b: Vec<_> = cat.in_domain("B").collect();
    for x in &a {
        for y in &b {
            if concept[&x.item_id] == concept[&y.item_id] {
                total += 1;
                same += usize::from(codes[&x.item_id] == codes[&y.item_id]);
            }
        }
    }
    same as f64 / total.max(1) as f64
}

#[test]
fn fused_sids_share_first_codes_more_than_specific_sids() {
    let mut diffs = Vec::new();
    for seed in 7..12 {
        let data = synth_generate(&SynthConfig { users: 1, items_per_domain: 300, seed, ..SynthConfig::default() }).unwrap();
        let concept = data.labels.item_concept.clone();
        let cat = Catalog::new(data.items).unwrap();
        let cfg = ExperimentConfig::desk();
        let (tok, _) = desk_tokenizer(&cat, 10, seed);
        let mut set = DomainAdapterSet::new(&tok, cat.domains(), &cfg.adapters, seed).unwrap();
        for d in cat.domains() {
            let xs: Vec<&[f64]> = cat.in_domain(d).map(|i| i.embedding.as_slice()).collect();
            train_adapter(&mut set, d, &xs, &tok, &cfg.adapters, seed, Exec::Parallel).unwrap();
        }
        let (router, _) = train_router(&cat, &tok, &set, &cfg.item_router, seed, Exec::Parallel).unwrap();
        let fused = route_catalog(&cat, &tok, &set, &router, Exec::Parallel).unwrap();
        let mut fused0 = BTreeMap::new();
        let mut spec0 = BTreeMap::new();
        for (item, f) in cat.items().iter().zip(&fused) {
            fused0.insert(item.item_id.clone(), residual_quantize(&f.z_fused, &tok.codebooks).unwrap().codes[0]);
            spec0.insert(item.item_id.clone(), residual_quantize(&f.z_spec, &tok.codebooks).unwrap().codes[0]);
        }
        diffs.push(level0_sharing(&cat, &concept, &fused0) - level0_sharing(&cat, &concept, &spec0));
    }
    assert!(median(diffs.clone()) > 0.0, "{diffs:?}");
}

#[test]
fn fused_sid_table_covers_the_catalog_once() {
    let cat = Catalog::new(synth(200, 2, 3).items).unwrap();
    let cfg = ExperimentConfig::desk();
    let (tok, _) = desk_tokenizer(&cat, 2, 3);
    let set = DomainAdapterSet::new(&tok, cat.domains(), &cfg.adapters, 3).unwrap();
    let (router, _) = train_router(&cat, &tok, &set, &cfg.item_router, 3, Exec::Parallel).unwrap();
    let sids = xdrec::adapt::assign_fused_sids(&cat, &tok, &set, &router, Exec::Parallel).unwrap();
    assert_eq!(sids.len(), cat.len());
    let distinct: HashSet<_> = sids.values().collect();
    assert_eq!(distinct.len(), cat.len());
}
