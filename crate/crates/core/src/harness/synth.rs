//! Synthetic cross-domain data with planted concept structure.
//!
//! Items are noisy copies of concept centres; shared concepts occur in
//! every domain, displaced by a per-domain shift. Specialist users follow a
//! per-domain successor map between their own consecutive events in a
//! domain; cross-domain users follow a map from whatever they did last, in
//! any domain.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::log::write_jsonl;
use crate::data::{Interaction, ItemRecord};
use crate::error::{Error, Result};
use crate::nn::{RngSeed, Stream};

pub const SPECIALIST: &str = "specialist";
pub const CROSS: &str = "cross";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub domains: usize,
    pub users: usize,
    pub items_per_domain: usize,
    pub concepts: usize,
    /// Fraction of concepts present in every domain.
    pub shared_fraction: f64,
    /// Norm of each domain's displacement.
    pub domain_shift: f64,
    pub dim: usize,
    /// Per-coordinate item noise around its concept centre.
    pub noise: f64,
    /// Events per user per domain, drawn uniformly from this range.
    pub min_len: usize,
    pub max_len: usize,
    pub cross_user_fraction: f64,
    /// Probability of following the planted successor map.
    pub follow: f64,
    /// Popularity exponent within a concept.
    pub zipf: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            domains: 2,
            users: 800,
            items_per_domain: 1000,
            concepts: 20,
            shared_fraction: 0.4,
            domain_shift: 2.0,
            dim: 32,
            noise: 0.35,
            min_len: 4,
            max_len: 12,
            cross_user_fraction: 0.5,
            follow: 0.85,
            zipf: 1.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(Error::Config(format!("shared fraction {} outside [0, 1]", self.shared_fraction)));
        }
        if !(0.0..=1.0).contains(&self.cross_user_fraction) || !(0.0..=1.0).contains(&self.follow) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if self.domains == 0 || self.domains > 26 {
            return Err(Error::Config(format!("{} domains; expected 1..=26", self.domains)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("sequence length range {}..={} is empty", self.min_len, self.max_len)));
        }
        if self.dim == 0 || self.items_per_domain == 0 || self.concepts == 0 {
            return Err(Error::Config("dimension, items and concepts must be positive".into()));
        }
        Ok(())
    }

    pub fn shared_concepts(&self) -> usize {
        (self.shared_fraction * self.concepts as f64).round() as usize
    }
}

pub fn domain_name(i: usize) -> String {
    ((b'A' + i as u8) as char).to_string()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthLabels {
    pub item_concept: BTreeMap<String, usize>,
    pub user_type: BTreeMap<String, String>,
}

pub struct SynthData {
    pub items: Vec<ItemRecord>,
    pub interactions: Vec<Interaction>,
    pub labels: SynthLabels,
}

impl SynthData {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join("items.jsonl"), &self.items)?;
        write_jsonl(&dir.join("interactions.jsonl"), &self.interactions)?;
        let p = dir.join("labels.json");
        std::fs::write(&p, serde_json::to_string_pretty(&self.labels)?).map_err(|e| Error::io(p, e))
    }
}

/// Concepts of each domain: the shared ones, then its exclusive ones.
fn domain_concepts(cfg: &SynthConfig) -> Result<Vec<Vec<usize>>> {
    let shared = cfg.shared_concepts();
    let mut out: Vec<Vec<usize>> = vec![(0..shared).collect(); cfg.domains];
    for c in shared..cfg.concepts {
        out[(c - shared) % cfg.domains].push(c);
    }
    if out.iter().any(Vec::is_empty) {
        return Err(Error::Config("some domain has no concepts".into()));
    }
    Ok(out)
}

fn pick(rng: &mut Stream, xs: &[usize]) -> usize {
    xs[rng.below(xs.len())]
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let root = RngSeed::new(cfg.seed, "synth");
    let concepts = domain_concepts(cfg)?;
    let mut rng = root.child("centres").stream();
    let centres: Vec<Vec<f64>> = (0..cfg.concepts).map(|_| rng.normal_vec(cfg.dim, 1.0)).collect();
    let shifts: Vec<Vec<f64>> = (0..cfg.domains)
        .map(|_| {
            let v = rng.normal_vec(cfg.dim, 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x * cfg.domain_shift / n).collect()
        })
        .collect();

    let mut items = Vec::with_capacity(cfg.domains * cfg.items_per_domain);
    let mut labels = SynthLabels::default();
    // (domain, concept) -> item ids in popularity order.
    let mut pool: BTreeMap<(usize, usize), Vec<String>> = BTreeMap::new();
    let mut rng = root.child("items").stream();
    for d in 0..cfg.domains {
        let dn = domain_name(d);
        for k in 0..cfg.items_per_domain {
            let c = concepts[d][k % concepts[d].len()];
            let id = format!("{dn}{k:05}");
            let embedding = centres[c].iter().zip(&shifts[d]).map(|(m, s)| m + s + cfg.noise * rng.normal()).collect();
            items.push(ItemRecord { item_id: id.clone(), domain: dn.clone(), embedding });
            labels.item_concept.insert(id.clone(), c);
            pool.entry((d, c)).or_default().push(id);
        }
    }
    let weights: BTreeMap<(usize, usize), Vec<f64>> =
        pool.iter().map(|(k, ids)| (*k, (0..ids.len()).map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf)).collect())).collect();

    let mut rng = root.child("maps").stream();
    let local: Vec<BTreeMap<usize, usize>> = concepts
        .iter()
        .map(|cs| {
            let mut perm = cs.clone();
            rng.shuffle(&mut perm);
            cs.iter().copied().zip(perm).collect()
        })
        .collect();
    let cross: Vec<Vec<usize>> = concepts.iter().map(|cs| (0..cfg.concepts).map(|_| pick(&mut rng, cs)).collect()).collect();

    let mut interactions = Vec::new();
    let mut rng = root.child("users").stream();
    for u in 0..cfg.users {
        let uid = format!("u{u:05}");
        let is_cross = rng.bernoulli(cfg.cross_user_fraction);
        labels.user_type.insert(uid.clone(), if is_cross { CROSS } else { SPECIALIST }.to_string());
        let mut doms: Vec<usize> = Vec::new();
        for d in 0..cfg.domains {
            let n = cfg.min_len + rng.below(cfg.max_len - cfg.min_len + 1);
            doms.extend(std::iter::repeat_n(d, n));
        }
        rng.shuffle(&mut doms);
        let mut ts = 1_600_000_000 + rng.below(1_000_000) as i64;
        let mut last_any: Option<usize> = None;
        let mut last_in: Vec<Option<usize>> = vec![None; cfg.domains];
        for d in doms {
            let prev = if is_cross { last_any.map(|p| cross[d][p]) } else { last_in[d].map(|p| local[d][&p]) };
            let c = match prev {
                Some(next) if rng.bernoulli(cfg.follow) => next,
                _ => pick(&mut rng, &concepts[d]),
            };
            let ids = &pool[&(d, c)];
            let item = ids[rng.categorical(&weights[&(d, c)])].clone();
            interactions.push(Interaction { user_id: uid.clone(), item_id: item, domain: domain_name(d), ts });
            ts += 1 + rng.below(86_400) as i64;
            last_any = Some(c);
            last_in[d] = Some(c);
        }
    }
    Ok(SynthData { items, interactions, labels })
}
