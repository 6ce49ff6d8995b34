//! Staged experiment pipeline with hash-keyed artifacts.
//!
//! Every stage writes its artifacts under `<work>/<stage>/` and records its
//! key in `stage.json` last. A stage's key hashes its configuration section
//! together with the previous stage's key, so changing any upstream setting
//! invalidates everything downstream.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::config::{hash_json, ExperimentConfig};
use super::log::{context, ingest, split_leave_last_out, HeldOut, InteractionLog, SplitSpec, Target};
use super::metrics::{DomainMetrics, MetricsReport, VariantReport};
use super::synth::SynthLabels;
use crate::adapt::{
    format_embedding_dump, format_routing_report, fused_to_sids, route_catalog, train_adapter, train_router, DomainAdapterSet, FusedLatent,
    Sample, VibRouter,
};
use crate::data::{Catalog, Interaction};
use crate::decode::{beam_generate, build_tree, DecodeOptions, PrefixTree};
use crate::error::{Error, Result};
use crate::nn::{archive, Parameters, RngSeed};
use crate::par::Exec;
use crate::rec::{
    encode_history, encode_sequence, router_case, train_specific, train_universal, train_user_router, user_route, Event, Gating, ModelScorer,
    RouterCase, SeqModel, SidVocabulary, Token,
};
use crate::tokenizer::{pretrain, read_sids, write_sids, RqVae, SidMap};

pub const STAGES: [&str; 9] = [
    "tokenizer-pretrain",
    "adapters-train",
    "router-train",
    "sids-assign",
    "trie-build",
    "rec-train-universal",
    "rec-train-specific",
    "user-router-train",
    "evaluate",
];

/// Variant names in report order.
pub const FULL: &str = "full";
pub const ABLATIONS: [&str; 6] =
    ["w/o MTM", "w/o Adapter", "w/o Specific Expert", "w/o Universal Experts", "w/o MoE Gate (Avg.)", "w/o Prefix Tree"];

const STAGE_FILE: &str = "stage.json";

/// Ingested data, its leave-last-out split and optional synthetic labels.
pub struct Dataset {
    pub catalog: Catalog,
    pub log: InteractionLog,
    pub split: SplitSpec,
    pub labels: Option<SynthLabels>,
    /// Hash of the raw input files.
    pub hash: String,
}

impl Dataset {
    /// Reads `items.jsonl`, `interactions.jsonl` and, when present,
    /// `labels.json` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let items = dir.join("items.jsonl");
        let inter = dir.join("interactions.jsonl");
        let (catalog, log) = ingest(&items, &inter)?;
        let mut raw = fs::read(&items).map_err(|e| Error::io(&items, e))?;
        raw.extend(fs::read(&inter).map_err(|e| Error::io(&inter, e))?);
        let hash = hex::encode(Sha256::digest(&raw));
        let lp = dir.join("labels.json");
        let labels = if lp.exists() {
            Some(serde_json::from_str(&fs::read_to_string(&lp).map_err(|e| Error::io(&lp, e))?)?)
        } else {
            None
        };
        let split = split_leave_last_out(&log);
        Ok(Self { catalog, log, split, labels, hash })
    }

    pub fn domains(&self) -> &[String] {
        self.catalog.domains()
    }
}

/// Key of every stage, in order.
pub fn stage_keys(cfg: &ExperimentConfig, data_hash: &str) -> Vec<(&'static str, String)> {
    let sections = [
        json!({ "data": data_hash, "seed": cfg.seed, "tokenizer": cfg.tokenizer, "pretrain": cfg.pretrain }),
        json!(cfg.adapters),
        json!(cfg.item_router),
        json!(null),
        json!(null),
        json!({ "model": cfg.model, "train": cfg.universal, "selection": cfg.eval.selection_cases, "beam": cfg.eval.beam_width() }),
        json!(cfg.specific),
        json!(cfg.user_router),
        json!(cfg.eval),
    ];
    let mut prev = String::new();
    STAGES
        .iter()
        .zip(sections)
        .map(|(&s, sec)| {
            prev = hash_json(&json!([s, prev, sec]));
            (s, prev.clone())
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct StageRecord {
    stage: String,
    key: String,
}

/// Artifact directory layout under a work directory.
#[derive(Clone, Debug)]
pub struct Store {
    pub root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    pub fn path(&self, stage: &str, file: &str) -> PathBuf {
        self.dir(stage).join(file)
    }

    pub fn recorded_key(&self, stage: &str) -> Result<Option<String>> {
        let p = self.path(stage, STAGE_FILE);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let rec: StageRecord = serde_json::from_str(&text)?;
        Ok(Some(rec.key))
    }

    fn begin(&self, stage: &str) -> Result<PathBuf> {
        let dir = self.dir(stage);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let rec = dir.join(STAGE_FILE);
        if rec.exists() {
            fs::remove_file(&rec).map_err(|e| Error::io(&rec, e))?;
        }
        Ok(dir)
    }

    fn commit(&self, stage: &str, key: &str) -> Result<()> {
        let rec = StageRecord { stage: stage.to_string(), key: key.to_string() };
        write_text(&self.path(stage, STAGE_FILE), &serde_json::to_string_pretty(&rec)?)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

fn save_params<P: Parameters>(path: &Path, kind: &str, model: &P, extra: serde_json::Value) -> Result<()> {
    archive::save(path, model, &archive::manifest_for(kind, model, extra))
}

fn load_params<P: Parameters>(path: &Path, model: &mut P) -> Result<archive::Manifest> {
    let a = archive::read(path)?;
    archive::load_into(&a, model)?;
    Ok(a.manifest)
}

fn seed_stream(seed: u64, label: &str) -> crate::nn::Stream {
    RngSeed::new(seed, label).stream()
}

pub fn vocab_for(cfg: &ExperimentConfig, catalog: &Catalog, sids: &SidMap) -> SidVocabulary {
    SidVocabulary::from_sids(catalog.domains().to_vec(), vec![cfg.tokenizer.codebook_size; cfg.tokenizer.levels], sids)
}

/// One prefix tree per domain over the domain's semantic-ID paths.
pub fn build_tries(catalog: &Catalog, sids: &SidMap, vocab: &SidVocabulary) -> Result<BTreeMap<String, PrefixTree>> {
    catalog
        .domains()
        .iter()
        .map(|d| {
            let paths = catalog
                .in_domain(d)
                .map(|it| {
                    let sid = sids.get(&it.item_id).ok_or_else(|| Error::lookup("item", &it.item_id))?;
                    Ok((it.item_id.clone(), vocab.sid_tokens(sid)?))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((d.clone(), build_tree(d, paths)?))
        })
        .collect()
}

fn as_events<'a>(evs: impl IntoIterator<Item = &'a Interaction>) -> Vec<Event<'a>> {
    evs.into_iter().map(|e| (e.item_id.as_str(), e.domain.as_str())).collect()
}

/// Training sequences: each user's non-held-out events, optionally limited
/// to one domain, cut into consecutive windows that fit the context budget.
pub fn training_sequences(data: &Dataset, sids: &SidMap, vocab: &SidVocabulary, max_len: usize, domain: Option<&str>) -> Result<Vec<Vec<Token>>> {
    let per = ((max_len.saturating_sub(1)) / vocab.item_len()).max(1);
    let mut out = Vec::new();
    for (user, tl) in data.log.users() {
        let mask = data.split.train_mask(&data.log, user);
        let evs = as_events(tl.iter().zip(&mask).filter(|(e, &k)| k && domain.is_none_or(|d| e.domain == d)).map(|(e, _)| e));
        let mut end = evs.len();
        while end > 0 {
            let start = end.saturating_sub(per);
            if end - start >= 2 || start == 0 {
                out.push(encode_sequence(&evs[start..end], sids, vocab, max_len)?);
            }
            end = start;
        }
    }
    out.retain(|s| s.len() >= 2);
    Ok(out)
}

/// Encoded contexts and the target of one held-out pair.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub user: String,
    pub domain: String,
    /// Every earlier event of the user.
    pub cross: Vec<Token>,
    /// Earlier events of the target domain only.
    pub local: Vec<Token>,
    pub target: String,
    pub path: Vec<Token>,
}

pub fn eval_cases(data: &Dataset, held: &[&HeldOut], target: Target, sids: &SidMap, vocab: &SidVocabulary, max_len: usize) -> Result<Vec<EvalCase>> {
    held.iter()
        .map(|h| {
            let tl = data.log.timeline(&h.user).ok_or_else(|| Error::lookup("user", &h.user))?;
            let t = &tl[match target {
                Target::Val => h.val_pos,
                Target::Test => h.test_pos,
            }];
            let cross = encode_history(&as_events(context(&data.log, h, target, false)), sids, vocab, &h.domain, max_len)?;
            let local = encode_history(&as_events(context(&data.log, h, target, true)), sids, vocab, &h.domain, max_len)?;
            let sid = sids.get(&t.item_id).ok_or_else(|| Error::lookup("item", &t.item_id))?;
            Ok(EvalCase { user: h.user.clone(), domain: h.domain.clone(), cross, local, target: t.item_id.clone(), path: vocab.sid_tokens(sid)? })
        })
        .collect()
}

/// A deterministic subsample of held-out pairs for model selection.
fn selection_subset<'a>(data: &'a Dataset, n: Option<usize>, seed: u64, domain: Option<&str>) -> Vec<&'a HeldOut> {
    let mut held: Vec<&HeldOut> = data.split.held_out.iter().filter(|h| domain.is_none_or(|d| h.domain == d)).collect();
    if let Some(n) = n {
        seed_stream(seed, "selection").shuffle(&mut held);
        held.truncate(n);
    }
    held
}

/// How a variant turns a case into a ranking.
#[derive(Clone, Copy)]
pub enum Scoring<'a> {
    /// Universal and specific predictions mixed by the user router.
    Fused { model: &'a SeqModel, router: &'a VibRouter },
    /// Universal model on the cross-domain context.
    Universal(&'a SeqModel),
    /// Specific path alone on the domain-only context.
    Specific(&'a SeqModel),
    /// A separate model per domain on the domain-only context.
    PerDomain(&'a BTreeMap<String, SeqModel>),
}

/// Ranked item ids, invalid finished sequences and γ of one case.
pub struct CaseResult {
    pub ranked: Vec<String>,
    pub invalid: usize,
    pub gamma: Option<f64>,
}

pub fn score_case(scoring: Scoring<'_>, case: &EvalCase, tree: &PrefixTree, opts: &DecodeOptions) -> Result<CaseResult> {
    let (decoded, gamma) = match scoring {
        Scoring::Fused { model, router } => {
            let uni = ModelScorer::new(model, case.cross.clone(), None)?;
            let gamma = user_route(router, &uni.hidden, Sample::Eval);
            let d = if gamma == 0.0 {
                beam_generate(&[(&uni, 1.0)], tree, opts)?
            } else {
                let spec = ModelScorer::new(model, case.local.clone(), Some(model.spec_index(&case.domain)?))?;
                beam_generate(&[(&uni, 1.0 - gamma), (&spec, gamma)], tree, opts)?
            };
            (d, Some(gamma))
        }
        Scoring::Universal(model) => {
            let uni = ModelScorer::new(model, case.cross.clone(), None)?;
            (beam_generate(&[(&uni, 1.0)], tree, opts)?, None)
        }
        Scoring::Specific(model) => {
            let spec = ModelScorer::new(model, case.local.clone(), Some(model.spec_index(&case.domain)?))?;
            (beam_generate(&[(&spec, 1.0)], tree, opts)?, None)
        }
        Scoring::PerDomain(models) => {
            let m = models.get(&case.domain).ok_or_else(|| Error::lookup("domain model", &case.domain))?;
            let s = ModelScorer::new(m, case.local.clone(), None)?;
            (beam_generate(&[(&s, 1.0)], tree, opts)?, None)
        }
    };
    Ok(CaseResult { ranked: decoded.ranked.into_iter().map(|(id, _)| id).collect(), invalid: decoded.invalid, gamma })
}

fn score_all(scoring: Scoring<'_>, cases: &[EvalCase], tries: &BTreeMap<String, PrefixTree>, opts: &DecodeOptions, exec: Exec) -> Result<Vec<CaseResult>> {
    exec.map(cases, |c| {
        let tree = tries.get(&c.domain).ok_or_else(|| Error::lookup("prefix tree", &c.domain))?;
        score_case(scoring, c, tree, opts)
    })
    .into_iter()
    .collect()
}

fn mean_recall_10(cases: &[EvalCase], results: &[CaseResult]) -> f64 {
    if cases.is_empty() {
        return 0.0;
    }
    cases.iter().zip(results).map(|(c, r)| super::metrics::recall_at_k(&r.ranked, &c.target, 10)).sum::<f64>() / cases.len() as f64
}

fn metric_opts(cfg: &ExperimentConfig, constrained: bool) -> DecodeOptions {
    DecodeOptions { beam: cfg.eval.beam_width(), k: 10, constrained, order: cfg.eval.fusion_order }
}

/// Everything a recommendation model needs besides its parameters.
pub struct RecInputs<'a> {
    pub cfg: &'a ExperimentConfig,
    pub data: &'a Dataset,
    pub sids: &'a SidMap,
    pub vocab: &'a SidVocabulary,
    pub tries: &'a BTreeMap<String, PrefixTree>,
    pub exec: Exec,
}

impl RecInputs<'_> {
    fn cases(&self, held: &[&HeldOut], target: Target) -> Result<Vec<EvalCase>> {
        eval_cases(self.data, held, target, self.sids, self.vocab, self.cfg.model.max_len)
    }

    fn fresh_model(&self, label: &str, gating: Gating) -> Result<SeqModel> {
        let mc = crate::rec::ModelConfig { gating, ..self.cfg.model.clone() };
        SeqModel::new(mc, self.vocab.clone(), &mut seed_stream(self.cfg.seed, label))
    }

    /// Trains a universal model selected on validation R@10.
    pub fn train_universal(&self, gating: Gating) -> Result<(SeqModel, crate::rec::PhaseLog)> {
        let seqs = training_sequences(self.data, self.sids, self.vocab, self.cfg.model.max_len, None)?;
        let sel = self.cases(&selection_subset(self.data, self.cfg.eval.selection_cases, self.cfg.seed, None), Target::Val)?;
        let opts = metric_opts(self.cfg, true);
        let mut model = self.fresh_model("model-init", gating)?;
        let mut select = |m: &SeqModel| Ok(mean_recall_10(&sel, &score_all(Scoring::Universal(m), &sel, self.tries, &opts, self.exec)?));
        let log = train_universal(&mut model, &seqs, &self.cfg.universal, self.cfg.seed, self.exec, Some(&mut select))?;
        Ok((model, log))
    }

    /// Trains every domain's specific adapter on top of a universal model.
    pub fn train_specific(&self, model: &mut SeqModel) -> Result<BTreeMap<String, crate::rec::PhaseLog>> {
        let mut logs = BTreeMap::new();
        for d in self.data.domains() {
            let seqs = training_sequences(self.data, self.sids, self.vocab, self.cfg.model.max_len, Some(d))?;
            let sel = self.cases(&selection_subset(self.data, self.cfg.eval.selection_cases, self.cfg.seed, Some(d)), Target::Val)?;
            let opts = metric_opts(self.cfg, true);
            let mut select = |m: &SeqModel| Ok(mean_recall_10(&sel, &score_all(Scoring::Specific(m), &sel, self.tries, &opts, self.exec)?));
            let log = train_specific(model, d, &seqs, &self.cfg.specific, self.cfg.seed, self.exec, Some(&mut select))?;
            logs.insert(d.clone(), log);
        }
        Ok(logs)
    }

    /// Fits the user router on validation targets.
    pub fn train_user_router(&self, model: &SeqModel) -> Result<(VibRouter, crate::rec::UserRouterLog)> {
        let held: Vec<&HeldOut> = self.data.split.held_out.iter().collect();
        let cases = self.cases(&held, Target::Val)?;
        let rc: Vec<RouterCase> = self
            .exec
            .map(&cases, |c| -> Result<RouterCase> {
                let tree = self.tries.get(&c.domain).ok_or_else(|| Error::lookup("prefix tree", &c.domain))?;
                let uni = ModelScorer::new(model, c.cross.clone(), None)?;
                let spec = ModelScorer::new(model, c.local.clone(), Some(model.spec_index(&c.domain)?))?;
                router_case(&uni, &spec, tree, &c.path)
            })
            .into_iter()
            .collect::<Result<_>>()?;
        train_user_router(&rc, model.config.d_model, &self.cfg.user_router, self.cfg.seed, self.exec)
    }

    /// Separate models trained on one domain's data each.
    pub fn train_per_domain(&self) -> Result<BTreeMap<String, SeqModel>> {
        let mut out = BTreeMap::new();
        for d in self.data.domains() {
            let seqs = training_sequences(self.data, self.sids, self.vocab, self.cfg.model.max_len, Some(d))?;
            let sel = self.cases(&selection_subset(self.data, self.cfg.eval.selection_cases, self.cfg.seed, Some(d)), Target::Val)?;
            let opts = metric_opts(self.cfg, true);
            let mut model = self.fresh_model(&format!("model-init:{d}"), self.cfg.model.gating)?;
            let models_ref = |m: &SeqModel| -> Result<f64> {
                let one: BTreeMap<String, SeqModel> = BTreeMap::from([(d.clone(), m.clone())]);
                Ok(mean_recall_10(&sel, &score_all(Scoring::PerDomain(&one), &sel, self.tries, &opts, self.exec)?))
            };
            let mut select = models_ref;
            train_universal(&mut model, &seqs, &self.cfg.universal, self.cfg.seed, self.exec, Some(&mut select))?;
            out.insert(d.clone(), model);
        }
        Ok(out)
    }

    /// Test metrics of one variant.
    pub fn evaluate(&self, name: &str, scoring: Scoring<'_>, constrained: bool) -> Result<(VariantReport, Vec<(String, f64)>)> {
        let held: Vec<&HeldOut> = self.data.split.held_out.iter().collect();
        let cases = self.cases(&held, Target::Test)?;
        let results = score_all(scoring, &cases, self.tries, &metric_opts(self.cfg, constrained), self.exec)?;
        let mut report = VariantReport { variant: name.to_string(), decodes: cases.len(), ..Default::default() };
        report.invalid = results.iter().map(|r| r.invalid).sum();
        for d in self.data.domains() {
            let excluded = self.data.split.excluded.get(d).copied().unwrap_or(0);
            let dc = cases.iter().zip(&results).filter(|(c, _)| &c.domain == d).map(|(c, r)| (r.ranked.as_slice(), c.target.as_str()));
            report.domains.push(DomainMetrics::from_cases(d, excluded, dc));
        }
        let gammas = cases.iter().zip(&results).filter_map(|(c, r)| r.gamma.map(|g| (c.user.clone(), g))).collect();
        Ok((report, gammas))
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median γ per user label.
fn gamma_by_label(labels: Option<&SynthLabels>, gammas: &[(String, f64)]) -> Vec<(String, f64)> {
    let Some(labels) = labels else { return Vec::new() };
    let mut by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (u, g) in gammas {
        if let Some(l) = labels.user_type.get(u) {
            by.entry(l.as_str()).or_default().push(*g);
        }
    }
    by.into_iter().map(|(l, v)| (l.to_string(), median(v))).collect()
}

/// Item-side artifacts: tokenizer, adapters, item router and fused latents.
pub struct ItemSide {
    pub tokenizer: RqVae,
    pub adapters: DomainAdapterSet,
    pub router: VibRouter,
    pub fused: Vec<FusedLatent>,
}

impl ItemSide {
    pub fn train(cfg: &ExperimentConfig, catalog: &Catalog, exec: Exec) -> Result<Self> {
        let (tokenizer, _) = pretrain(catalog, &cfg.tokenizer, &cfg.pretrain, cfg.seed, exec)?;
        let adapters = train_adapters(cfg, catalog, &tokenizer, exec)?.0;
        let (router, _) = train_router(catalog, &tokenizer, &adapters, &cfg.item_router, cfg.seed, exec)?;
        let fused = route_catalog(catalog, &tokenizer, &adapters, &router, exec)?;
        Ok(Self { tokenizer, adapters, router, fused })
    }
}

fn train_adapters(cfg: &ExperimentConfig, catalog: &Catalog, tok: &RqVae, exec: Exec) -> Result<(DomainAdapterSet, Vec<crate::adapt::AdapterLog>)> {
    let mut set = DomainAdapterSet::new(tok, catalog.domains(), &cfg.adapters, cfg.seed)?;
    let mut logs = Vec::new();
    for d in catalog.domains() {
        let xs: Vec<&[f64]> = catalog.in_domain(d).map(|i| i.embedding.as_slice()).collect();
        logs.push(train_adapter(&mut set, d, &xs, tok, &cfg.adapters, cfg.seed, exec)?);
    }
    Ok((set, logs))
}

/// Recommendation-side models trained on one semantic-ID assignment.
pub struct RecSide {
    pub sids: SidMap,
    pub vocab: SidVocabulary,
    pub tries: BTreeMap<String, PrefixTree>,
    pub model: SeqModel,
    pub router: VibRouter,
}

impl RecSide {
    pub fn train(cfg: &ExperimentConfig, data: &Dataset, sids: SidMap, gating: Gating, exec: Exec) -> Result<Self> {
        let vocab = vocab_for(cfg, &data.catalog, &sids);
        let tries = build_tries(&data.catalog, &sids, &vocab)?;
        let inputs = RecInputs { cfg, data, sids: &sids, vocab: &vocab, tries: &tries, exec };
        let (mut model, _) = inputs.train_universal(gating)?;
        inputs.train_specific(&mut model)?;
        let (router, _) = inputs.train_user_router(&model)?;
        Ok(Self { sids, vocab, tries, model, router })
    }

    pub fn inputs<'a>(&'a self, cfg: &'a ExperimentConfig, data: &'a Dataset, exec: Exec) -> RecInputs<'a> {
        RecInputs { cfg, data, sids: &self.sids, vocab: &self.vocab, tries: &self.tries, exec }
    }
}

/// Full-model metrics, then every ablation when requested.
pub fn evaluate_variants(cfg: &ExperimentConfig, data: &Dataset, item: &ItemSide, full: &RecSide, ablations: bool, exec: Exec) -> Result<MetricsReport> {
    let inputs = full.inputs(cfg, data, exec);
    let (report, gammas) = inputs.evaluate(FULL, Scoring::Fused { model: &full.model, router: &full.router }, true)?;
    let mut out = MetricsReport { seed: cfg.seed, config_hash: cfg.hash(), variants: vec![report], gamma_by_label: gamma_by_label(data.labels.as_ref(), &gammas) };
    if !ablations {
        return Ok(out);
    }
    for name in ABLATIONS {
        log::info!("ablation: {name}");
        let report = match name {
            "w/o MTM" => {
                let mut c = cfg.clone();
                c.pretrain.lambda = 0.0;
                let side = ItemSide::train(&c, &data.catalog, exec)?;
                let sids = fused_to_sids(&data.catalog, &side.fused, &side.tokenizer)?;
                let rec = RecSide::train(&c, data, sids, cfg.model.gating, exec)?;
                rec.inputs(&c, data, exec).evaluate(name, Scoring::Fused { model: &rec.model, router: &rec.router }, true)?.0
            }
            "w/o Adapter" => {
                let sids = item.tokenizer.assign_sids(&data.catalog)?;
                let rec = RecSide::train(cfg, data, sids, cfg.model.gating, exec)?;
                rec.inputs(cfg, data, exec).evaluate(name, Scoring::Fused { model: &rec.model, router: &rec.router }, true)?.0
            }
            "w/o Specific Expert" => inputs.evaluate(name, Scoring::Universal(&full.model), true)?.0,
            "w/o Universal Experts" => {
                let models = inputs.train_per_domain()?;
                inputs.evaluate(name, Scoring::PerDomain(&models), true)?.0
            }
            "w/o MoE Gate (Avg.)" => {
                let rec = RecSide::train(cfg, data, full.sids.clone(), Gating::Average, exec)?;
                rec.inputs(cfg, data, exec).evaluate(name, Scoring::Fused { model: &rec.model, router: &rec.router }, true)?.0
            }
            "w/o Prefix Tree" => inputs.evaluate(name, Scoring::Fused { model: &full.model, router: &full.router }, false)?.0,
            _ => unreachable!("listed ablation"),
        };
        out.variants.push(report);
    }
    Ok(out)
}

/// A configured pipeline over one dataset and one work directory.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub data: Dataset,
    pub store: Store,
    pub exec: Exec,
    /// Also write every item's latents during `sids-assign`.
    pub dump_embeddings: bool,
    keys: Vec<(&'static str, String)>,
}

impl Pipeline {
    pub fn open(cfg: ExperimentConfig, data_dir: &Path, work_dir: &Path, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        let data = Dataset::load(data_dir)?;
        let keys = stage_keys(&cfg, &data.hash);
        fs::create_dir_all(work_dir).map_err(|e| Error::io(work_dir, e))?;
        Ok(Self { cfg, data, store: Store::new(work_dir), exec, dump_embeddings: false, keys })
    }

    fn index(stage: &str) -> Result<usize> {
        STAGES.iter().position(|s| *s == stage).ok_or_else(|| Error::lookup("stage", stage))
    }

    pub fn key(&self, stage: &str) -> Result<&str> {
        Ok(&self.keys[Self::index(stage)?].1)
    }

    pub fn is_current(&self, stage: &str) -> Result<bool> {
        Ok(self.store.recorded_key(stage)?.as_deref() == Some(self.key(stage)?))
    }

    /// Every earlier stage must hold artifacts under its expected key.
    pub fn check_upstream(&self, stage: &str) -> Result<()> {
        for (up, key) in &self.keys[..Self::index(stage)?] {
            match self.store.recorded_key(up)? {
                None => return Err(Error::Dependency { stage: stage.to_string(), upstream: up.to_string() }),
                Some(found) if &found != key => {
                    return Err(Error::StaleArtifact { stage: up.to_string(), expected: key.clone(), found });
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Runs one stage after checking its upstream artifacts.
    pub fn run_stage(&self, stage: &str) -> Result<()> {
        self.check_upstream(stage)?;
        log::info!("stage {stage}");
        let dir = self.store.begin(stage)?;
        let cfg = &self.cfg;
        let cat = &self.data.catalog;
        match stage {
            "tokenizer-pretrain" => {
                let (tok, log) = pretrain(cat, &cfg.tokenizer, &cfg.pretrain, cfg.seed, self.exec)?;
                save_params(&dir.join("tokenizer.xda"), "tokenizer", &tok, json!({ "input_dim": cat.dim(), "config": cfg.tokenizer }))?;
                write_json(&dir.join("log.json"), &log)?;
            }
            "adapters-train" => {
                let tok = self.load_tokenizer()?;
                let (set, logs) = train_adapters(cfg, cat, &tok, self.exec)?;
                save_params(&dir.join("adapters.xda"), "domain-adapters", &set, json!({ "domains": set.domains }))?;
                write_json(&dir.join("log.json"), &logs)?;
            }
            "router-train" => {
                let tok = self.load_tokenizer()?;
                let set = self.load_adapters(&tok)?;
                let (router, log) = train_router(cat, &tok, &set, &cfg.item_router, cfg.seed, self.exec)?;
                save_params(&dir.join("router.xda"), "item-router", &router, json!({ "d_in": cat.dim() }))?;
                write_json(&dir.join("log.json"), &log)?;
            }
            "sids-assign" => {
                let tok = self.load_tokenizer()?;
                let set = self.load_adapters(&tok)?;
                let router = self.load_item_router()?;
                let fused = route_catalog(cat, &tok, &set, &router, self.exec)?;
                write_sids(&dir.join("sids.tsv"), &tok.assign_sids(cat)?)?;
                write_sids(&dir.join("sids_fused.tsv"), &fused_to_sids(cat, &fused, &tok)?)?;
                write_text(&dir.join("routing_report.tsv"), &format_routing_report(cat, &fused))?;
                if self.dump_embeddings {
                    write_text(&dir.join("embeddings.jsonl"), &format_embedding_dump(cat, &fused)?)?;
                }
            }
            "trie-build" => {
                let sids = self.load_sids(true)?;
                let tries = build_tries(cat, &sids, &vocab_for(cfg, cat, &sids))?;
                let tdir = dir.join("tries");
                fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
                for (d, t) in &tries {
                    let p = tdir.join(format!("{d}.trie"));
                    fs::write(&p, t.to_bytes()).map_err(|e| Error::io(&p, e))?;
                }
            }
            "rec-train-universal" => {
                let (sids, vocab, tries) = self.rec_inputs()?;
                let inputs = RecInputs { cfg, data: &self.data, sids: &sids, vocab: &vocab, tries: &tries, exec: self.exec };
                let (model, log) = inputs.train_universal(cfg.model.gating)?;
                self.save_model(&dir, &model)?;
                write_json(&dir.join("log.json"), &log)?;
            }
            "rec-train-specific" => {
                let (sids, vocab, tries) = self.rec_inputs()?;
                let inputs = RecInputs { cfg, data: &self.data, sids: &sids, vocab: &vocab, tries: &tries, exec: self.exec };
                let mut model = self.load_model("rec-train-universal", &vocab)?;
                let logs = inputs.train_specific(&mut model)?;
                self.save_model(&dir, &model)?;
                write_json(&dir.join("log.json"), &logs)?;
            }
            "user-router-train" => {
                let (sids, vocab, tries) = self.rec_inputs()?;
                let inputs = RecInputs { cfg, data: &self.data, sids: &sids, vocab: &vocab, tries: &tries, exec: self.exec };
                let model = self.load_model("rec-train-specific", &vocab)?;
                let (router, log) = inputs.train_user_router(&model)?;
                save_params(&dir.join("router.xda"), "user-router", &router, json!({ "d_in": model.config.d_model }))?;
                write_json(&dir.join("log.json"), &log)?;
            }
            "evaluate" => {
                let report = self.evaluate_report(cfg.eval.ablations)?;
                write_text(&dir.join("metrics.json"), &report.to_json())?;
                write_text(&dir.join("metrics.tsv"), &report.to_tsv())?;
            }
            _ => return Err(Error::lookup("stage", stage)),
        }
        self.store.commit(stage, self.key(stage)?)
    }

    /// Runs every missing or stale stage in order and returns the report.
    pub fn run_all(&self) -> Result<MetricsReport> {
        for stage in STAGES {
            if self.is_current(stage)? {
                log::info!("stage {stage} is up to date");
            } else {
                self.run_stage(stage)?;
            }
        }
        self.read_report()
    }

    pub fn read_report(&self) -> Result<MetricsReport> {
        let p = self.store.path("evaluate", "metrics.json");
        Ok(serde_json::from_str(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?)
    }

    /// Metrics from the stored full model, optionally with every ablation.
    pub fn evaluate_report(&self, ablations: bool) -> Result<MetricsReport> {
        self.check_upstream("evaluate")?;
        let tok = self.load_tokenizer()?;
        let adapters = self.load_adapters(&tok)?;
        let router = self.load_item_router()?;
        let fused = route_catalog(&self.data.catalog, &tok, &adapters, &router, self.exec)?;
        let item = ItemSide { tokenizer: tok, adapters, router, fused };
        let (sids, vocab, tries) = self.rec_inputs()?;
        let model = self.load_model("rec-train-specific", &vocab)?;
        let user_router = self.load_user_router(model.config.d_model)?;
        let full = RecSide { sids, vocab, tries, model, router: user_router };
        evaluate_variants(&self.cfg, &self.data, &item, &full, ablations, self.exec)
    }

    /// Runs every ablation against the stored full model and writes the
    /// report under `<work>/ablate/`.
    pub fn ablate(&self) -> Result<MetricsReport> {
        let report = self.evaluate_report(true)?;
        let dir = self.store.dir("ablate");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_text(&dir.join("metrics.json"), &report.to_json())?;
        write_text(&dir.join("metrics.tsv"), &report.to_tsv())?;
        Ok(report)
    }

    pub fn load_tokenizer(&self) -> Result<RqVae> {
        let mut tok = RqVae::new(self.data.catalog.dim(), &self.cfg.tokenizer, &mut seed_stream(0, "load"))?;
        load_params(&self.store.path("tokenizer-pretrain", "tokenizer.xda"), &mut tok)?;
        tok.freeze();
        Ok(tok)
    }

    pub fn load_adapters(&self, tok: &RqVae) -> Result<DomainAdapterSet> {
        let mut set = DomainAdapterSet::new(tok, self.data.domains(), &self.cfg.adapters, self.cfg.seed)?;
        load_params(&self.store.path("adapters-train", "adapters.xda"), &mut set)?;
        set.freeze()?;
        Ok(set)
    }

    pub fn load_item_router(&self) -> Result<VibRouter> {
        let rc = &self.cfg.item_router;
        let mut r = VibRouter::new(self.data.catalog.dim(), rc.hidden, rc.d_r, &mut seed_stream(0, "load"));
        load_params(&self.store.path("router-train", "router.xda"), &mut r)?;
        r.freeze();
        Ok(r)
    }

    /// Fused (`true`) or universal semantic IDs.
    pub fn load_sids(&self, fused: bool) -> Result<SidMap> {
        read_sids(&self.store.path("sids-assign", if fused { "sids_fused.tsv" } else { "sids.tsv" }))
    }

    pub fn load_tries(&self) -> Result<BTreeMap<String, PrefixTree>> {
        self.data
            .domains()
            .iter()
            .map(|d| {
                let p = self.store.path("trie-build", &format!("tries/{d}.trie"));
                let t = PrefixTree::from_bytes(&fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
                Ok((d.clone(), t))
            })
            .collect()
    }

    fn rec_inputs(&self) -> Result<(SidMap, SidVocabulary, BTreeMap<String, PrefixTree>)> {
        let sids = self.load_sids(true)?;
        let vocab = vocab_for(&self.cfg, &self.data.catalog, &sids);
        Ok((sids, vocab, self.load_tries()?))
    }

    fn save_model(&self, dir: &Path, model: &SeqModel) -> Result<()> {
        let m = archive::manifest_for("seq-model", model, json!({ "config": model.config, "vocab": model.vocab }));
        write_json(&dir.join("model_manifest.json"), &m)?;
        archive::save(&dir.join("model.xda"), model, &m)
    }

    /// A stored recommendation model with its universal part frozen.
    pub fn load_model(&self, stage: &str, vocab: &SidVocabulary) -> Result<SeqModel> {
        let mut m = SeqModel::new(self.cfg.model.clone(), vocab.clone(), &mut seed_stream(0, "load"))?;
        let manifest = load_params(&self.store.path(stage, "model.xda"), &mut m)?;
        if manifest.extra.get("vocab") != Some(&json!(vocab)) {
            return Err(Error::Integrity(format!("model in `{stage}` was trained on a different vocabulary")));
        }
        m.freeze_universal()?;
        Ok(m)
    }

    pub fn load_user_router(&self, d_in: usize) -> Result<VibRouter> {
        let rc = &self.cfg.user_router;
        let mut r = VibRouter::new(d_in, rc.hidden, rc.d_r, &mut seed_stream(0, "load"));
        load_params(&self.store.path("user-router-train", "router.xda"), &mut r)?;
        r.freeze();
        Ok(r)
    }

    /// Top-`k` items of `domain` for `user` given the whole history.
    pub fn recommend(&self, user: &str, domain: &str, k: usize, beam: usize) -> Result<Vec<(String, f64)>> {
        self.check_upstream("evaluate")?;
        let tl = self.data.log.timeline(user).ok_or_else(|| Error::lookup("user", user))?;
        let (sids, vocab, tries) = self.rec_inputs()?;
        let tree = tries.get(domain).ok_or_else(|| Error::lookup("domain", domain))?;
        let model = self.load_model("rec-train-specific", &vocab)?;
        let router = self.load_user_router(model.config.d_model)?;
        let max_len = self.cfg.model.max_len;
        let cross = encode_history(&as_events(tl), &sids, &vocab, domain, max_len)?;
        let local = encode_history(&as_events(tl.iter().filter(|e| e.domain == domain)), &sids, &vocab, domain, max_len)?;
        let uni = ModelScorer::new(&model, cross, None)?;
        let spec = ModelScorer::new(&model, local, Some(model.spec_index(domain)?))?;
        let gamma = user_route(&router, &uni.hidden, Sample::Eval);
        let opts = DecodeOptions { beam, k, constrained: true, order: self.cfg.eval.fusion_order };
        Ok(beam_generate(&[(&uni, 1.0 - gamma), (&spec, gamma)], tree, &opts)?.ranked)
    }
}

/// Runs the whole pipeline, reusing up-to-date artifacts in `work_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, data_dir: &Path, work_dir: &Path, exec: Exec) -> Result<MetricsReport> {
    Pipeline::open(cfg.clone(), data_dir, work_dir, exec)?.run_all()
}
