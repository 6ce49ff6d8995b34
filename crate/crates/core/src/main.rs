use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use xdrec::error::Result;
use xdrec::harness::{grad_suite, synth_generate, ExperimentConfig, Pipeline};
use xdrec::par::Exec;

#[derive(Parser)]
#[command(name = "xdrec", version, about = "Generative cross-domain sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; unset fields take the preset's values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: `paper` or `desk`.
    #[arg(long, default_value = "paper")]
    preset: String,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding items.jsonl and interactions.jsonl.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Artifact directory.
    #[arg(long, default_value = "work")]
    work: PathBuf,
    /// Disable data parallelism.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let base = ExperimentConfig::preset(&self.preset)?;
                let text = std::fs::read_to_string(p).map_err(|e| xdrec::error::Error::io(p, e))?;
                merge(base, &text)?
            }
            None => ExperimentConfig::preset(&self.preset)?,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    fn pipeline(&self) -> Result<Pipeline> {
        self.pipeline_with(self.config()?)
    }

    fn pipeline_with(&self, cfg: ExperimentConfig) -> Result<Pipeline> {
        Pipeline::open(cfg, &self.data, &self.work, self.exec())
    }
}

/// Overlays a TOML document on a preset, table by table.
fn merge(base: ExperimentConfig, text: &str) -> Result<ExperimentConfig> {
    let bad = |e: toml::de::Error| xdrec::error::Error::Config(e.to_string());
    let mut doc: toml::Table = toml::from_str(&base.to_toml()).map_err(bad)?;
    let over: toml::Table = toml::from_str(text).map_err(bad)?;
    for (k, v) in over {
        match (doc.get_mut(&k), v) {
            (Some(toml::Value::Table(t)), toml::Value::Table(o)) => t.extend(o),
            (_, v) => {
                doc.insert(k, v);
            }
        }
    }
    ExperimentConfig::from_toml(&toml::to_string(&doc).map_err(|e| xdrec::error::Error::Config(e.to_string()))?)
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset (items.jsonl, interactions.jsonl, labels.json).
    SynthGen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "data")]
        out: PathBuf,
        /// Also write the resolved configuration as TOML.
        #[arg(long)]
        write_config: Option<PathBuf>,
    },
    TokenizerPretrain(Common),
    AdaptersTrain(Common),
    RouterTrain(Common),
    SidsAssign {
        #[command(flatten)]
        common: Common,
        /// Also write every item's universal, specific and fused latents.
        #[arg(long)]
        dump_embeddings: bool,
    },
    TrieBuild(Common),
    RecTrainUniversal(Common),
    RecTrainSpecific(Common),
    UserRouterTrain(Common),
    /// Test metrics of the full model; `--all` first runs any missing stage.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        all: bool,
        /// Also report every ablation variant.
        #[arg(long)]
        ablations: bool,
    },
    /// Print `rank, item_id, log-probability` as TSV.
    Recommend {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        user: String,
        #[arg(long)]
        domain: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Finite-difference checks of every training objective.
    GradCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Evaluate every ablation against the stored full model.
    Ablate(Common),
}

fn stage(common: &Common, name: &str) -> Result<()> {
    common.pipeline()?.run_stage(name)
}

fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::SynthGen { common, out, write_config } => {
            let cfg = common.config()?;
            let mut synth = cfg.synth.clone();
            if let Some(s) = common.seed {
                synth.seed = s;
            }
            synth_generate(&synth)?.write(&out)?;
            if let Some(p) = write_config {
                std::fs::write(&p, cfg.to_toml()).map_err(|e| xdrec::error::Error::io(&p, e))?;
            }
        }
        Cmd::TokenizerPretrain(c) => stage(&c, "tokenizer-pretrain")?,
        Cmd::AdaptersTrain(c) => stage(&c, "adapters-train")?,
        Cmd::RouterTrain(c) => stage(&c, "router-train")?,
        Cmd::SidsAssign { common, dump_embeddings } => {
            let mut p = common.pipeline()?;
            p.dump_embeddings = dump_embeddings;
            p.run_stage("sids-assign")?;
        }
        Cmd::TrieBuild(c) => stage(&c, "trie-build")?,
        Cmd::RecTrainUniversal(c) => stage(&c, "rec-train-universal")?,
        Cmd::RecTrainSpecific(c) => stage(&c, "rec-train-specific")?,
        Cmd::UserRouterTrain(c) => stage(&c, "user-router-train")?,
        Cmd::Evaluate { common, all, ablations } => {
            let mut cfg = common.config()?;
            cfg.eval.ablations |= ablations;
            let p = common.pipeline_with(cfg)?;
            let report = if all {
                p.run_all()?
            } else {
                p.run_stage("evaluate")?;
                p.read_report()?
            };
            print!("{}", report.to_tsv());
        }
        Cmd::Recommend { common, user, domain, k, beam } => {
            let p = common.pipeline()?;
            let beam = beam.unwrap_or_else(|| xdrec::decode::default_beam(k));
            println!("rank\titem_id\tlog_prob");
            for (i, (item, lp)) in p.recommend(&user, &domain, k, beam)?.iter().enumerate() {
                println!("{}\t{item}\t{lp:.6}", i + 1);
            }
        }
        Cmd::GradCheck { seed } => {
            let mut ok = true;
            println!("objective\tmax_rel_error\tchecked\tstatus");
            for l in grad_suite(seed)? {
                let pass = l.max_rel_error < 1e-4;
                ok &= pass;
                println!("{}\t{:.3e}\t{}\t{}", l.objective, l.max_rel_error, l.checked, if pass { "PASS" } else { "FAIL" });
            }
            return Ok(ok);
        }
        Cmd::Ablate(c) => print!("{}", c.pipeline()?.ablate()?.to_tsv()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
