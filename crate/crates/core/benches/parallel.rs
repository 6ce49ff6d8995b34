use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use xdrec::data::Catalog;
use xdrec::harness::{synth_generate, SynthConfig};
use xdrec::nn::RngSeed;
use xdrec::par::Exec;
use xdrec::rec::{mean_ce, ModelConfig, SeqModel, SidVocabulary, Token, BOS};
use xdrec::tokenizer::{pretrain, CtxConfig, PretrainConfig, TokenizerConfig};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn sequence_loss(c: &mut Criterion) {
    let vocab = SidVocabulary::new(vec!["A".into(), "B".into()], vec![32, 32, 32], 4);
    let cfg = ModelConfig { d_model: 32, n_heads: 2, d_ff: 64, max_len: 72, expert_rank: 4, spec_rank: 4, ..ModelConfig::default() };
    let model = SeqModel::new(cfg, vocab.clone(), &mut RngSeed::new(1, "bench").stream()).unwrap();
    let mut rng = RngSeed::new(2, "seqs").stream();
    let seqs: Vec<Vec<Token>> = (0..64)
        .map(|_| {
            let mut s = vec![BOS];
            for _ in 0..10 {
                s.push(vocab.tag("A").unwrap());
                for l in 0..3 {
                    s.push(vocab.code(l, rng.below(32)).unwrap());
                }
                s.push(vocab.dedup(0).unwrap());
                s.push(2);
            }
            s
        })
        .collect();
    let mut g = c.benchmark_group("sequence_loss");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| b.iter(|| mean_ce(&model, &seqs, None, e).unwrap()));
    }
    g.finish();
}

fn tokenizer_epoch(c: &mut Criterion) {
    let data = synth_generate(&SynthConfig { users: 1, items_per_domain: 500, ..SynthConfig::default() }).unwrap();
    let catalog = Catalog::new(data.items).unwrap();
    let tcfg = TokenizerConfig { codebook_size: 32, latent_dim: 16, hidden: vec![64], ctx: CtxConfig { d_model: 16, n_heads: 2, d_ff: 32, n_layers: 1 }, ..TokenizerConfig::default() };
    let pcfg = PretrainConfig { epochs: 1, lr: 1e-3, batch: 256, kmeans_iters: 5, ..PretrainConfig::default() };
    let mut g = c.benchmark_group("tokenizer_epoch");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| b.iter(|| pretrain(&catalog, &tcfg, &pcfg, 1, e).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, sequence_loss, tokenizer_epoch);
criterion_main!(benches);
