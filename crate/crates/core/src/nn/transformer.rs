//! Pre-norm transformer blocks whose every linear map carries adapters.
//!
//! Rows are positions. Each position has its own adapter mix, so gating can
//! vary along the sequence. Backward passes are written out by hand.

use serde::{Deserialize, Serialize};

use super::lora::{Dropout, LoraCache, LoraLinear, Mix};
use super::mlp::{silu, silu_grad};
use super::params::{ParamMut, ParamRef, Parameters};
use super::rng::Stream;
use super::{axpy, dot, Matrix};
use crate::error::Result;

const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub causal: bool,
}

impl TransformerConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

fn rms_forward(x: &[f64], gain: &[f64]) -> (Vec<f64>, f64) {
    let r = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64 + RMS_EPS).sqrt();
    (x.iter().zip(gain).map(|(v, g)| g * v / r).collect(), r)
}

/// Returns dx; accumulates the gain gradient.
fn rms_backward(x: &[f64], r: f64, gain: &[f64], dy: &[f64], dgain: &mut [f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let n: Vec<f64> = x.iter().map(|v| v / r).collect();
    let dn: Vec<f64> = dy.iter().zip(gain).map(|(a, g)| a * g).collect();
    for ((dg, a), ni) in dgain.iter_mut().zip(dy).zip(&n) {
        *dg += a * ni;
    }
    let m = dot(&dn, &n) / d;
    dn.iter().zip(&n).map(|(a, ni)| (a - ni * m) / r).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub norm1: Matrix,
    pub wq: LoraLinear,
    pub wk: LoraLinear,
    pub wv: LoraLinear,
    pub wo: LoraLinear,
    pub norm2: Matrix,
    pub ff1: LoraLinear,
    pub ff2: LoraLinear,
    pub norms_frozen: bool,
}

impl Block {
    fn new(cfg: &TransformerConfig, rng: &mut Stream) -> Self {
        let d = cfg.d_model;
        let mut ones = Matrix::zeros(1, d);
        ones.fill(1.0);
        Self {
            norm1: ones.clone(),
            wq: LoraLinear::new(d, d, false, rng),
            wk: LoraLinear::new(d, d, false, rng),
            wv: LoraLinear::new(d, d, false, rng),
            wo: LoraLinear::new(d, d, false, rng),
            norm2: ones,
            ff1: LoraLinear::new(d, cfg.d_ff, true, rng),
            ff2: LoraLinear::new(cfg.d_ff, d, true, rng),
            norms_frozen: false,
        }
    }

    pub fn linears_mut(&mut self) -> [&mut LoraLinear; 6] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo, &mut self.ff1, &mut self.ff2]
    }
}

impl Parameters for Block {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let f = self.norms_frozen;
        let mut v = vec![ParamRef::new("norm1", &self.norm1, f), ParamRef::new("norm2", &self.norm2, f)];
        v.extend(self.wq.params_prefixed("wq"));
        v.extend(self.wk.params_prefixed("wk"));
        v.extend(self.wv.params_prefixed("wv"));
        v.extend(self.wo.params_prefixed("wo"));
        v.extend(self.ff1.params_prefixed("ff1"));
        v.extend(self.ff2.params_prefixed("ff2"));
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let f = self.norms_frozen;
        let mut v = vec![ParamMut::new("norm1", &mut self.norm1, f), ParamMut::new("norm2", &mut self.norm2, f)];
        v.extend(self.wq.params_mut_prefixed("wq"));
        v.extend(self.wk.params_mut_prefixed("wk"));
        v.extend(self.wv.params_mut_prefixed("wv"));
        v.extend(self.wo.params_mut_prefixed("wo"));
        v.extend(self.ff1.params_mut_prefixed("ff1"));
        v.extend(self.ff2.params_mut_prefixed("ff2"));
        v
    }
}

/// Keys and values of already-processed positions, per layer.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    pub keys: Vec<Vec<Vec<f64>>>,
    pub values: Vec<Vec<Vec<f64>>>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
struct RowCache {
    x_in: Vec<f64>,
    r1: f64,
    q: LoraCache,
    k: LoraCache,
    v: LoraCache,
    o: LoraCache,
    x_mid: Vec<f64>,
    r2: f64,
    f1: LoraCache,
    pre_act: Vec<f64>,
    f2: LoraCache,
}

#[derive(Clone, Debug)]
struct BlockCache {
    rows: Vec<RowCache>,
    qs: Vec<Vec<f64>>,
    ks: Vec<Vec<f64>>,
    vs: Vec<Vec<f64>>,
    /// probs[h][i] over keys 0..=i (causal) or all keys.
    probs: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug)]
pub struct TransformerCache {
    blocks: Vec<BlockCache>,
    final_in: Vec<Vec<f64>>,
    final_r: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub blocks: Vec<Block>,
    pub norm_f: Matrix,
    pub norm_f_frozen: bool,
}

impl Transformer {
    pub fn new(config: TransformerConfig, rng: &mut Stream) -> Self {
        assert!(config.d_model % config.n_heads == 0, "d_model must divide into heads");
        let blocks = (0..config.n_layers).map(|_| Block::new(&config, rng)).collect();
        let mut norm_f = Matrix::zeros(1, config.d_model);
        norm_f.fill(1.0);
        Self { config, blocks, norm_f, norm_f_frozen: false }
    }

    pub fn add_adapter(&mut self, name: &str, rank: usize, alpha: f64, rng: &mut Stream) -> Result<()> {
        for b in &mut self.blocks {
            for l in b.linears_mut() {
                let r = rank.min(l.d_in().min(l.d_out()));
                l.add_adapter(name, r, alpha, rng)?;
            }
        }
        Ok(())
    }

    pub fn adapter_index(&self, name: &str) -> Result<usize> {
        self.blocks[0].wq.adapter_index(name)
    }

    pub fn adapter_count(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.wq.adapters().len())
    }

    pub fn freeze_base(&mut self) {
        self.norm_f_frozen = true;
        for b in &mut self.blocks {
            b.norms_frozen = true;
            for l in b.linears_mut() {
                l.freeze_base();
            }
        }
    }

    pub fn set_adapter_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        for b in &mut self.blocks {
            for l in b.linears_mut() {
                l.set_adapter_frozen(name, frozen)?;
            }
        }
        Ok(())
    }

    /// Runs the stack over `x` (one row per new position). New rows attend to
    /// the cached positions of the `past` segments, in order, as a prefix. Returns final
    /// normalised rows, a backward cache, and the keys/values of the new
    /// rows.
    pub fn forward(
        &self,
        x: &[Vec<f64>],
        mixes: &[Vec<(usize, f64)>],
        past: &[&KvCache],
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> (Vec<Vec<f64>>, TransformerCache, KvCache) {
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let n_past: usize = past.iter().map(|c| c.len()).sum();
        let mut h: Vec<Vec<f64>> = x.to_vec();
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut new_kv = KvCache::default();
        for (li, blk) in self.blocks.iter().enumerate() {
            let t = h.len();
            let mut qs = Vec::with_capacity(t);
            let mut ks = Vec::with_capacity(t);
            let mut vs = Vec::with_capacity(t);
            let mut partial = Vec::with_capacity(t);
            for (row, mix) in h.iter().zip(mixes) {
                let (hn, r1) = rms_forward(row, blk.norm1.as_slice());
                let (q, qc) = blk.wq.forward_mix(&hn, mix, dropout.as_deref_mut());
                let (k, kc) = blk.wk.forward_mix(&hn, mix, dropout.as_deref_mut());
                let (v, vc) = blk.wv.forward_mix(&hn, mix, dropout.as_deref_mut());
                qs.push(q);
                ks.push(k);
                vs.push(v);
                partial.push((r1, qc, kc, vc));
            }
            let pk: Vec<&[f64]> = past.iter().flat_map(|c| c.keys.get(li).into_iter().flatten().map(Vec::as_slice)).collect();
            let pv: Vec<&[f64]> = past.iter().flat_map(|c| c.values.get(li).into_iter().flatten().map(Vec::as_slice)).collect();
            let mut probs = vec![Vec::with_capacity(t); cfg.n_heads];
            let mut att = vec![vec![0.0; cfg.d_model]; t];
            for hd in 0..cfg.n_heads {
                let sl = hd * dh..(hd + 1) * dh;
                for i in 0..t {
                    let visible = if cfg.causal { n_past + i + 1 } else { n_past + t };
                    let q = &qs[i][sl.clone()];
                    let key = |j: usize| if j < n_past { &pk[j][sl.clone()] } else { &ks[j - n_past][sl.clone()] };
                    let val = |j: usize| if j < n_past { &pv[j][sl.clone()] } else { &vs[j - n_past][sl.clone()] };
                    let mut s: Vec<f64> = (0..visible).map(|j| scale * dot(q, key(j))).collect();
                    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for v in s.iter_mut() {
                        *v = (*v - max).exp();
                        z += *v;
                    }
                    s.iter_mut().for_each(|v| *v /= z);
                    let out = &mut att[i][sl.clone()];
                    for (j, &p) in s.iter().enumerate() {
                        axpy(p, val(j), out);
                    }
                    probs[hd].push(s);
                }
            }
            let mut rows = Vec::with_capacity(t);
            let mut next = Vec::with_capacity(t);
            for (i, ((r1, qc, kc, vc), mix)) in partial.into_iter().zip(mixes).enumerate() {
                let (o, oc) = blk.wo.forward_mix(&att[i], mix, dropout.as_deref_mut());
                let x_mid: Vec<f64> = h[i].iter().zip(&o).map(|(a, b)| a + b).collect();
                let (hn2, r2) = rms_forward(&x_mid, blk.norm2.as_slice());
                let (pre, f1c) = blk.ff1.forward_mix(&hn2, mix, dropout.as_deref_mut());
                let act: Vec<f64> = pre.iter().map(|&v| silu(v)).collect();
                let (f, f2c) = blk.ff2.forward_mix(&act, mix, dropout.as_deref_mut());
                next.push(x_mid.iter().zip(&f).map(|(a, b)| a + b).collect::<Vec<f64>>());
                rows.push(RowCache {
                    x_in: std::mem::take(&mut h[i]),
                    r1,
                    q: qc,
                    k: kc,
                    v: vc,
                    o: oc,
                    x_mid,
                    r2,
                    f1: f1c,
                    pre_act: pre,
                    f2: f2c,
                });
            }
            new_kv.keys.push(ks.clone());
            new_kv.values.push(vs.clone());
            caches.push(BlockCache { rows, qs, ks, vs, probs });
            h = next;
        }
        let mut out = Vec::with_capacity(h.len());
        let mut final_r = Vec::with_capacity(h.len());
        for row in &h {
            let (y, r) = rms_forward(row, self.norm_f.as_slice());
            out.push(y);
            final_r.push(r);
        }
        (out, TransformerCache { blocks: caches, final_in: h, final_r }, new_kv)
    }

    /// Backward through a full (past-free) forward. Returns the input
    /// gradient rows and, per row, the gradient of every adapter's mix
    /// weight (indexed by adapter index).
    pub fn backward(
        &self,
        cache: &TransformerCache,
        dout: &[Vec<f64>],
        grads: &mut Transformer,
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let n_ad = self.adapter_count();
        let t = dout.len();
        let mut dmix = vec![vec![0.0; n_ad]; t];
        let mut dh_rows: Vec<Vec<f64>> = Vec::with_capacity(t);
        {
            let mut dg = vec![0.0; cfg.d_model];
            for i in 0..t {
                dh_rows.push(rms_backward(&cache.final_in[i], cache.final_r[i], self.norm_f.as_slice(), &dout[i], &mut dg));
            }
            if !self.norm_f_frozen {
                axpy(1.0, &dg, grads.norm_f.as_mut_slice());
            }
        }
        for (bi, blk) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[bi];
            let g = &mut grads.blocks[bi];
            let mut dnorm1 = vec![0.0; cfg.d_model];
            let mut dnorm2 = vec![0.0; cfg.d_model];
            let mut d_att = vec![vec![0.0; cfg.d_model]; t];
            let mut d_mid_rows = Vec::with_capacity(t);
            // feed-forward and output projection, row by row
            for i in 0..t {
                let rc = &bc.rows[i];
                let dy = &dh_rows[i];
                let mut dact = vec![0.0; cfg.d_ff];
                blk.ff2.backward(&rc.f2, dy, &mut g.ff2, &mut dact, Some(&mut dmix[i]));
                for (d, &p) in dact.iter_mut().zip(&rc.pre_act) {
                    *d *= silu_grad(p);
                }
                let mut dhn2 = vec![0.0; cfg.d_model];
                blk.ff1.backward(&rc.f1, &dact, &mut g.ff1, &mut dhn2, Some(&mut dmix[i]));
                let dxm = rms_backward(&rc.x_mid, rc.r2, blk.norm2.as_slice(), &dhn2, &mut dnorm2);
                let d_mid: Vec<f64> = dy.iter().zip(&dxm).map(|(a, b)| a + b).collect();
                blk.wo.backward(&rc.o, &d_mid, &mut g.wo, &mut d_att[i], Some(&mut dmix[i]));
                d_mid_rows.push(d_mid);
            }
            // attention
            let mut dq = vec![vec![0.0; cfg.d_model]; t];
            let mut dk = vec![vec![0.0; cfg.d_model]; t];
            let mut dv = vec![vec![0.0; cfg.d_model]; t];
            for hd in 0..cfg.n_heads {
                let sl = hd * dh..(hd + 1) * dh;
                for i in 0..t {
                    let p = &bc.probs[hd][i];
                    let dout_h = &d_att[i][sl.clone()];
                    let dp: Vec<f64> = (0..p.len()).map(|j| dot(dout_h, &bc.vs[j][sl.clone()])).collect();
                    let inner = dot(&dp, p);
                    for j in 0..p.len() {
                        axpy(p[j], dout_h, &mut dv[j][sl.clone()]);
                        let ds = p[j] * (dp[j] - inner) * scale;
                        if ds != 0.0 {
                            axpy(ds, &bc.ks[j][sl.clone()], &mut dq[i][sl.clone()]);
                            axpy(ds, &bc.qs[i][sl.clone()], &mut dk[j][sl.clone()]);
                        }
                    }
                }
            }
            let mut next = Vec::with_capacity(t);
            for i in 0..t {
                let rc = &bc.rows[i];
                let mut dhn = vec![0.0; cfg.d_model];
                blk.wq.backward(&rc.q, &dq[i], &mut g.wq, &mut dhn, Some(&mut dmix[i]));
                blk.wk.backward(&rc.k, &dk[i], &mut g.wk, &mut dhn, Some(&mut dmix[i]));
                blk.wv.backward(&rc.v, &dv[i], &mut g.wv, &mut dhn, Some(&mut dmix[i]));
                let dxin = rms_backward(&rc.x_in, rc.r1, blk.norm1.as_slice(), &dhn, &mut dnorm1);
                next.push(d_mid_rows[i].iter().zip(&dxin).map(|(a, b)| a + b).collect());
            }
            if !blk.norms_frozen {
                axpy(1.0, &dnorm1, g.norm1.as_mut_slice());
                axpy(1.0, &dnorm2, g.norm2.as_mut_slice());
            }
            dh_rows = next;
        }
        (dh_rows, dmix)
    }
}

impl Parameters for Transformer {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut v = vec![ParamRef::new("norm_f", &self.norm_f, self.norm_f_frozen)];
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(b.params_prefixed(&format!("block{i}")));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let f = self.norm_f_frozen;
        let mut v = vec![ParamMut::new("norm_f", &mut self.norm_f, f)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(b.params_mut_prefixed(&format!("block{i}")));
        }
        v
    }
}

/// Convenience: the same mix for every one of `t` rows.
pub fn uniform_mixes(mix: &Mix, t: usize) -> Vec<Vec<(usize, f64)>> {
    vec![mix.to_vec(); t]
}
