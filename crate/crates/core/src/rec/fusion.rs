//! User-level fusion of universal and specific predictions.

use serde::{Deserialize, Serialize};

use super::model::ModelScorer;
use super::vocab::Token;
use crate::adapt::{RouterConfig, Sample, VibRouter};
use crate::decode::{path_step_probs, PrefixTree};
use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, Parameters, RngSeed};
use crate::par::Exec;

const CHUNKS: usize = 8;
const PROB_FLOOR: f64 = 1e-300;

/// `(1 − γ)·P_uni + γ·P_spec`, exact at both endpoints.
pub fn fuse_predictions(p_uni: &[f64], p_spec: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Domain(format!("fusion weight {gamma} outside [0, 1]")));
    }
    if p_uni.len() != p_spec.len() {
        return Err(Error::Shape(format!("distributions of length {} and {}", p_uni.len(), p_spec.len())));
    }
    if gamma == 0.0 {
        return Ok(p_uni.to_vec());
    }
    if gamma == 1.0 {
        return Ok(p_spec.to_vec());
    }
    Ok(p_uni.iter().zip(p_spec).map(|(u, s)| (1.0 - gamma) * u + gamma * s).collect())
}

/// γ for a query from the universal model's final context state.
pub fn user_route(router: &VibRouter, hidden: &[f64], sample: Sample<'_>) -> f64 {
    router.alpha(hidden, sample)
}

/// One held-out target: the router input and both models' per-step
/// probabilities of the target's tokens under the prefix-tree mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterCase {
    pub hidden: Vec<f64>,
    pub p_uni: Vec<f64>,
    pub p_spec: Vec<f64>,
}

pub fn router_case(uni: &ModelScorer<'_>, spec: &ModelScorer<'_>, tree: &PrefixTree, path: &[Token]) -> Result<RouterCase> {
    Ok(RouterCase { hidden: uni.hidden.clone(), p_uni: path_step_probs(uni, tree, path)?, p_spec: path_step_probs(spec, tree, path)? })
}

/// Fused negative log-likelihood of a case and its derivative in γ.
pub fn case_nll(case: &RouterCase, gamma: f64) -> (f64, f64) {
    let (mut loss, mut grad) = (0.0, 0.0);
    for (&u, &s) in case.p_uni.iter().zip(&case.p_spec) {
        let q = ((1.0 - gamma) * u + gamma * s).max(PROB_FLOOR);
        loss -= q.ln();
        grad -= (s - u) / q;
    }
    (loss, grad)
}

/// Mean eval-mode fused negative log-likelihood.
pub fn router_nll(router: &VibRouter, cases: &[RouterCase]) -> f64 {
    if cases.is_empty() {
        return 0.0;
    }
    cases.iter().map(|c| case_nll(c, user_route(router, &c.hidden, Sample::Eval)).0).sum::<f64>() / cases.len() as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UserRouterLog {
    pub initial: f64,
    /// Mean training objective (likelihood part, then KL) per epoch.
    pub epochs: Vec<(f64, f64)>,
    pub last: f64,
}

/// Trains the user router on held-out cases; only router parameters move.
pub fn train_user_router(cases: &[RouterCase], d_in: usize, cfg: &RouterConfig, seed: u64, exec: Exec) -> Result<(VibRouter, UserRouterLog)> {
    if cases.is_empty() {
        return Err(Error::Input("no validation cases for the user router".into()));
    }
    if let Some(c) = cases.iter().find(|c| c.hidden.len() != d_in || c.p_uni.len() != c.p_spec.len()) {
        return Err(Error::Shape(format!("router case with input {} and {}/{} steps", c.hidden.len(), c.p_uni.len(), c.p_spec.len())));
    }
    let root = RngSeed::new(seed, "user-router");
    let mut router = VibRouter::new(d_in, cfg.hidden, cfg.d_r, &mut root.child("init").stream());
    let mut log = UserRouterLog { initial: router_nll(&router, cases), ..Default::default() };
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.lr));
    let mut rng = root.child("train").stream();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..cases.len()).collect();
        rng.shuffle(&mut order);
        let (mut nll, mut kl) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch.max(1)) {
            let noise: Vec<Vec<f64>> = batch.iter().map(|_| rng.normal_vec(cfg.d_r, 1.0)).collect();
            let scale = 1.0 / batch.len() as f64;
            let zero = router.zeroed();
            let r = &router;
            let parts = exec.map_chunks(batch.len(), CHUNKS, |range| {
                let mut g = zero.clone();
                let (mut l, mut k) = (0.0, 0.0);
                for j in range {
                    let case = &cases[batch[j]];
                    let c = r.forward(&case.hidden, Sample::Noise(&noise[j]));
                    let (loss, dgamma) = case_nll(case, c.alpha);
                    r.backward(&c, scale * dgamma, scale * cfg.vib_weight, &mut g);
                    l += loss;
                    k += c.kl;
                }
                (g, l, k)
            });
            let mut grads = zero;
            for (g, l, k) in parts {
                grads.add_assign_params(&g);
                nll += l;
                kl += k;
            }
            if !(nll.is_finite() && kl.is_finite()) {
                return Err(Error::Divergence { param: "user-router loss".into(), epoch: Some(epoch) });
            }
            opt.step(&mut router, &grads, &|_| true).map_err(|e| crate::adapt::with_epoch(e, epoch))?;
        }
        let n = cases.len() as f64;
        log::debug!("user router epoch {epoch}: nll {:.5} kl {:.5}", nll / n, kl / n);
        log.epochs.push((nll / n, kl / n));
    }
    router.freeze();
    log.last = router_nll(&router, cases);
    Ok((router, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::vib_kl;
    use crate::nn::gradcheck::{grad_check, GradCheckOptions};
    use proptest::prelude::*;

    #[test]
    fn fusion_examples() {
        let u = [0.5, 0.5];
        let s = [1.0, 0.0];
        assert_eq!(fuse_predictions(&u, &s, 0.0).unwrap(), u);
        assert_eq!(fuse_predictions(&u, &s, 1.0).unwrap(), s);
        assert_eq!(fuse_predictions(&u, &s, 0.5).unwrap(), vec![0.75, 0.25]);
        assert!(matches!(fuse_predictions(&u, &s, 1.5), Err(Error::Domain(_))));
        assert!(matches!(fuse_predictions(&u, &s, -0.1), Err(Error::Domain(_))));
        assert!(matches!(fuse_predictions(&u, &s, f64::NAN), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn fusion_is_a_distribution(a in proptest::collection::vec(0.0f64..1.0, 1..12), seed in 0u64..1000, gamma in 0.0f64..=1.0) {
            let mut rng = RngSeed::new(seed, "p").stream();
            let b: Vec<f64> = a.iter().map(|_| rng.uniform()).collect();
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum::<f64>() + 1e-12; v.iter().map(|x| (x + 1e-12 / v.len() as f64) / s).collect::<Vec<_>>() };
            let (pa, pb) = (norm(&a), norm(&b));
            let f = fuse_predictions(&pa, &pb, gamma).unwrap();
            prop_assert!(f.iter().all(|&x| x >= 0.0));
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn infinite_bias_pins_gamma() {
        let mut r = VibRouter::new(4, 8, 3, &mut RngSeed::new(1, "r").stream());
        let h = [0.3, -1.0, 2.0, 0.1];
        r.set_gate_bias(f64::NEG_INFINITY);
        assert_eq!(user_route(&r, &h, Sample::Eval), 0.0);
        r.set_gate_bias(f64::INFINITY);
        assert_eq!(user_route(&r, &h, Sample::Eval), 1.0);
        assert_eq!(vib_kl(&[1.0], &[0.0]), 0.5);
    }

    fn cases(n: usize, seed: u64, equal: bool) -> Vec<RouterCase> {
        let mut rng = RngSeed::new(seed, "cases").stream();
        (0..n)
            .map(|_| {
                let p_uni: Vec<f64> = (0..4).map(|_| rng.uniform_range(0.05, 1.0)).collect();
                let p_spec = if equal { p_uni.clone() } else { (0..4).map(|_| rng.uniform_range(0.05, 1.0)).collect() };
                RouterCase { hidden: rng.normal_vec(6, 1.0), p_uni, p_spec }
            })
            .collect()
    }

    #[test]
    fn objective_gradient() {
        let cs = cases(5, 2, false);
        let mut r = VibRouter::new(6, 8, 3, &mut RngSeed::new(2, "r").stream());
        crate::rec::model::tests::jitter(&mut r, 3, 0.3);
        let noise: Vec<Vec<f64>> = (0..cs.len()).map(|i| RngSeed::new(i as u64, "n").stream().normal_vec(3, 1.0)).collect();
        let w = 0.1;
        let loss = |p: &VibRouter| {
            cs.iter().zip(&noise).map(|(c, e)| {
                let fc = p.forward(&c.hidden, Sample::Noise(e));
                case_nll(c, fc.alpha).0 + w * fc.kl
            }).sum::<f64>()
        };
        let mut g = r.zeroed();
        for (c, e) in cs.iter().zip(&noise) {
            let fc = r.forward(&c.hidden, Sample::Noise(e));
            r.backward(&fc, case_nll(c, fc.alpha).1, w, &mut g);
        }
        let rep = grad_check(&r, &g, loss, GradCheckOptions::default()).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn equal_predictions_leave_likelihood_unchanged() {
        let cs = cases(40, 5, true);
        let cfg = RouterConfig { epochs: 5, lr: 1e-2, batch: 8, ..Default::default() };
        let (r, log) = train_user_router(&cs, 6, &cfg, 1, Exec::Sequential).unwrap();
        assert!((log.last - log.initial).abs() < 1e-9);
        assert!(r.frozen);
    }

    #[test]
    fn router_learns_to_prefer_better_model() {
        let mut cs = cases(60, 7, false);
        for c in &mut cs {
            c.p_spec = c.p_uni.iter().map(|p| (p * 1.5).min(1.0)).collect();
        }
        let cfg = RouterConfig { epochs: 30, lr: 1e-2, batch: 16, ..Default::default() };
        let (r, log) = train_user_router(&cs, 6, &cfg, 1, Exec::Sequential).unwrap();
        assert!(log.last < log.initial);
        assert!(cs.iter().all(|c| user_route(&r, &c.hidden, Sample::Eval) > 0.5));
    }
}
