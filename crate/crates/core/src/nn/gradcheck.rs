//! Central finite-difference gradient checking.

use super::params::Parameters;
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst component.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

#[derive(Clone, Copy)]
pub struct GradCheckOptions<'a> {
    pub epsilon: f64,
    /// Only parameters whose name passes are perturbed.
    pub filter: &'a dyn Fn(&str) -> bool,
    /// At most this many evenly spaced components per array.
    pub max_per_param: usize,
}

impl Default for GradCheckOptions<'_> {
    fn default() -> Self {
        Self { epsilon: DEFAULT_EPSILON, filter: &|_| true, max_per_param: usize::MAX }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Compares `analytic` against central differences of `loss` around
/// `params` and returns the maximum relative error.
pub fn grad_check<P, F>(params: &P, analytic: &P, loss: F, opts: GradCheckOptions<'_>) -> Result<GradCheckReport>
where
    P: Parameters + Clone,
    F: Fn(&P) -> f64,
{
    if !(opts.epsilon > 0.0 && opts.epsilon <= 1e-2) {
        return Err(Error::Config(format!("gradient-check epsilon {} outside (0, 1e-2]", opts.epsilon)));
    }
    let first = loss(params);
    let second = loss(params);
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }
    let grads: Vec<(String, Vec<f64>)> =
        analytic.params().into_iter().map(|p| (p.name, p.value.as_slice().to_vec())).collect();
    let mut work = params.clone();
    let names: Vec<(String, usize)> = params.params().iter().map(|p| (p.name.clone(), p.value.len())).collect();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for (pi, (name, len)) in names.iter().enumerate() {
        if !(opts.filter)(name) || *len == 0 {
            continue;
        }
        let stride = (len / opts.max_per_param.min(*len)).max(1);
        for idx in (0..*len).step_by(stride) {
            let orig = work.params()[pi].value.as_slice()[idx];
            set(&mut work, pi, idx, orig + opts.epsilon);
            let plus = loss(&work);
            set(&mut work, pi, idx, orig - opts.epsilon);
            let minus = loss(&work);
            set(&mut work, pi, idx, orig);
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let err = relative_error(grads[pi].1[idx], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

fn set<P: Parameters>(p: &mut P, pi: usize, idx: usize, v: f64) {
    p.params_mut()[pi].value.as_mut_slice()[idx] = v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax::cross_entropy;
    use crate::nn::Matrix;
    use std::cell::Cell;

    #[test]
    fn quadratic_is_exact() {
        let w = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        let g = Matrix::from_vec(1, 1, vec![6.0]).unwrap();
        let r = grad_check(&w, &g, |p: &Matrix| p.get(0, 0).powi(2), GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
    }

    #[test]
    fn masked_cross_entropy_on_five_logits() {
        let z = Matrix::from_vec(1, 5, vec![0.3, -1.2, 2.0, 0.7, -0.4]).unwrap();
        let valid = [0usize, 2, 3];
        let (_, g) = cross_entropy(z.as_slice(), 3, Some(&valid)).unwrap();
        let g = Matrix::from_vec(1, 5, g).unwrap();
        let r = grad_check(
            &z,
            &g,
            |p: &Matrix| cross_entropy(p.as_slice(), 3, Some(&valid)).unwrap().0,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        let w = Matrix::zeros(1, 1);
        let calls = Cell::new(0.0);
        let res = grad_check(
            &w,
            &w,
            |_: &Matrix| {
                calls.set(calls.get() + 1.0);
                calls.get()
            },
            GradCheckOptions::default(),
        );
        assert!(matches!(res, Err(Error::Determinism { .. })));
    }

    #[test]
    fn epsilon_range_enforced() {
        let w = Matrix::zeros(1, 1);
        let opts = GradCheckOptions { epsilon: 0.1, ..Default::default() };
        assert!(matches!(grad_check(&w, &w, |_: &Matrix| 0.0, opts), Err(Error::Config(_))));
    }
}
