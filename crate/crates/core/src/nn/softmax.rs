//! Softmax variants and cross-entropy with hand-derived gradients.

use crate::error::{Error, Result};

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Softmax restricted to `valid`; every other entry is exactly zero.
pub fn masked_softmax(logits: &[f64], valid: &[usize]) -> Result<Vec<f64>> {
    if valid.is_empty() {
        return Err(Error::ConstraintViolation("masked softmax over an empty valid set".into()));
    }
    if let Some(&bad) = valid.iter().find(|&&i| i >= logits.len()) {
        return Err(Error::ConstraintViolation(format!(
            "valid index {bad} out of range for {} logits",
            logits.len()
        )));
    }
    let max = valid.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; logits.len()];
    let mut s = 0.0;
    for &i in valid {
        let e = (logits[i] - max).exp();
        out[i] = e;
        s += e;
    }
    for &i in valid {
        out[i] /= s;
    }
    Ok(out)
}

/// `-ln p[target]` under the (optionally masked) softmax, and its gradient
/// with respect to the logits.
pub fn cross_entropy(logits: &[f64], target: usize, valid: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
    let p = match valid {
        Some(v) => {
            if !v.contains(&target) {
                return Err(Error::ConstraintViolation(format!("target {target} outside the valid set")));
            }
            masked_softmax(logits, v)?
        }
        None => softmax(logits),
    };
    let loss = match valid {
        Some(v) => {
            let max = v.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + v.iter().map(|&i| (logits[i] - max).exp()).sum::<f64>().ln();
            lse - logits[target]
        }
        None => -log_softmax(logits)[target],
    };
    let mut grad = p;
    grad[target] -= 1.0;
    Ok((loss, grad))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn ordinary_softmax_values() {
        let p = masked_softmax(&[1.0, 2.0, 3.0], &[0, 1, 2]).unwrap();
        assert!(close(&p, &[0.0900, 0.2447, 0.6652], 1e-4));
    }

    #[test]
    fn masked_values() {
        let p = masked_softmax(&[1.0, 2.0, 3.0], &[0, 2]).unwrap();
        let lo = 1.0 / (1.0 + 2f64.exp());
        assert!(close(&p, &[lo, 0.0, 1.0 - lo], 1e-12));
        assert!(close(&p, &[0.1192, 0.0, 0.8808], 1e-4));
        assert_eq!(p[1], 0.0);
    }

    #[test]
    fn singleton_is_one_hot() {
        let p = masked_softmax(&[5.0, -3.0, 100.0], &[1]).unwrap();
        assert_eq!(p, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn empty_valid_set_rejected() {
        assert!(matches!(masked_softmax(&[1.0], &[]), Err(Error::ConstraintViolation(_))));
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let (l, _) = cross_entropy(&[0.0; 4], 2, None).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        assert_eq!(sigmoid(f64::NEG_INFINITY), 0.0);
        assert_eq!(sigmoid(f64::INFINITY), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn masked_softmax_is_normalised_on_its_set(
            logits in proptest::collection::vec(-1e4f64..1e4, 1..40),
            pick in proptest::collection::vec(proptest::bool::ANY, 40),
        ) {
            let mut valid: Vec<usize> = (0..logits.len()).filter(|&i| pick[i]).collect();
            if valid.is_empty() {
                valid.push(0);
            }
            let p = masked_softmax(&logits, &valid).unwrap();
            let mass: f64 = valid.iter().map(|&i| p[i]).sum();
            proptest::prop_assert!((mass - 1.0).abs() < 1e-9);
            for (i, v) in p.iter().enumerate() {
                proptest::prop_assert!(*v >= 0.0);
                if !valid.contains(&i) {
                    proptest::prop_assert_eq!(*v, 0.0);
                }
            }
        }
    }
}
