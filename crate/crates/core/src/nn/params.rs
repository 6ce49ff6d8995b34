use sha2::{Digest, Sha256};

use super::Matrix;

pub struct ParamRef<'a> {
    pub name: String,
    pub value: &'a Matrix,
    pub frozen: bool,
    /// Set on the `A` array of a low-rank adapter.
    pub lora: Option<LoraMeta>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraMeta {
    pub rank: usize,
    pub alpha: f64,
    pub scale: f64,
}

impl<'a> ParamRef<'a> {
    pub fn new(name: impl Into<String>, value: &'a Matrix, frozen: bool) -> Self {
        Self { name: name.into(), value, frozen, lora: None }
    }
}

impl<'a> ParamMut<'a> {
    pub fn new(name: impl Into<String>, value: &'a mut Matrix, frozen: bool) -> Self {
        Self { name: name.into(), value, frozen }
    }
}

pub struct ParamMut<'a> {
    pub name: String,
    pub value: &'a mut Matrix,
    pub frozen: bool,
}

/// A named collection of trainable arrays.
///
/// Gradients are represented by a value of the same type with every array
/// zeroed, so models and their gradients can be walked in lockstep.
pub trait Parameters {
    fn params(&self) -> Vec<ParamRef<'_>>;
    fn params_mut(&mut self) -> Vec<ParamMut<'_>>;

    fn params_prefixed(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        self.params()
            .into_iter()
            .map(|p| ParamRef { name: format!("{prefix}.{}", p.name), ..p })
            .collect()
    }

    fn params_mut_prefixed(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        self.params_mut()
            .into_iter()
            .map(|p| ParamMut { name: format!("{prefix}.{}", p.name), ..p })
            .collect()
    }

    fn zeroed(&self) -> Self
    where
        Self: Clone,
    {
        let mut g = self.clone();
        for p in g.params_mut() {
            p.value.fill(0.0);
        }
        g
    }

    fn add_assign_params(&mut self, other: &Self) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            debug_assert_eq!(a.name, b.name);
            a.value.add_assign(b.value);
        }
    }

    fn scale_params(&mut self, s: f64) {
        for p in self.params_mut() {
            p.value.scale(s);
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values of every array
    /// whose name satisfies `filter`.
    fn param_hash(&self, filter: &dyn Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            if !filter(&p.name) {
                continue;
            }
            h.update(p.name.as_bytes());
            h.update((p.value.rows() as u64).to_le_bytes());
            h.update((p.value.cols() as u64).to_le_bytes());
            for v in p.value.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Sums a sequence of gradient values in order.
pub fn sum_grads<P: Parameters + Clone>(zero: &P, parts: impl IntoIterator<Item = P>) -> P {
    let mut acc = zero.clone();
    for p in parts {
        acc.add_assign_params(&p);
    }
    acc
}

impl Parameters for Matrix {
    fn params(&self) -> Vec<ParamRef<'_>> {
        vec![ParamRef::new("value", self, false)]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        vec![ParamMut::new("value", self, false)]
    }
}
