//! Named trainable parameters.

use rand::Rng;
use rand_distr::Uniform;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether the L2 penalty applies. Only weights decay; biases and PReLU
/// slopes do not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Slope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        self.entries.push(ParamEntry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform He initialisation, `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn add_weight<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.sample(dist))).collect();
        let value = Tensor::new(shape.to_vec(), data).expect("consistent");
        self.add(name, ParamKind::Weight, value)
    }

    pub fn add_bias(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.add(name, ParamKind::Bias, Tensor::zeros(&[len]))
    }

    pub fn add_slopes(&mut self, name: impl Into<String>, len: usize, init: f64) -> ParamId {
        self.add(name, ParamKind::Slope, Tensor::full(&[len], T::lit(init)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamEntry<T>)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Squared L2 norm over weight tensors only.
    pub fn weight_norm_sq(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.value.norm_sq().as_f64())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }
}
