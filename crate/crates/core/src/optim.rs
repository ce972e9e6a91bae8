//! Training configuration and the adaptive-moment optimiser.

use crate::error::{CoreError, Result};
use crate::params::{ParamKind, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// L2 coefficient γ applied to weight tensors.
    pub l2: f64,
    pub dropout: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub checkpoint_interval: usize,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            dropout: 0.5,
            learning_rate: 1e-4,
            iterations: 20_000,
            checkpoint_interval: 1_000,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if !(self.l2 >= 0.0) {
            return bad(format!("l2 must be >= 0, got {}", self.l2));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if self.checkpoint_interval == 0 || self.iterations % self.checkpoint_interval != 0 {
            return bad(format!(
                "checkpoint_interval {} does not divide iterations {}",
                self.checkpoint_interval, self.iterations
            ));
        }
        Ok(())
    }

    pub fn checkpoint_count(&self) -> usize {
        self.iterations / self.checkpoint_interval
    }
}

/// Adam with L2: `γ·w` is added to the gradient of every weight tensor
/// before the moment updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, learning_rate: f64, l2: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .iter()
            .map(|(_, e)| Tensor::zeros(e.value.shape()))
            .collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_config(params: &ParamSet<T>, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.learning_rate, cfg.l2)
    }

    /// One update from gradients ordered like `params`.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let one = T::one();
        let bc1 = T::lit(1.0 - self.beta1.powi(t));
        let bc2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.learning_rate);
        let eps = T::lit(self.eps);
        let l2 = T::lit(self.l2);
        for ((id, entry), g) in params.iter_mut().zip(grads) {
            let decay = entry.kind == ParamKind::Weight && self.l2 > 0.0;
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            for (((w, &gi), mi), vi) in entry
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = if decay { gi + l2 * *w } else { gi };
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.add("w", ParamKind::Weight, Tensor::from_vec(vec![w]));
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = single(0.7);
        let mut adam = Adam::new(&p, 1e-2, 0.0);
        for _ in 0..10 {
            adam.update(&mut p, &[Tensor::from_vec(vec![0.0])]);
        }
        assert_eq!(p.value(p.find("w").unwrap()).data(), &[0.7]);
    }

    #[test]
    fn decay_only_shrinks_monotonically() {
        let mut p = single(1.0);
        let mut adam = Adam::new(&p, 1e-2, 1e-3);
        let mut prev = 1.0;
        for _ in 0..50 {
            adam.update(&mut p, &[Tensor::from_vec(vec![0.0])]);
            let w = p.value(p.find("w").unwrap()).data()[0];
            assert!(w < prev && w > 0.0);
            prev = w;
        }
    }

    #[test]
    fn bias_does_not_decay() {
        let mut p = ParamSet::<f64>::new();
        p.add("b", ParamKind::Bias, Tensor::from_vec(vec![1.0]));
        let mut adam = Adam::new(&p, 1e-2, 1.0);
        adam.update(&mut p, &[Tensor::from_vec(vec![0.0])]);
        assert_eq!(p.value(p.find("b").unwrap()).data(), &[1.0]);
    }

    #[test]
    fn converges_to_quadratic_minimum() {
        // minimise (w - 3)^2, gradient 2(w - 3)
        let mut p = single(0.0);
        let id = p.find("w").unwrap();
        let mut adam = Adam::new(&p, 1e-2, 0.0);
        for _ in 0..5000 {
            let w = p.value(id).data()[0];
            adam.update(&mut p, &[Tensor::from_vec(vec![2.0 * (w - 3.0)])]);
        }
        let w = p.value(id).data()[0];
        assert!((w - 3.0).abs() <= 1e-3, "w = {w}");
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.checkpoint_count(), 20);
        c.iterations = 200_000;
        assert_eq!(c.checkpoint_count(), 200);
        c.checkpoint_interval = 999;
        assert!(c.validate().is_err());
        c.checkpoint_interval = 1000;
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        c.dropout = 0.5;
        c.l2 = -1.0;
        assert!(c.validate().is_err());
    }
}
