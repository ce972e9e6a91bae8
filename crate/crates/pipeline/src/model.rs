//! Shared plumbing for the autoencoders: flat sample sets, f32 <-> tensor
//! conversion and a minibatch training loop.

use ffrmil_core::{Adam, Graph, NamedTensors, ParamSet, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

/// Equal-width samples stored back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    width: usize,
    data: Vec<f32>,
}

impl Samples {
    pub fn new(width: usize) -> Self {
        assert!(width > 0, "sample width must be positive");
        Self { width, data: Vec::new() }
    }

    pub fn from_flat(width: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || data.len() % width != 0 {
            return Err(invalid(format!("{} values do not split into samples of {width}", data.len())));
        }
        Ok(Self { width, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f32] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn push(&mut self, sample: &[f32]) {
        assert_eq!(sample.len(), self.width, "sample width");
        self.data.extend_from_slice(sample);
    }

    pub fn extend(&mut self, other: &Samples) {
        assert_eq!(other.width, self.width, "sample width");
        self.data.extend_from_slice(&other.data);
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    pub fn gather(&self, idx: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(idx.len() * self.width);
        for &i in idx {
            out.extend_from_slice(self.get(i));
        }
        out
    }

    /// Samples `lo..hi` as a new set.
    pub fn range(&self, lo: usize, hi: usize) -> Samples {
        Samples {
            width: self.width,
            data: self.data[lo * self.width..hi * self.width].to_vec(),
        }
    }
}

pub fn to_tensor<T: Scalar>(shape: &[usize], data: &[f32]) -> Tensor<T> {
    let v = data.iter().map(|&x| T::lit(x as f64)).collect();
    Tensor::new(shape.to_vec(), v).expect("shape matches data")
}

pub fn to_f32<T: Scalar>(t: &Tensor<T>) -> Vec<f32> {
    t.data().iter().map(|v| v.as_f64() as f32).collect()
}

/// A model trained by minimising a reconstruction objective.
pub trait Autoencoder<T: Scalar> {
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;
    /// Shape of one sample, without the batch axis.
    fn sample_shape(&self) -> Vec<usize>;
    /// Training objective for a batch `x`; may draw noise from the graph.
    fn loss(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;
    /// Deterministic reconstruction of a batch.
    fn reconstruct(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaeTrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for CaeTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            batch: 16,
            learning_rate: 1e-3,
            l2: 0.0,
            seed: 0,
        }
    }
}

fn batch_input<T: Scalar, M: Autoencoder<T>>(model: &M, g: &mut Graph<T>, data: &[f32], b: usize) -> Var {
    let mut shape = vec![b];
    shape.extend(model.sample_shape());
    g.input(to_tensor(&shape, data))
}

/// Minibatch Adam on randomly drawn samples. Returns the loss of every step.
pub fn train_autoencoder<T: Scalar, M: Autoencoder<T>>(
    model: &mut M,
    samples: &Samples,
    cfg: &CaeTrainConfig,
) -> Result<(Adam<T>, Vec<f64>)> {
    if samples.is_empty() {
        return Err(invalid("empty training corpus"));
    }
    if cfg.batch == 0 {
        return Err(invalid("batch must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params(), cfg.learning_rate, cfg.l2);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..samples.len())).collect();
        let mut g = Graph::with_seed(true, rng.gen());
        let x = batch_input(model, &mut g, &samples.gather(&idx), cfg.batch);
        let loss = model.loss(&mut g, x)?;
        losses.push(g.value(loss).data()[0].as_f64());
        let grads = g.backward(loss)?.dense(model.params());
        adam.update(model.params_mut(), &grads);
    }
    Ok((adam, losses))
}

/// Mean squared reconstruction error over all samples (inference mode).
pub fn reconstruction_mse<T: Scalar, M: Autoencoder<T>>(model: &M, samples: &Samples) -> Result<f64> {
    let mut total = 0.0;
    let chunk = 32;
    let mut i = 0;
    while i < samples.len() {
        let hi = (i + chunk).min(samples.len());
        let mut g = Graph::new();
        let data = &samples.as_flat()[i * samples.width()..hi * samples.width()];
        let x = batch_input(model, &mut g, data, hi - i);
        let r = model.reconstruct(&mut g, x)?;
        total += g
            .value(r)
            .data()
            .iter()
            .zip(data)
            .map(|(&a, &b)| (a.as_f64() - b as f64).powi(2))
            .sum::<f64>();
        i = hi;
    }
    Ok(total / samples.as_flat().len().max(1) as f64)
}

/// Objective value on a fixed batch with a fixed noise seed.
pub fn probe_loss<T: Scalar, M: Autoencoder<T>>(model: &M, samples: &Samples, seed: u64) -> Result<f64> {
    let mut g = Graph::with_seed(true, seed);
    let x = batch_input(model, &mut g, samples.as_flat(), samples.len());
    let loss = model.loss(&mut g, x)?;
    Ok(g.value(loss).data()[0].as_f64())
}

pub(crate) fn save_model<T: Scalar>(prefix: &str, params: &ParamSet<T>, adam: Option<&Adam<T>>, nt: &mut NamedTensors) {
    nt.push_params(&format!("{prefix}param/"), params);
    if let Some(adam) = adam {
        nt.push_adam(&format!("{prefix}adam/"), params, adam);
    }
}
