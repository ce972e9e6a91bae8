//! Attention-based multiple-instance classifier.
//!
//! Each artery encoding passes through a shared three-layer network
//! (`fcn_art`), the myocardium descriptor through an independent one
//! (`fcn_myo`); every instance is an artery embedding concatenated with the
//! myocardium embedding. Instances are pooled with softmax attention
//! `a_n ∝ exp(wᵀ tanh(V h_n))` and a dense layer plus sigmoid gives the
//! patient probability.

use std::fmt;
use std::str::FromStr;

use ffrmil_core::{Adam, Dense, Graph, NamedTensors, PRelu, ParamId, ParamSet, Scalar, Tensor, TrainConfig, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::artery::ENCODING_LEN;
use crate::error::{invalid, Result};
use crate::model::to_tensor;
use crate::myo::FEATURE_LEN;

pub const EMBED: usize = 64;
pub const ATTENTION_HIDDEN: usize = 32;
const FCN_LAYERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Combined,
    Arteries,
    Myo,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Combined, Mode::Arteries, Mode::Myo];

    pub fn code(self) -> u64 {
        match self {
            Mode::Combined => 0,
            Mode::Arteries => 1,
            Mode::Myo => 2,
        }
    }

    pub fn from_code(c: u64) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == c)
    }

    pub fn uses_arteries(self) -> bool {
        self != Mode::Myo
    }

    pub fn uses_myo(self) -> bool {
        self != Mode::Arteries
    }

    /// Width of one instance embedding.
    pub fn instance_width(self) -> usize {
        match self {
            Mode::Combined => 2 * EMBED,
            _ => EMBED,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Mode::Combined => "Combined",
            Mode::Arteries => "Arteries only",
            Mode::Myo => "Myocardium only",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Combined => "combined",
            Mode::Arteries => "arteries",
            Mode::Myo => "myo",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "combined" => Ok(Mode::Combined),
            "arteries" | "arteries_only" => Ok(Mode::Arteries),
            "myo" | "myo_only" => Ok(Mode::Myo),
            _ => Err(format!("unknown mode `{s}` (expected combined, arteries or myo)")),
        }
    }
}

/// One patient: artery encodings, myocardium descriptor and label.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub arteries: Vec<Vec<f32>>,
    pub myo: Vec<f32>,
    pub label: bool,
}

impl Bag {
    pub fn validate(&self) -> Result<()> {
        if self.arteries.is_empty() {
            return Err(invalid("bag has no arteries"));
        }
        if let Some(a) = self.arteries.iter().find(|a| a.len() != ENCODING_LEN) {
            return Err(invalid(format!(
                "artery encoding has {} values, expected {ENCODING_LEN}",
                a.len()
            )));
        }
        if self.myo.len() != FEATURE_LEN {
            return Err(invalid(format!(
                "myocardium features have {} values, expected {FEATURE_LEN}",
                self.myo.len()
            )));
        }
        Ok(())
    }
}

/// Affine input normalisation fitted on training bags: per-feature
/// centring, then one shared scale so that the mean centred instance has
/// unit Euclidean norm. A shared scale keeps the relative feature variances
/// of the encoders and puts both input branches on a comparable footing.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
}

impl Standardizer {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Constant inputs (zero spread) get scale 0.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f32]> + Clone, n: usize) -> Self {
        let mut sum = vec![0.0f64; n];
        let mut count = 0usize;
        for r in rows.clone() {
            for (j, &v) in r.iter().enumerate() {
                sum[j] += v as f64;
            }
            count += 1;
        }
        let c = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / c).collect();
        let norm = rows
            .map(|r| r.iter().zip(&mean).map(|(&v, m)| (v as f64 - m).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / c;
        let scale = if norm > 1e-12 { (1.0 / norm) as f32 } else { 0.0 };
        Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            scale: vec![scale; n],
        }
    }

    pub fn apply(&self, x: &[f32], out: &mut Vec<f32>) {
        out.extend(x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s));
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Fcn {
    layers: Vec<(Dense, PRelu)>,
}

impl Fcn {
    fn new<T: Scalar, R: Rng>(p: &mut ParamSet<T>, name: &str, inputs: usize, rng: &mut R) -> Self {
        let layers = (0..FCN_LAYERS)
            .map(|i| {
                let n_in = if i == 0 { inputs } else { EMBED };
                (
                    Dense::new(p, &format!("{name}.{i}"), n_in, EMBED, rng),
                    PRelu::new(p, &format!("{name}.{i}.act"), EMBED),
                )
            })
            .collect();
        Self { layers }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamSet<T>, x: Var, dropout: f64) -> Result<Var> {
        let mut h = x;
        for (i, (dense, act)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.dropout(h, dropout)?;
            }
            h = dense.forward(g, p, h)?;
            h = act.forward(g, p, h)?;
        }
        Ok(h)
    }
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub instances: Var,
    pub weights: Var,
    pub embedding: Var,
    pub probability: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilModel<T> {
    pub mode: Mode,
    pub params: ParamSet<T>,
    fcn_art: Option<Fcn>,
    fcn_myo: Option<Fcn>,
    pub attention_v: ParamId,
    pub attention_w: ParamId,
    pub head: Dense,
    pub dropout: f64,
    pub art_norm: Standardizer,
    pub myo_norm: Standardizer,
}

impl<T: Scalar> MilModel<T> {
    pub fn new(mode: Mode, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let fcn_art = mode.uses_arteries().then(|| Fcn::new(&mut p, "fcn_art", ENCODING_LEN, &mut rng));
        let fcn_myo = mode.uses_myo().then(|| Fcn::new(&mut p, "fcn_myo", FEATURE_LEN, &mut rng));
        let d = mode.instance_width();
        let attention_v = p.add_weight("attention.v", &[ATTENTION_HIDDEN, d], d, &mut rng);
        let attention_w = p.add_weight("attention.w", &[1, ATTENTION_HIDDEN], ATTENTION_HIDDEN, &mut rng);
        let head = Dense::new(&mut p, "head", d, 1, &mut rng);
        Self {
            mode,
            params: p,
            fcn_art,
            fcn_myo,
            attention_v,
            attention_w,
            head,
            dropout: 0.5,
            art_norm: Standardizer::identity(ENCODING_LEN),
            myo_norm: Standardizer::identity(FEATURE_LEN),
        }
    }

    /// Fits input standardisation on the training bags.
    pub fn fit_standardizers(&mut self, bags: &[Bag]) {
        self.art_norm = Standardizer::fit(
            bags.iter().flat_map(|b| b.arteries.iter().map(Vec::as_slice)),
            ENCODING_LEN,
        );
        self.myo_norm = Standardizer::fit(bags.iter().map(|b| b.myo.as_slice()), FEATURE_LEN);
    }

    /// Instance embeddings `[N, width]` (N = 1 in myocardium-only mode).
    pub fn embed_instances(&self, g: &mut Graph<T>, bag: &Bag) -> Result<Var> {
        bag.validate()?;
        let p = &self.params;
        let art = match &self.fcn_art {
            Some(fcn) => {
                let n = bag.arteries.len();
                let mut x = Vec::with_capacity(n * ENCODING_LEN);
                for a in &bag.arteries {
                    self.art_norm.apply(a, &mut x);
                }
                let x = g.input(to_tensor(&[n, ENCODING_LEN], &x));
                Some(fcn.forward(g, p, x, self.dropout)?)
            }
            None => None,
        };
        let myo = match &self.fcn_myo {
            Some(fcn) => {
                let mut x = Vec::with_capacity(FEATURE_LEN);
                self.myo_norm.apply(&bag.myo, &mut x);
                let x = g.input(to_tensor(&[1, FEATURE_LEN], &x));
                Some(fcn.forward(g, p, x, self.dropout)?)
            }
            None => None,
        };
        Ok(match (art, myo) {
            (Some(a), Some(m)) => {
                let rows = g.value(a).shape()[0];
                let m = g.broadcast_rows(m, rows);
                g.concat_cols(a, m)?
            }
            (Some(a), None) => a,
            (None, Some(m)) => m,
            (None, None) => unreachable!("every mode uses at least one source"),
        })
    }

    /// Softmax attention over instance rows: `(embedding [D], weights [N])`.
    pub fn attention_pool(&self, g: &mut Graph<T>, instances: Var) -> Result<(Var, Var)> {
        let v = g.param(&self.params, self.attention_v);
        let w = g.param(&self.params, self.attention_w);
        let hidden = g.linear(instances, v, None)?;
        let hidden = g.tanh(hidden);
        let scores = g.linear(hidden, w, None)?;
        let n = g.value(scores).shape()[0];
        let scores = g.reshape(scores, &[n])?;
        let weights = g.softmax(scores)?;
        let embedding = g.weighted_sum(weights, instances)?;
        Ok((embedding, weights))
    }

    pub fn forward(&self, g: &mut Graph<T>, bag: &Bag) -> Result<Forward> {
        let instances = self.embed_instances(g, bag)?;
        let (embedding, weights) = self.attention_pool(g, instances)?;
        let logit = self.head.forward(g, &self.params, embedding)?;
        let probability = g.sigmoid(logit);
        Ok(Forward {
            instances,
            weights,
            embedding,
            probability,
        })
    }

    /// Patient probability, deterministic.
    pub fn predict(&self, bag: &Bag) -> Result<f64> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, bag)?;
        Ok(g.value(f.probability).data()[0].as_f64())
    }

    pub fn attention_weights(&self, bag: &Bag) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, bag)?;
        Ok(g.value(f.weights).data().iter().map(|v| v.as_f64()).collect())
    }

    /// BCE loss graph for one bag.
    pub fn loss(&self, g: &mut Graph<T>, bag: &Bag) -> Result<Var> {
        let f = self.forward(g, bag)?;
        let y = g.input(Tensor::from_vec(vec![if bag.label { T::one() } else { T::zero() }]));
        Ok(g.bce(f.probability, y)?)
    }

    pub fn to_named(&self, adam: Option<&Adam<T>>, iteration: u64) -> NamedTensors {
        let mut nt = NamedTensors::new();
        nt.push_u64("mode", vec![self.mode.code()]);
        nt.push_u64("iteration", vec![iteration]);
        nt.push_tensor("norm/art_mean", &Tensor::<f32>::from_vec(self.art_norm.mean.clone()));
        nt.push_tensor("norm/art_scale", &Tensor::<f32>::from_vec(self.art_norm.scale.clone()));
        nt.push_tensor("norm/myo_mean", &Tensor::<f32>::from_vec(self.myo_norm.mean.clone()));
        nt.push_tensor("norm/myo_scale", &Tensor::<f32>::from_vec(self.myo_norm.scale.clone()));
        nt.push_params("param/", &self.params);
        if let Some(adam) = adam {
            nt.push_adam("adam/", &self.params, adam);
        }
        nt
    }

    pub fn from_named(nt: &NamedTensors) -> Result<(Self, u64)> {
        let code = *nt.u64s("mode")?.first().ok_or_else(|| invalid("empty mode record"))?;
        let mode = Mode::from_code(code).ok_or_else(|| invalid(format!("unknown mode code {code}")))?;
        let iteration = *nt.u64s("iteration")?.first().ok_or_else(|| invalid("empty iteration record"))?;
        let mut m = Self::new(mode, 0);
        let get = |name: &str| -> Result<Vec<f32>> { Ok(nt.tensor::<f32>(name)?.into_data()) };
        m.art_norm = Standardizer {
            mean: get("norm/art_mean")?,
            scale: get("norm/art_scale")?,
        };
        m.myo_norm = Standardizer {
            mean: get("norm/myo_mean")?,
            scale: get("norm/myo_scale")?,
        };
        if m.art_norm.mean.len() != ENCODING_LEN || m.myo_norm.mean.len() != FEATURE_LEN {
            return Err(invalid("standardisation records have the wrong length"));
        }
        nt.load_params("param/", &mut m.params)?;
        Ok((m, iteration))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    /// Mean BCE over each checkpoint interval.
    pub interval_losses: Vec<f64>,
    pub checkpoints: usize,
}

/// Iterations after which a checkpoint is written.
pub fn checkpoint_iterations(cfg: &TrainConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    Ok((1..=cfg.checkpoint_count()).map(|i| i * cfg.checkpoint_interval).collect())
}

/// One Adam step per bag visit, bags reshuffled every epoch; `sink` receives
/// the model after every `checkpoint_interval` iterations.
pub fn train_mil<T, F>(model: &mut MilModel<T>, bags: &[Bag], cfg: &TrainConfig, mut sink: F) -> Result<TrainSummary>
where
    T: Scalar,
    F: FnMut(usize, &MilModel<T>, &Adam<T>) -> Result<()>,
{
    cfg.validate()?;
    if bags.is_empty() {
        return Err(invalid("empty training set"));
    }
    for b in bags {
        b.validate()?;
    }
    model.dropout = cfg.dropout;
    let mut adam = Adam::from_config(&model.params, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut cursor = order.len();
    let mut acc = 0.0;
    let mut summary = TrainSummary {
        interval_losses: Vec::new(),
        checkpoints: 0,
    };
    for it in 1..=cfg.iterations {
        if cursor == order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let bag = &bags[order[cursor]];
        cursor += 1;
        let mut g = Graph::with_seed(true, rng.gen());
        let loss = model.loss(&mut g, bag)?;
        acc += g.value(loss).data()[0].as_f64();
        let grads = g.backward(loss)?.dense(&model.params);
        adam.update(&mut model.params, &grads);
        if it % cfg.checkpoint_interval == 0 {
            summary.interval_losses.push(acc / cfg.checkpoint_interval as f64);
            acc = 0.0;
            summary.checkpoints += 1;
            sink(it, model, &adam)?;
        }
    }
    Ok(summary)
}

/// Training that keeps every checkpoint in memory.
pub fn train_mil_in_memory<T: Scalar>(
    model: &mut MilModel<T>,
    bags: &[Bag],
    cfg: &TrainConfig,
) -> Result<(Vec<MilModel<T>>, TrainSummary)> {
    let mut out = Vec::new();
    let summary = train_mil(model, bags, cfg, |_, m, _| {
        out.push(m.clone());
        Ok(())
    })?;
    Ok((out, summary))
}
