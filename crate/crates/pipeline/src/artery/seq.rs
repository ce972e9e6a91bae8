//! 1-D convolutional autoencoder compressing an 800-long latent trace to 64
//! codes.

use ffrmil_core::{Conv, Dense, Graph, PRelu, ParamSet, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::Autoencoder;
use crate::synth::MAX_LENGTH;

pub const CODES: usize = 64;
const CHANNELS: [usize; 5] = [1, 8, 16, 16, 16];
const BOTTLENECK_STEPS: usize = MAX_LENGTH / 16;
const BOTTLENECK_LEN: usize = 16 * BOTTLENECK_STEPS;

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceCae<T> {
    pub params: ParamSet<T>,
    enc: Vec<(Conv, PRelu)>,
    code: Dense,
    dec_fc: Dense,
    dec_fc_act: PRelu,
    dec: Vec<Conv>,
    dec_act: Vec<PRelu>,
}

impl<T: Scalar> SequenceCae<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut p = ParamSet::new();
        let enc = (0..4)
            .map(|i| {
                let (a, b) = (CHANNELS[i], CHANNELS[i + 1]);
                (
                    Conv::conv1d(&mut p, &format!("enc{i}"), a, b, 3, 2, 1, r),
                    PRelu::new(&mut p, &format!("enc{i}.act"), b),
                )
            })
            .collect();
        let code = Dense::new(&mut p, "code", BOTTLENECK_LEN, CODES, r);
        let dec_fc = Dense::new(&mut p, "dec_fc", CODES, BOTTLENECK_LEN, r);
        let dec_fc_act = PRelu::new(&mut p, "dec_fc.act", 16);
        let mut dec = Vec::new();
        let mut dec_act = Vec::new();
        for i in 0..4 {
            let (a, b) = (CHANNELS[4 - i], CHANNELS[3 - i]);
            dec.push(Conv::conv1d_transposed(&mut p, &format!("dec{i}"), a, b, 4, 2, 1, r));
            if i < 3 {
                dec_act.push(PRelu::new(&mut p, &format!("dec{i}.act"), b));
            }
        }
        Self {
            params: p,
            enc,
            code,
            dec_fc,
            dec_fc_act,
            dec,
            dec_act,
        }
    }

    /// `x: [B, 1, 800]` → `[B, 64]`.
    pub fn encode_vars(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let p = &self.params;
        let mut h = x;
        for (conv, act) in &self.enc {
            h = conv.forward(g, p, h)?;
            h = act.forward(g, p, h)?;
        }
        let b = g.value(h).shape()[0];
        let h = g.reshape(h, &[b, BOTTLENECK_LEN])?;
        Ok(self.code.forward(g, p, h)?)
    }

    pub fn decode_vars(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let p = &self.params;
        let b = g.value(z).shape()[0];
        let h = self.dec_fc.forward(g, p, z)?;
        let mut h = g.reshape(h, &[b, 16, BOTTLENECK_STEPS])?;
        h = self.dec_fc_act.forward(g, p, h)?;
        for (i, conv) in self.dec.iter().enumerate() {
            h = conv.forward(g, p, h)?;
            if let Some(act) = self.dec_act.get(i) {
                h = act.forward(g, p, h)?;
            }
        }
        Ok(h)
    }
}

impl<T: Scalar> Autoencoder<T> for SequenceCae<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn sample_shape(&self) -> Vec<usize> {
        vec![1, MAX_LENGTH]
    }

    fn loss(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let r = self.reconstruct(g, x)?;
        Ok(g.mse(r, x)?)
    }

    fn reconstruct(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let z = self.encode_vars(g, x)?;
        self.decode_vars(g, z)
    }
}
