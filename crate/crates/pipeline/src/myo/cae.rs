//! Convolutional autoencoder over 16×16 in-plane myocardium patches.

use ffrmil_core::{Conv, Dense, Graph, PRelu, ParamSet, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PATCH_SIDE;
use crate::error::Result;
use crate::model::Autoencoder;

pub const MYO_LATENT: usize = 128;
const BOTTLENECK: [usize; 4] = [32, 1, 4, 4];
const BOTTLENECK_LEN: usize = 32 * 16;

#[derive(Debug, Clone, PartialEq)]
pub struct MyoCae<T> {
    pub params: ParamSet<T>,
    enc: Vec<(Conv, PRelu)>,
    code: Dense,
    dec_fc: Dense,
    dec_fc_act: PRelu,
    dec: Vec<Conv>,
    dec_act: PRelu,
}

impl<T: Scalar> MyoCae<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut p = ParamSet::new();
        let enc = vec![
            (
                Conv::conv3d(&mut p, "enc0", 1, 16, [1, 3, 3], [1, 2, 2], [0, 1, 1], r),
                PRelu::new(&mut p, "enc0.act", 16),
            ),
            (
                Conv::conv3d(&mut p, "enc1", 16, 32, [1, 3, 3], [1, 2, 2], [0, 1, 1], r),
                PRelu::new(&mut p, "enc1.act", 32),
            ),
        ];
        let code = Dense::new(&mut p, "code", BOTTLENECK_LEN, MYO_LATENT, r);
        let dec_fc = Dense::new(&mut p, "dec_fc", MYO_LATENT, BOTTLENECK_LEN, r);
        let dec_fc_act = PRelu::new(&mut p, "dec_fc.act", 32);
        let dec = vec![
            Conv::conv3d_transposed(&mut p, "dec0", 32, 16, [1, 4, 4], [1, 2, 2], [0, 1, 1], r),
            Conv::conv3d_transposed(&mut p, "dec1", 16, 1, [1, 4, 4], [1, 2, 2], [0, 1, 1], r),
        ];
        let dec_act = PRelu::new(&mut p, "dec0.act", 16);
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

    /// `x: [B, 1, 1, 16, 16]` → `[B, 128]`.
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
        let mut shape = vec![b];
        shape.extend_from_slice(&BOTTLENECK);
        let mut h = g.reshape(h, &shape)?;
        h = self.dec_fc_act.forward(g, p, h)?;
        h = self.dec[0].forward(g, p, h)?;
        h = self.dec_act.forward(g, p, h)?;
        Ok(self.dec[1].forward(g, p, h)?)
    }
}

impl<T: Scalar> Autoencoder<T> for MyoCae<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn sample_shape(&self) -> Vec<usize> {
        vec![1, 1, PATCH_SIDE, PATCH_SIDE]
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
