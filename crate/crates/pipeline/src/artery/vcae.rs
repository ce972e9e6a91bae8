//! 3-D variational convolutional autoencoder over 5×40×40 patches.

use ffrmil_core::{Conv, Dense, Graph, PRelu, ParamSet, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{PATCH_DEPTH, PATCH_SIDE};
use crate::error::Result;
use crate::model::Autoencoder;

pub const LATENT: usize = 16;
pub const KL_WEIGHT: f64 = 0.1;
const BOTTLENECK: [usize; 4] = [32, 1, 5, 5];
const BOTTLENECK_LEN: usize = 32 * 25;
const PATCH_LEN: usize = PATCH_DEPTH * PATCH_SIDE * PATCH_SIDE;

#[derive(Debug, Clone, PartialEq)]
pub struct Vcae<T> {
    pub params: ParamSet<T>,
    enc: Vec<(Conv, PRelu)>,
    head: Dense,
    dec_fc: Dense,
    dec_fc_act: PRelu,
    dec: Vec<Conv>,
    dec_act: Vec<PRelu>,
    pub beta: f64,
}

impl<T: Scalar> Vcae<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let r = &mut rng;
        // the first stage spans all 5 slices, so depth collapses to 1
        let enc = vec![
            (
                Conv::conv3d(&mut p, "enc0", 1, 16, [PATCH_DEPTH, 3, 3], [1, 2, 2], [0, 1, 1], r),
                PRelu::new(&mut p, "enc0.act", 16),
            ),
            (
                Conv::conv3d(&mut p, "enc1", 16, 32, [1, 3, 3], [1, 2, 2], [0, 1, 1], r),
                PRelu::new(&mut p, "enc1.act", 32),
            ),
            (
                Conv::conv3d(&mut p, "enc2", 32, 32, [1, 3, 3], [1, 2, 2], [0, 1, 1], r),
                PRelu::new(&mut p, "enc2.act", 32),
            ),
        ];
        let head = Dense::new(&mut p, "head", BOTTLENECK_LEN, 2 * LATENT, r);
        let dec_fc = Dense::new(&mut p, "dec_fc", LATENT, BOTTLENECK_LEN, r);
        let dec_fc_act = PRelu::new(&mut p, "dec_fc.act", 32);
        let dec = vec![
            Conv::conv3d_transposed(&mut p, "dec0", 32, 32, [1, 4, 4], [1, 2, 2], [0, 1, 1], r),
            Conv::conv3d_transposed(&mut p, "dec1", 32, 16, [1, 4, 4], [1, 2, 2], [0, 1, 1], r),
            Conv::conv3d_transposed(&mut p, "dec2", 16, 1, [PATCH_DEPTH, 4, 4], [1, 2, 2], [0, 1, 1], r),
        ];
        let dec_act = vec![PRelu::new(&mut p, "dec0.act", 32), PRelu::new(&mut p, "dec1.act", 16)];
        Self {
            params: p,
            enc,
            head,
            dec_fc,
            dec_fc_act,
            dec,
            dec_act,
            beta: KL_WEIGHT,
        }
    }

    /// `x: [B, 1, 5, 40, 40]` → `(mu, logvar)`, each `[B, 16]`.
    pub fn encode_vars(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        let p = &self.params;
        let mut h = x;
        for (conv, act) in &self.enc {
            h = conv.forward(g, p, h)?;
            h = act.forward(g, p, h)?;
        }
        let b = g.value(h).shape()[0];
        let h = g.reshape(h, &[b, BOTTLENECK_LEN])?;
        let out = self.head.forward(g, p, h)?;
        let mu = g.slice_cols(out, 0, LATENT)?;
        let lv = g.slice_cols(out, LATENT, LATENT)?;
        let lv = g.clamp(lv, -10.0, 10.0);
        Ok((mu, lv))
    }

    /// `z: [B, 16]` → `[B, 1, 5, 40, 40]`.
    pub fn decode_vars(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let p = &self.params;
        let b = g.value(z).shape()[0];
        let h = self.dec_fc.forward(g, p, z)?;
        let mut shape = vec![b];
        shape.extend_from_slice(&BOTTLENECK);
        let mut h = g.reshape(h, &shape)?;
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

impl<T: Scalar> Autoencoder<T> for Vcae<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn sample_shape(&self) -> Vec<usize> {
        vec![1, PATCH_DEPTH, PATCH_SIDE, PATCH_SIDE]
    }

    /// Per-voxel MSE plus `beta` times the KL divergence per voxel.
    fn loss(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let b = g.value(x).shape()[0];
        let (mu, lv) = self.encode_vars(g, x)?;
        let half = g.scale(lv, 0.5);
        let sd = g.exp(half);
        let eps = g.randn(&[b, LATENT]);
        let noise = g.mul(sd, eps)?;
        let z = g.add(mu, noise)?;
        let r = self.decode_vars(g, z)?;
        let mse = g.mse(r, x)?;
        let kl = g.gaussian_kl(mu, lv)?;
        let kl = g.scale(kl, self.beta / (b * PATCH_LEN) as f64);
        Ok(g.add(mse, kl)?)
    }

    fn reconstruct(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (mu, _) = self.encode_vars(g, x)?;
        self.decode_vars(g, mu)
    }
}
