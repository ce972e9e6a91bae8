//! Artery encoder: every centerline point's 5×40×40 neighbourhood is
//! compressed to 16 latents by a [`Vcae`], and each of the 16 latent traces
//! is compressed to 64 codes by a shared [`SequenceCae`], giving 1024 values
//! per artery whatever its length.

mod seq;
mod vcae;

pub use seq::{SequenceCae, CODES};
pub use vcae::{Vcae, KL_WEIGHT, LATENT};

use std::path::Path;

use ffrmil_core::{Adam, Graph, NamedTensors, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::io::Volume;
use crate::model::{reconstruction_mse, save_model, to_f32, to_tensor, train_autoencoder, CaeTrainConfig, Samples};
use crate::synth::MAX_LENGTH;

pub const PATCH_SIDE: usize = 40;
pub const PATCH_DEPTH: usize = 5;
pub const PATCH_LEN: usize = PATCH_DEPTH * PATCH_SIDE * PATCH_SIDE;
pub const ENCODING_LEN: usize = LATENT * CODES;
/// Voxel values are divided by this before entering the networks.
pub const INTENSITY_SCALE: f32 = 400.0;

const ENCODE_BATCH: usize = 64;

/// One zero-padded 5×40×40 patch per centerline point, proximal first.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub patches: Samples,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        self.patches.get(i)
    }
}

fn check_mpr(mpr: &Volume) -> Result<(usize, usize, usize)> {
    match mpr.extents.as_slice() {
        &[l, h, w] if h >= PATCH_SIDE && w >= PATCH_SIDE && l > 0 => Ok((l, h, w)),
        e => Err(invalid(format!(
            "MPR volume must be [L, >=40, >=40] with L > 0, got {e:?}"
        ))),
    }
}

/// Writes patch `i` of `mpr` (scaled) into `out`; slices beyond either end
/// stay zero.
fn fill_patch(mpr: &Volume, dims: (usize, usize, usize), i: usize, out: &mut [f32]) {
    let (l, h, w) = dims;
    let (oy, ox) = ((h - PATCH_SIDE) / 2, (w - PATCH_SIDE) / 2);
    out.fill(0.0);
    let half = PATCH_DEPTH / 2;
    for d in 0..PATCH_DEPTH {
        let z = i as isize + d as isize - half as isize;
        if z < 0 || z >= l as isize {
            continue;
        }
        for y in 0..PATCH_SIDE {
            let src = mpr.idx3(z as usize, y + oy, ox);
            let dst = (d * PATCH_SIDE + y) * PATCH_SIDE;
            for (o, &v) in out[dst..dst + PATCH_SIDE].iter_mut().zip(&mpr.data[src..src + PATCH_SIDE]) {
                *o = v / INTENSITY_SCALE;
            }
        }
    }
}

/// Patches centred on every centerline point (stride 1), intensities
/// divided by [`INTENSITY_SCALE`]. Larger cross-sections are centre-cropped.
pub fn extract_subvolumes(mpr: &Volume) -> Result<PatchSequence> {
    let dims = check_mpr(mpr)?;
    let mut patches = Samples::new(PATCH_LEN);
    let mut buf = vec![0.0; PATCH_LEN];
    for i in 0..dims.0 {
        fill_patch(mpr, dims, i, &mut buf);
        patches.push(&buf);
    }
    Ok(PatchSequence { patches })
}

/// 16 latent traces along an artery; row `i` holds latent `i` at every point.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    len: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(len: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != LATENT * len {
            return Err(invalid(format!(
                "feature map of length {len} needs {} values, got {}",
                LATENT * len,
                data.len()
            )));
        }
        Ok(Self { len, data })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.len..(i + 1) * self.len]
    }

    /// Row `i` followed by zeros up to length 800.
    pub fn padded_row(&self, i: usize) -> Result<Vec<f32>> {
        if self.len > MAX_LENGTH {
            return Err(invalid(format!(
                "artery length {} exceeds the maximum of {MAX_LENGTH} points",
                self.len
            )));
        }
        let mut row = self.row(i).to_vec();
        row.resize(MAX_LENGTH, 0.0);
        Ok(row)
    }
}

/// Both stages of the artery encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ArteryEncoder<T> {
    pub vcae: Vcae<T>,
    pub seq: SequenceCae<T>,
}

impl<T: Scalar> ArteryEncoder<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            vcae: Vcae::new(seed),
            seq: SequenceCae::new(seed ^ 0x5eed),
        }
    }

    /// Latent means for a batch of patches, 16 values per patch.
    pub fn vcae_encode(&self, patches: &[f32]) -> Result<Vec<f32>> {
        let n = patches.len() / PATCH_LEN;
        let mut out = Vec::with_capacity(n * LATENT);
        for chunk in patches.chunks(ENCODE_BATCH * PATCH_LEN) {
            let b = chunk.len() / PATCH_LEN;
            let mut g = Graph::new();
            let x = g.input(to_tensor(&[b, 1, PATCH_DEPTH, PATCH_SIDE, PATCH_SIDE], chunk));
            let (mu, _) = self.vcae.encode_vars(&mut g, x)?;
            out.extend(to_f32(g.value(mu)));
        }
        Ok(out)
    }

    /// Reconstructions from latent vectors, one patch per 16 values.
    pub fn vcae_decode(&self, latents: &[f32]) -> Result<Vec<f32>> {
        let b = latents.len() / LATENT;
        let mut g = Graph::new();
        let z = g.input(to_tensor(&[b, LATENT], latents));
        let r = self.vcae.decode_vars(&mut g, z)?;
        Ok(to_f32(g.value(r)))
    }

    pub fn feature_map(&self, patches: &PatchSequence) -> Result<FeatureMap> {
        let l = patches.len();
        let mu = self.vcae_encode(patches.patches.as_flat())?;
        let mut data = vec![0.0; LATENT * l];
        for (p, z) in mu.chunks_exact(LATENT).enumerate() {
            for (i, &v) in z.iter().enumerate() {
                data[i * l + p] = v;
            }
        }
        FeatureMap::new(l, data)
    }

    /// 64 codes per latent row, row 0 first.
    pub fn sequence_encode(&self, fm: &FeatureMap) -> Result<Vec<f32>> {
        let mut rows = Vec::with_capacity(LATENT * MAX_LENGTH);
        for i in 0..LATENT {
            rows.extend(fm.padded_row(i)?);
        }
        self.encode_rows(&rows)
    }

    /// Codes for any number of padded rows.
    pub fn encode_rows(&self, rows: &[f32]) -> Result<Vec<f32>> {
        let b = rows.len() / MAX_LENGTH;
        let mut g = Graph::new();
        let x = g.input(to_tensor(&[b, 1, MAX_LENGTH], rows));
        let z = self.seq.encode_vars(&mut g, x)?;
        Ok(to_f32(g.value(z)))
    }

    pub fn encode(&self, mpr: &Volume) -> Result<Vec<f32>> {
        let dims = check_mpr(mpr)?;
        if dims.0 > MAX_LENGTH {
            return Err(invalid(format!(
                "artery length {} exceeds the maximum of {MAX_LENGTH} points",
                dims.0
            )));
        }
        let fm = self.feature_map(&extract_subvolumes(mpr)?)?;
        self.sequence_encode(&fm)
    }

    pub fn to_named(&self, adam: Option<(&Adam<T>, &Adam<T>)>) -> NamedTensors {
        let mut nt = NamedTensors::new();
        save_model("vcae/", &self.vcae.params, adam.map(|a| a.0), &mut nt);
        save_model("seq/", &self.seq.params, adam.map(|a| a.1), &mut nt);
        nt
    }

    pub fn from_named(nt: &NamedTensors) -> Result<Self> {
        let mut enc = Self::new(0);
        nt.load_params("vcae/param/", &mut enc.vcae.params)?;
        nt.load_params("seq/param/", &mut enc.seq.params)?;
        Ok(enc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_named(&NamedTensors::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArteryPretrainConfig {
    pub vcae: CaeTrainConfig,
    pub seq: CaeTrainConfig,
    /// Patches drawn from the pretraining arteries for the 3-D stage.
    pub patches: usize,
    pub seed: u64,
}

impl Default for ArteryPretrainConfig {
    fn default() -> Self {
        Self {
            vcae: CaeTrainConfig {
                iterations: 1500,
                ..CaeTrainConfig::default()
            },
            seq: CaeTrainConfig {
                iterations: 1500,
                ..CaeTrainConfig::default()
            },
            patches: 10_000,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub heldout_mse_before: f64,
    pub heldout_mse_after: f64,
}

/// A random sample of patches across `mprs`, plus a held-out set of a
/// tenth that size.
pub fn patch_corpus(mprs: &[Volume], count: usize, seed: u64) -> Result<(Samples, Samples)> {
    if mprs.is_empty() {
        return Err(invalid("no arteries to sample patches from"));
    }
    let dims = mprs.iter().map(check_mpr).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0.0; PATCH_LEN];
    let mut draw = |n: usize| {
        let mut s = Samples::new(PATCH_LEN);
        for _ in 0..n {
            let a = rng.gen_range(0..mprs.len());
            let i = rng.gen_range(0..dims[a].0);
            fill_patch(&mprs[a], dims[a], i, &mut buf);
            s.push(&buf);
        }
        s
    };
    let train = draw(count);
    let held = draw((count / 10).max(1));
    Ok((train, held))
}

/// Trains both stages on a pretraining cohort: the VCAE on sampled patches,
/// then the sequence CAE on the latent rows of every artery.
pub fn pretrain_artery<T: Scalar>(
    mprs: &[Volume],
    cfg: &ArteryPretrainConfig,
) -> Result<(ArteryEncoder<T>, NamedTensors, [PretrainReport; 2])> {
    let mut enc = ArteryEncoder::<T>::new(cfg.seed);
    let (train, held) = patch_corpus(mprs, cfg.patches, cfg.seed ^ 0xc0ffee)?;
    let before = reconstruction_mse(&enc.vcae, &held)?;
    let (adam_v, losses) = train_autoencoder(&mut enc.vcae, &train, &cfg.vcae)?;
    let vcae_report = PretrainReport {
        losses,
        heldout_mse_before: before,
        heldout_mse_after: reconstruction_mse(&enc.vcae, &held)?,
    };

    let mut rows = Samples::new(MAX_LENGTH);
    for mpr in mprs {
        let fm = enc.feature_map(&extract_subvolumes(mpr)?)?;
        for i in 0..LATENT {
            rows.push(&fm.padded_row(i)?);
        }
    }
    let held_n = (rows.len() / 10).max(1).min(rows.len());
    let held = rows.range(rows.len() - held_n, rows.len());
    let train_rows = if rows.len() > held_n {
        rows.range(0, rows.len() - held_n)
    } else {
        rows.clone()
    };
    let before = reconstruction_mse(&enc.seq, &held)?;
    let (adam_s, losses) = train_autoencoder(&mut enc.seq, &train_rows, &cfg.seq)?;
    let seq_report = PretrainReport {
        losses,
        heldout_mse_before: before,
        heldout_mse_after: reconstruction_mse(&enc.seq, &held)?,
    };
    let nt = enc.to_named(Some((&adam_v, &adam_s)));
    Ok((enc, nt, [vcae_report, seq_report]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_volume(l: usize, v: f32) -> Volume {
        let mut vol = Volume::zeros(&[l, 40, 40], &[0.3, 0.3, 0.3]);
        vol.data.fill(v);
        vol
    }

    #[test]
    fn one_patch_per_point() {
        let ps = extract_subvolumes(&constant_volume(100, 1.0)).unwrap();
        assert_eq!(ps.len(), 100);
        assert_eq!(ps.patch(0).len(), 5 * 40 * 40);
    }

    #[test]
    fn end_patches_are_zero_padded() {
        let ps = extract_subvolumes(&constant_volume(60, 200.0)).unwrap();
        let first = ps.patch(0);
        assert!(first[..2 * 1600].iter().all(|&v| v == 0.0));
        assert!(first[2 * 1600..].iter().all(|&v| v == 0.5));
        let last = ps.patch(59);
        assert!(last[3 * 1600..].iter().all(|&v| v == 0.0));
        for i in 2..58 {
            assert_eq!(ps.patch(i), ps.patch(2));
        }
    }

    #[test]
    fn small_cross_section_rejected() {
        let vol = Volume::zeros(&[60, 30, 40], &[0.3; 3]);
        assert!(extract_subvolumes(&vol).is_err());
    }

    #[test]
    fn encoding_is_1024_long() {
        let enc = ArteryEncoder::<f32>::new(1);
        let e = enc.encode(&constant_volume(50, 100.0)).unwrap();
        assert_eq!(e.len(), 1024);
    }

    #[test]
    fn overlong_feature_map_rejected() {
        let enc = ArteryEncoder::<f32>::new(1);
        let fm = FeatureMap::new(801, vec![0.0; 16 * 801]).unwrap();
        assert!(enc.sequence_encode(&fm).is_err());
    }
}
