//! Myocardium encoder: a patch CAE applied around mask voxels, latents
//! averaged per cluster, then mean/sd/min/max across the 500 clusters.

mod cae;
mod cluster;

pub use cae::{MyoCae, MYO_LATENT};
pub use cluster::{cluster_mask, cluster_myocardium, components, is_connected, Cluster, MyoClusterSet, CLUSTERS};

use std::path::Path;

use ffrmil_core::{Graph, NamedTensors, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::io::Volume;
use crate::model::{
    reconstruction_mse, save_model, to_f32, to_tensor, train_autoencoder, CaeTrainConfig, Samples,
};

pub const PATCH_SIDE: usize = 16;
pub const PATCH_LEN: usize = PATCH_SIDE * PATCH_SIDE;
pub const FEATURE_LEN: usize = 4 * MYO_LATENT;
pub const PATCHES_PER_CLUSTER: usize = 32;
pub const INTENSITY_SCALE: f32 = 400.0;
const ENCODE_BATCH: usize = 256;

fn extents3(v: &Volume) -> Result<[usize; 3]> {
    match v.extents.as_slice() {
        &[a, b, c] => Ok([a, b, c]),
        e => Err(invalid(format!("myocardium volume must be 3-D, got {e:?}"))),
    }
}

/// The 16×16 in-plane patch centred on voxel `index`, scaled, zero outside
/// the volume.
pub fn extract_patch(volume: &Volume, index: usize, out: &mut [f32]) {
    let e = [volume.extents[0], volume.extents[1], volume.extents[2]];
    let (z, y, x) = (index / (e[1] * e[2]), (index / e[2]) % e[1], index % e[2]);
    let half = (PATCH_SIDE / 2) as isize;
    for py in 0..PATCH_SIDE {
        let yy = y as isize + py as isize - half;
        for px in 0..PATCH_SIDE {
            let xx = x as isize + px as isize - half;
            out[py * PATCH_SIDE + px] = if yy >= 0 && xx >= 0 && (yy as usize) < e[1] && (xx as usize) < e[2] {
                volume.at3(z, yy as usize, xx as usize) / INTENSITY_SCALE
            } else {
                0.0
            };
        }
    }
}

/// Up to [`PATCHES_PER_CLUSTER`] evenly spaced voxels of a cluster.
pub fn sample_voxels(voxels: &[usize]) -> Vec<usize> {
    if voxels.len() <= PATCHES_PER_CLUSTER {
        return voxels.to_vec();
    }
    (0..PATCHES_PER_CLUSTER)
        .map(|i| voxels[i * voxels.len() / PATCHES_PER_CLUSTER])
        .collect()
}

/// `[mean | sd | min | max]` over rows, per column. The sd is the
/// population standard deviation.
pub fn cluster_statistics(latents: &[Vec<f32>]) -> Result<Vec<f32>> {
    let d = latents.first().map(Vec::len).ok_or_else(|| invalid("no cluster latents"))?;
    if latents.iter().any(|r| r.len() != d) {
        return Err(invalid("cluster latents of unequal length"));
    }
    let n = latents.len() as f64;
    let mut out = vec![0.0f32; 4 * d];
    for j in 0..d {
        let col = latents.iter().map(|r| r[j] as f64);
        let mean = col.clone().sum::<f64>() / n;
        let var = col.clone().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let min = col.clone().fold(f64::INFINITY, f64::min);
        let max = col.fold(f64::NEG_INFINITY, f64::max);
        out[j] = mean.clamp(min, max) as f32;
        out[d + j] = var.sqrt() as f32;
        out[2 * d + j] = min as f32;
        out[3 * d + j] = max as f32;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MyoEncoder<T> {
    pub cae: MyoCae<T>,
}

impl<T: Scalar> MyoEncoder<T> {
    pub fn new(seed: u64) -> Self {
        Self { cae: MyoCae::new(seed) }
    }

    /// 128 latents per 16×16 patch.
    pub fn encode_patches(&self, patches: &[f32]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(patches.len() / PATCH_LEN * MYO_LATENT);
        for chunk in patches.chunks(ENCODE_BATCH * PATCH_LEN) {
            let b = chunk.len() / PATCH_LEN;
            let mut g = Graph::new();
            let x = g.input(to_tensor(&[b, 1, 1, PATCH_SIDE, PATCH_SIDE], chunk));
            let z = self.cae.encode_vars(&mut g, x)?;
            out.extend(to_f32(g.value(z)));
        }
        Ok(out)
    }

    /// Mean latent of each cluster's sampled patches.
    pub fn cluster_latents(&self, volume: &Volume, clusters: &MyoClusterSet) -> Result<Vec<Vec<f32>>> {
        let e = extents3(volume)?;
        if e != clusters.extents {
            return Err(invalid(format!(
                "volume extents {e:?} differ from cluster extents {:?}",
                clusters.extents
            )));
        }
        let mut patches = Vec::new();
        let mut counts = Vec::with_capacity(clusters.len());
        let mut buf = vec![0.0; PATCH_LEN];
        for c in &clusters.clusters {
            let picks = sample_voxels(&c.voxels);
            counts.push(picks.len());
            for v in picks {
                extract_patch(volume, v, &mut buf);
                patches.extend_from_slice(&buf);
            }
        }
        let z = self.encode_patches(&patches)?;
        let mut rows = z.chunks_exact(MYO_LATENT);
        Ok(counts
            .iter()
            .map(|&n| {
                let mut acc = vec![0.0f64; MYO_LATENT];
                for row in rows.by_ref().take(n) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v as f64;
                    }
                }
                acc.into_iter().map(|a| (a / n.max(1) as f64) as f32).collect()
            })
            .collect())
    }

    /// The 512-value myocardium descriptor.
    pub fn features(&self, volume: &Volume, clusters: &MyoClusterSet) -> Result<Vec<f32>> {
        cluster_statistics(&self.cluster_latents(volume, clusters)?)
    }

    pub fn to_named(&self, adam: Option<&ffrmil_core::Adam<T>>) -> NamedTensors {
        let mut nt = NamedTensors::new();
        save_model("myo/", &self.cae.params, adam, &mut nt);
        nt
    }

    pub fn from_named(nt: &NamedTensors) -> Result<Self> {
        let mut enc = Self::new(0);
        nt.load_params("myo/param/", &mut enc.cae.params)?;
        Ok(enc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_named(&NamedTensors::load(path)?)
    }
}

/// Patches centred on random mask voxels of the given patients, plus a
/// held-out set a tenth that size.
pub fn myo_patch_corpus(volumes: &[(Volume, Volume)], count: usize, seed: u64) -> Result<(Samples, Samples)> {
    let masks: Vec<Vec<usize>> = volumes
        .iter()
        .map(|(_, m)| (0..m.len()).filter(|&i| m.data[i] > 0.5).collect())
        .collect();
    if masks.iter().all(Vec::is_empty) {
        return Err(invalid("no myocardium voxels to sample patches from"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0.0; PATCH_LEN];
    let mut draw = |n: usize| {
        let mut s = Samples::new(PATCH_LEN);
        while s.len() < n {
            let p = rng.gen_range(0..volumes.len());
            if masks[p].is_empty() {
                continue;
            }
            let v = masks[p][rng.gen_range(0..masks[p].len())];
            extract_patch(&volumes[p].0, v, &mut buf);
            s.push(&buf);
        }
        s
    };
    let train = draw(count);
    let held = draw((count / 10).max(1));
    Ok((train, held))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MyoPretrainConfig {
    pub cae: CaeTrainConfig,
    pub patches: usize,
    pub seed: u64,
}

impl Default for MyoPretrainConfig {
    fn default() -> Self {
        Self {
            cae: CaeTrainConfig {
                iterations: 1500,
                batch: 32,
                ..CaeTrainConfig::default()
            },
            patches: 10_000,
            seed: 13,
        }
    }
}

pub fn pretrain_myo<T: Scalar>(
    volumes: &[(Volume, Volume)],
    cfg: &MyoPretrainConfig,
) -> Result<(MyoEncoder<T>, NamedTensors, crate::artery::PretrainReport)> {
    let mut enc = MyoEncoder::<T>::new(cfg.seed);
    let (train, held) = myo_patch_corpus(volumes, cfg.patches, cfg.seed ^ 0xfeed)?;
    let before = reconstruction_mse(&enc.cae, &held)?;
    let (adam, losses) = train_autoencoder(&mut enc.cae, &train, &cfg.cae)?;
    let report = crate::artery::PretrainReport {
        losses,
        heldout_mse_before: before,
        heldout_mse_after: reconstruction_mse(&enc.cae, &held)?,
    };
    let nt = enc.to_named(Some(&adam));
    Ok((enc, nt, report))
}
