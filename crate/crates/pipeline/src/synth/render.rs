//! Phantom rendering: straightened MPR tubes and a short-axis ring stack
//! standing in for the LV myocardium.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::geometry::{ArteryGeometry, POINT_SPACING_MM};
use crate::error::Result;
use crate::io::Volume;

/// In-plane extent of every MPR cross-section, in voxels.
pub const MPR_SIDE: usize = 40;

pub const BACKGROUND_HU: f64 = 50.0;
pub const LUMEN_HU: f64 = 400.0;
pub const CALCIUM_HU: f64 = 900.0;
/// Width of the logistic lumen boundary, mm.
const EDGE_MM: f64 = 0.15;
const CALCIUM_SIGMA_MM: f64 = 0.45;

/// Territories supplied by the arteries (angular sectors of the ring).
pub const TERRITORIES: usize = 4;
/// Territories fed at or above this FFR receive no ischemic change.
pub const ISCHEMIA_FFR: f64 = 0.85;

/// Renders one artery as an `L × 40 × 40` volume, axis 0 along the
/// centerline. The noise field depends only on `noise_seed`, so arteries
/// rendered with the same seed share it voxel for voxel.
pub fn render_mpr(geometry: &ArteryGeometry, noise_sd: f64, noise_seed: u64) -> Result<Volume> {
    geometry.validate()?;
    let l = geometry.length;
    let mut vol = Volume::zeros(&[l, MPR_SIDE, MPR_SIDE], &[POINT_SPACING_MM; 3]);
    let mid = (MPR_SIDE as f64 - 1.0) / 2.0;
    let coord = |i: usize| (i as f64 - mid) * POINT_SPACING_MM;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);

    for z in 0..l {
        let p = z as f64;
        let r = geometry.lumen_radius(p);
        let r_ref = geometry.reference_radius(p);
        for y in 0..MPR_SIDE {
            let yy = coord(y);
            for x in 0..MPR_SIDE {
                let xx = coord(x);
                let d = (xx * xx + yy * yy).sqrt();
                let inside = 1.0 / (1.0 + ((d - r) / EDGE_MM).exp());
                let mut v = BACKGROUND_HU + (LUMEN_HU - BACKGROUND_HU) * inside;
                for s in geometry.stenoses.iter().filter(|s| s.calcified) {
                    // plaque sits on the +x wall at the reference radius
                    let dz = (p - s.center) * POINT_SPACING_MM;
                    let dx = xx - r_ref;
                    let d2 = dz * dz + dx * dx + yy * yy;
                    v += (CALCIUM_HU - v).max(0.0)
                        * (-d2 / (2.0 * CALCIUM_SIGMA_MM * CALCIUM_SIGMA_MM)).exp();
                }
                let n: f64 = rng.sample(StandardNormal);
                let i = vol.idx3(z, y, x);
                vol.data[i] = (v + noise_sd * n) as f32;
            }
        }
    }
    Ok(vol)
}

/// Geometry of the toy short-axis LV: a stack of annuli.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MyoLayout {
    pub slices: usize,
    pub side: usize,
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub spacing_mm: f64,
}

impl Default for MyoLayout {
    fn default() -> Self {
        Self {
            slices: 10,
            side: 48,
            inner_radius: 9.0,
            outer_radius: 15.0,
            spacing_mm: 1.0,
        }
    }
}

impl MyoLayout {
    fn center(&self) -> f64 {
        (self.side as f64 - 1.0) / 2.0
    }

    fn radius(&self, y: usize, x: usize) -> f64 {
        let c = self.center();
        ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt()
    }

    pub fn in_ring(&self, y: usize, x: usize) -> bool {
        let r = self.radius(y, x);
        r >= self.inner_radius && r <= self.outer_radius
    }

    /// Angular sector (0..4) of an in-plane position.
    pub fn territory(&self, y: usize, x: usize) -> usize {
        let c = self.center();
        let theta = (y as f64 - c).atan2(x as f64 - c) + std::f64::consts::PI;
        ((theta / (std::f64::consts::PI / 2.0)) as usize).min(TERRITORIES - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MyoStyle {
    pub blood_hu: f64,
    pub myocardium_hu: f64,
    pub outside_hu: f64,
    /// Amplitude of the smoothed texture field.
    pub texture: f64,
}

impl Default for MyoStyle {
    fn default() -> Self {
        Self {
            blood_hu: 400.0,
            myocardium_hu: 120.0,
            outside_hu: 30.0,
            texture: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MyoRender {
    pub volume: Volume,
    /// 1.0 inside the myocardium, 0.0 elsewhere.
    pub mask: Volume,
    /// Territory per voxel; `u8::MAX` outside the mask.
    pub territory: Vec<u8>,
    /// Mask voxels whose territory received an ischemic change.
    pub affected_voxels: usize,
}

/// Hypo-attenuation applied to a territory fed at `ffr`.
pub fn ischemic_drop(ffr: f64, coupling: f64) -> f64 {
    coupling * (ISCHEMIA_FFR - ffr).max(0.0)
}

/// Parameters of one myocardium rendering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MyoRenderParams {
    pub coupling: f64,
    /// SD of per-territory intensity offsets unrelated to perfusion.
    pub heterogeneity: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

pub fn render_myocardium(
    layout: &MyoLayout,
    style: &MyoStyle,
    territory_ffr: &[f64; TERRITORIES],
    params: &MyoRenderParams,
) -> MyoRender {
    let (d, s) = (layout.slices, layout.side);
    let sp = [layout.spacing_mm; 3];
    let mut volume = Volume::zeros(&[d, s, s], &sp);
    let mut mask = Volume::zeros(&[d, s, s], &sp);
    let mut territory = vec![u8::MAX; d * s * s];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let offsets: Vec<f64> = (0..TERRITORIES)
        .map(|_| params.heterogeneity * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let white: Vec<f64> = (0..d * s * s).map(|_| rng.sample(StandardNormal)).collect();
    let raw: Vec<f64> = (0..d * s * s).map(|_| rng.sample(StandardNormal)).collect();
    // 3×3 in-plane box filter gives the texture a short correlation length
    let mut texture = vec![0.0; d * s * s];
    for z in 0..d {
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < s && (xx as usize) < s {
                            acc += raw[(z * s + yy as usize) * s + xx as usize];
                        }
                    }
                }
                texture[(z * s + y) * s + x] = acc / 3.0;
            }
        }
    }

    let mut affected = 0;
    for z in 0..d {
        for y in 0..s {
            for x in 0..s {
                let i = (z * s + y) * s + x;
                let r = layout.radius(y, x);
                let base = if layout.in_ring(y, x) {
                    let t = layout.territory(y, x);
                    territory[i] = t as u8;
                    mask.data[i] = 1.0;
                    let ffr = territory_ffr[t];
                    let drop = ischemic_drop(ffr, params.coupling);
                    let severity = ((ISCHEMIA_FFR - ffr) / 0.35).clamp(0.0, 1.0);
                    if drop > 0.0 {
                        affected += 1;
                    }
                    style.myocardium_hu + offsets[t] - drop
                        + style.texture * (1.0 - 0.5 * severity) * texture[i]
                } else if r < layout.inner_radius {
                    style.blood_hu
                } else {
                    style.outside_hu
                };
                volume.data[i] = (base + params.noise_sd * white[i]) as f32;
            }
        }
    }
    MyoRender {
        volume,
        mask,
        territory,
        affected_voxels: affected,
    }
}
