//! Synthetic patients: sampled lesion geometry, oracle FFR labels and
//! rendered volumes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::geometry::{ffr_oracle, ArteryGeometry, FfrConstants, Stenosis, POINT_SPACING_MM};
use super::render::{render_mpr, render_myocardium, MyoLayout, MyoRenderParams, MyoStyle, TERRITORIES};
use crate::error::{invalid, Result};
use crate::io::Volume;

/// Patients at or below this minimum FFR are positive.
pub const FFR_THRESHOLD: f64 = 0.8;
pub const MIN_ARTERIES: usize = 4;
pub const MAX_ARTERIES: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct CohortConfig {
    pub patients: usize,
    pub seed: u64,
    pub arteries_mean: f64,
    pub arteries_sd: f64,
    pub ffr_mean: f64,
    pub ffr_sd: f64,
    /// SD of the additive MPR noise.
    pub noise: f64,
    /// Myocardial intensity drop per unit of FFR below the ischemic threshold.
    pub coupling: f64,
    /// SD of perfusion-unrelated per-territory intensity offsets.
    pub heterogeneity: f64,
    pub myo_noise: f64,
    pub min_length: usize,
    pub max_length: usize,
    /// Probability that a non-culprit artery carries a milder lesion.
    pub secondary_lesion_rate: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            patients: 200,
            seed: 7,
            arteries_mean: 18.5,
            arteries_sd: 4.3,
            ffr_mean: 0.79,
            ffr_sd: 0.10,
            noise: 25.0,
            coupling: 150.0,
            heterogeneity: 6.0,
            myo_noise: 10.0,
            min_length: 50,
            max_length: 160,
            secondary_lesion_rate: 0.3,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patients == 0 {
            return Err(invalid("patients must be positive"));
        }
        for (name, v) in [
            ("arteries_sd", self.arteries_sd),
            ("ffr_sd", self.ffr_sd),
            ("noise", self.noise),
            ("coupling", self.coupling),
            ("heterogeneity", self.heterogeneity),
            ("myo_noise", self.myo_noise),
        ] {
            if !(v >= 0.0) {
                return Err(invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.arteries_mean > 0.0) {
            return Err(invalid("arteries_mean must be positive"));
        }
        if !(self.ffr_mean > 0.0 && self.ffr_mean <= 1.0) {
            return Err(invalid("ffr_mean must lie in (0, 1]"));
        }
        if self.min_length < super::geometry::MIN_LENGTH
            || self.max_length > super::geometry::MAX_LENGTH
            || self.min_length > self.max_length
        {
            return Err(invalid(format!(
                "artery length range [{}, {}] outside [50, 800]",
                self.min_length, self.max_length
            )));
        }
        if !(0.0..=1.0).contains(&self.secondary_lesion_rate) {
            return Err(invalid("secondary_lesion_rate must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Everything about a patient except the rendered voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientPlan {
    pub id: usize,
    pub seed: u64,
    pub arteries: Vec<ArteryGeometry>,
    pub ffr: Vec<f64>,
    pub min_ffr: f64,
    pub label: bool,
}

impl PatientPlan {
    /// Per-territory FFR: the minimum over the arteries feeding it.
    pub fn territory_ffr(&self) -> [f64; TERRITORIES] {
        let mut t = [1.0f64; TERRITORIES];
        for (g, &f) in self.arteries.iter().zip(&self.ffr) {
            t[g.territory] = t[g.territory].min(f);
        }
        t
    }

    fn noise_seed(&self) -> u64 {
        splitmix64(self.seed ^ 0x6e6f_6973_655f_6669)
    }

    fn myo_seed(&self) -> u64 {
        splitmix64(self.seed ^ 0x6d79_6f63_6172_6469)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub plan: PatientPlan,
    pub mprs: Vec<Volume>,
    pub myocardium: Volume,
    pub mask: Volume,
}

impl PatientRecord {
    pub fn label(&self) -> bool {
        self.plan.label
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the `index`-th patient of a cohort.
pub fn patient_seed(cohort_seed: u64, index: usize) -> u64 {
    splitmix64(cohort_seed.wrapping_mul(0x0000_0100_0000_01b3) ^ splitmix64(index as u64))
}

fn lesion<R: Rng>(
    rng: &mut R,
    artery: &ArteryGeometry,
    target_ffr: f64,
    k: &FfrConstants,
) -> Stenosis {
    let length_mm = rng.gen_range(4.0..20.0);
    let half_points = 0.5 * length_mm / POINT_SPACING_MM;
    let len = artery.length as f64;
    let (lo, hi) = (half_points + 2.0, len - half_points - 2.0);
    let center = if lo < hi {
        rng.gen_range(lo..hi)
    } else {
        len / 2.0
    };
    let r_ref = artery.reference_radius(center);
    let r_min = k.radius_for_ffr(target_ffr, length_mm, r_ref).min(0.999 * r_ref);
    Stenosis {
        center,
        length_mm,
        r_min,
        calcified: rng.gen_bool(0.3),
    }
}

/// Samples lesion geometry; the label follows from the FFR oracle.
pub fn plan_patient(cfg: &CohortConfig, id: usize, seed: u64, k: &FfrConstants) -> PatientPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_normal = Normal::new(cfg.arteries_mean, cfg.arteries_sd.max(1e-12)).expect("finite sd");
    let n = (n_normal.sample(&mut rng).round() as i64).clamp(MIN_ARTERIES as i64, MAX_ARTERIES as i64) as usize;
    let r0 = rng.gen_range(1.3..1.9);
    let mut arteries: Vec<ArteryGeometry> = (0..n)
        .map(|i| {
            let length = rng.gen_range(cfg.min_length..=cfg.max_length);
            let r_end = r0 * rng.gen_range(0.6..1.0);
            ArteryGeometry {
                length,
                r0,
                taper: (r0 - r_end) / (length as f64 * POINT_SPACING_MM),
                stenoses: Vec::new(),
                territory: i % TERRITORIES,
            }
        })
        .collect();

    let f_normal = Normal::new(cfg.ffr_mean, cfg.ffr_sd.max(1e-12)).expect("finite sd");
    let target = f_normal.sample(&mut rng).clamp(0.45, 0.99);
    let culprit = rng.gen_range(0..n);
    let s = lesion(&mut rng, &arteries[culprit], target, k);
    arteries[culprit].stenoses.push(s);
    for (i, a) in arteries.iter_mut().enumerate() {
        if i == culprit || !rng.gen_bool(cfg.secondary_lesion_rate) {
            continue;
        }
        let lo = target + 0.02;
        if lo >= 0.995 {
            continue;
        }
        let milder = rng.gen_range(lo..0.995);
        let s = lesion(&mut rng, a, milder, k);
        a.stenoses.push(s);
    }

    let ffr: Vec<f64> = arteries.iter().map(|a| ffr_oracle(a, k)).collect();
    let min_ffr = ffr.iter().copied().fold(f64::INFINITY, f64::min);
    PatientPlan {
        id,
        seed,
        arteries,
        ffr,
        min_ffr,
        label: min_ffr <= FFR_THRESHOLD,
    }
}

/// Renders a planned patient.
pub fn render_patient(cfg: &CohortConfig, plan: PatientPlan) -> Result<PatientRecord> {
    let noise_seed = plan.noise_seed();
    let mprs = plan
        .arteries
        .iter()
        .map(|g| render_mpr(g, cfg.noise, noise_seed))
        .collect::<Result<Vec<_>>>()?;
    let myo = render_myocardium(
        &MyoLayout::default(),
        &MyoStyle::default(),
        &plan.territory_ffr(),
        &MyoRenderParams {
            coupling: cfg.coupling,
            heterogeneity: cfg.heterogeneity,
            noise_sd: cfg.myo_noise,
            seed: plan.myo_seed(),
        },
    );
    Ok(PatientRecord {
        plan,
        mprs,
        myocardium: myo.volume,
        mask: myo.mask,
    })
}

pub fn generate_patient(cfg: &CohortConfig, id: usize, seed: u64) -> Result<PatientRecord> {
    cfg.validate()?;
    render_patient(cfg, plan_patient(cfg, id, seed, &FfrConstants::default()))
}

/// Lesion plans for the whole cohort, without rendering.
pub fn plan_cohort(cfg: &CohortConfig) -> Result<Vec<PatientPlan>> {
    cfg.validate()?;
    let k = FfrConstants::default();
    Ok((0..cfg.patients)
        .map(|i| plan_patient(cfg, i, patient_seed(cfg.seed, i), &k))
        .collect())
}
