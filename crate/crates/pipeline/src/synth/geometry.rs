//! Straightened-artery geometry and the hemodynamic toy FFR model.
//!
//! Each stenosis contributes a resistance `c · l · (1/r_min⁴ − 1/r_ref⁴)`
//! (lengths and radii in mm), in series with a fixed microvascular
//! resistance `R_micro`; the artery's FFR is `R_micro / (R_micro + Σ R_i)`.

use crate::error::{invalid, Result};

/// Centerline step of the straightened volumes, in mm.
pub const POINT_SPACING_MM: f64 = 0.3;
pub const MIN_LENGTH: usize = 50;
pub const MAX_LENGTH: usize = 800;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stenosis {
    /// Center position along the centerline, in points.
    pub center: f64,
    pub length_mm: f64,
    pub r_min: f64,
    pub calcified: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArteryGeometry {
    /// Number of centerline points.
    pub length: usize,
    /// Reference lumen radius at the ostium, mm.
    pub r0: f64,
    /// Radius lost per mm of centerline.
    pub taper: f64,
    pub stenoses: Vec<Stenosis>,
    /// Myocardial territory fed by this artery.
    pub territory: usize,
}

impl ArteryGeometry {
    pub fn healthy(length: usize, r0: f64) -> Self {
        Self {
            length,
            r0,
            taper: 0.0,
            stenoses: Vec::new(),
            territory: 0,
        }
    }

    /// Reference (disease-free) radius at centerline position `p` (points).
    pub fn reference_radius(&self, p: f64) -> f64 {
        (self.r0 - self.taper * p * POINT_SPACING_MM).max(0.4 * self.r0)
    }

    /// Lumen radius including stenoses: a raised-cosine narrowing spanning
    /// each lesion's length.
    pub fn lumen_radius(&self, p: f64) -> f64 {
        let r_ref = self.reference_radius(p);
        let mut r = r_ref;
        for s in &self.stenoses {
            let half = 0.5 * s.length_mm;
            let dz = (p - s.center).abs() * POINT_SPACING_MM;
            if dz < half {
                let local_ref = r_ref;
                let depth = (local_ref - s.r_min).max(0.0);
                let narrowed = local_ref - depth * 0.5 * (1.0 + (std::f64::consts::PI * dz / half).cos());
                r = r.min(narrowed);
            }
        }
        r
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_LENGTH..=MAX_LENGTH).contains(&self.length) {
            return Err(invalid(format!(
                "artery length {} outside [{MIN_LENGTH}, {MAX_LENGTH}]",
                self.length
            )));
        }
        if !(self.r0 > 0.0) || !(self.taper >= 0.0) {
            return Err(invalid("reference radius must be positive and taper non-negative"));
        }
        for s in &self.stenoses {
            if !(s.center > 0.0 && s.center < self.length as f64) {
                return Err(invalid(format!("stenosis at {} outside the artery", s.center)));
            }
            if !(s.length_mm > 0.0) {
                return Err(invalid("stenosis length must be positive"));
            }
            let r_ref = self.reference_radius(s.center);
            if !(s.r_min > 0.0 && s.r_min < r_ref) {
                return Err(invalid(format!(
                    "stenosis radius {} not inside (0, {r_ref})",
                    s.r_min
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FfrConstants {
    /// Viscous resistance coefficient.
    pub c: f64,
    pub r_micro: f64,
}

impl FfrConstants {
    /// Solves `c` so that one stenosis of the given diameter reduction and
    /// length, in an artery of reference radius `r0`, yields `target_ffr`.
    pub fn calibrated(target_ffr: f64, r0: f64, diameter_reduction: f64, length_mm: f64, r_micro: f64) -> Self {
        let r_min = r0 * (1.0 - diameter_reduction);
        let shape = length_mm * (r_min.powi(-4) - r0.powi(-4));
        let needed = r_micro * (1.0 / target_ffr - 1.0);
        Self {
            c: needed / shape,
            r_micro,
        }
    }

    pub fn resistance(&self, length_mm: f64, r_min: f64, r_ref: f64) -> f64 {
        self.c * length_mm * (r_min.powi(-4) - r_ref.powi(-4))
    }

    /// Minimum radius of a single stenosis that brings the artery to `ffr`.
    pub fn radius_for_ffr(&self, ffr: f64, length_mm: f64, r_ref: f64) -> f64 {
        let needed = self.r_micro * (1.0 / ffr - 1.0);
        (needed / (self.c * length_mm) + r_ref.powi(-4)).powf(-0.25)
    }
}

impl Default for FfrConstants {
    /// A 50 % diameter, 10 mm lesion in a 1.5 mm artery gives FFR 0.80.
    fn default() -> Self {
        Self::calibrated(0.80, 1.5, 0.5, 10.0, 1.0)
    }
}

/// Deterministic FFR of one artery, in `(0, 1]`.
pub fn ffr_oracle(geometry: &ArteryGeometry, k: &FfrConstants) -> f64 {
    let total: f64 = geometry
        .stenoses
        .iter()
        .map(|s| k.resistance(s.length_mm, s.r_min, geometry.reference_radius(s.center)))
        .sum();
    k.r_micro / (k.r_micro + total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn healthy_artery_has_unit_ffr() {
        let g = ArteryGeometry::healthy(100, 1.5);
        assert_eq!(ffr_oracle(&g, &FfrConstants::default()), 1.0);
    }

    #[test]
    fn equal_resistances_halve_ffr() {
        let k = FfrConstants { c: 1.0, r_micro: 2.0 };
        let mut g = ArteryGeometry::healthy(100, 1.0);
        // c · l · (1/r⁴ − 1) = 2 with l = 1 → r⁴ = 1/3
        g.stenoses.push(Stenosis {
            center: 50.0,
            length_mm: 1.0,
            r_min: (1.0f64 / 3.0).powf(0.25),
            calcified: false,
        });
        assert!((ffr_oracle(&g, &k) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn radius_for_ffr_inverts_oracle() {
        let k = FfrConstants::default();
        let mut g = ArteryGeometry::healthy(300, 1.7);
        let r = k.radius_for_ffr(0.73, 12.0, g.reference_radius(150.0));
        g.stenoses.push(Stenosis { center: 150.0, length_mm: 12.0, r_min: r, calcified: false });
        assert!((ffr_oracle(&g, &k) - 0.73).abs() < 1e-12);
    }

    #[test]
    fn validation_rejects_bad_lengths() {
        assert!(ArteryGeometry::healthy(49, 1.5).validate().is_err());
        assert!(ArteryGeometry::healthy(801, 1.5).validate().is_err());
        assert!(ArteryGeometry::healthy(800, 1.5).validate().is_ok());
    }

    #[test]
    fn lumen_profile_reaches_minimum_at_center() {
        let mut g = ArteryGeometry::healthy(200, 1.5);
        g.stenoses.push(Stenosis { center: 100.0, length_mm: 6.0, r_min: 0.6, calcified: false });
        assert!((g.lumen_radius(100.0) - 0.6).abs() < 1e-12);
        assert_eq!(g.lumen_radius(10.0), 1.5);
    }
}
