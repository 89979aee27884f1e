//! Per-source admissibility for an ROI: detector containment of the
//! projected ROI plus the bad-pixel fraction test at absorption threshold
//! `alpha`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{SourceSet, Vec3};
use crate::scene::{project_roi_patch, AbsorptionPatch, Detector, Roi, VoxelVolume};
use crate::stats::nearest_rank;

pub const DEFAULT_ETA: f64 = 0.25;
pub const DEFAULT_ALPHA_PERCENTILE: f64 = 0.95;

/// Scanner layout shared by every source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    pub detector: Detector,
    pub isocenter: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityMask {
    pub valid: Vec<bool>,
    /// Bad-pixel fraction per source; 1.0 where the geometric check failed.
    pub rho: Vec<f64>,
    pub geometric_ok: Vec<bool>,
    pub alpha: f64,
    pub eta: f64,
}

impl ValidityMask {
    /// Mask accepting every source.
    pub fn all_valid(m: usize) -> Self {
        ValidityMask {
            valid: vec![true; m],
            rho: vec![0.0; m],
            geometric_ok: vec![true; m],
            alpha: 1.0,
            eta: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.valid.is_empty() {
            0.0
        } else {
            self.valid_count() as f64 / self.valid.len() as f64
        }
    }

    pub fn summary(&self) -> ValiditySummary {
        let geometric_excluded = self.geometric_ok.iter().filter(|g| !**g).count();
        ValiditySummary {
            m: self.len(),
            valid: self.valid_count(),
            valid_fraction: self.valid_fraction(),
            excluded_geometric: geometric_excluded,
            excluded_attenuation: self.len() - self.valid_count() - geometric_excluded,
        }
    }

    /// Sources valid under both masks.
    pub fn intersect(&self, other: &ValidityMask) -> Result<ValidityMask> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch(format!(
                "masks over {} and {} sources",
                self.len(),
                other.len()
            )));
        }
        Ok(ValidityMask {
            valid: self.valid.iter().zip(&other.valid).map(|(a, b)| *a && *b).collect(),
            rho: self.rho.iter().zip(&other.rho).map(|(a, b)| a.max(*b)).collect(),
            geometric_ok: self.geometric_ok.iter().zip(&other.geometric_ok).map(|(a, b)| *a && *b).collect(),
            alpha: self.alpha,
            eta: self.eta,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValiditySummary {
    pub m: usize,
    pub valid: usize,
    pub valid_fraction: f64,
    pub excluded_geometric: usize,
    pub excluded_attenuation: usize,
}

/// True iff the conservative projected ROI disk fits on the panel.
///
/// The disk is centred at the pinhole projection of the ROI centre with
/// radius `r * sdd / depth`, `depth` measured along the principal axis.
pub fn geometric_check(geometry: &ScanGeometry, source: &Vec3, roi: &Roi) -> Result<bool> {
    if (source - roi.center_mm).norm() == 0.0 {
        return Err(Error::Geometry("source coincides with the ROI centre".into()));
    }
    let pose = geometry.detector.pose(*source, geometry.isocenter)?;
    let depth = pose.depth(&roi.center_mm);
    if depth <= roi.radius_mm {
        return Err(Error::Geometry(format!(
            "ROI within {:.3} mm of the source plane (radius {} mm)",
            depth, roi.radius_mm
        )));
    }
    let (u, v) = pose.project(&roi.center_mm).expect("positive depth");
    let radius = roi.radius_mm * geometry.detector.sdd_mm / depth;
    let det = &geometry.detector;
    Ok(u.abs() + radius <= det.half_width_mm() && v.abs() + radius <= det.half_height_mm())
}

/// Fraction of patch pixels with absorption strictly above `alpha`, and
/// whether that fraction is strictly below `eta`.
pub fn attenuation_check(patch: &AbsorptionPatch, alpha: f64, eta: f64) -> Result<(f64, bool)> {
    check_thresholds(alpha, eta)?;
    if patch.is_empty() {
        return Err(Error::InvalidInput("empty absorption patch".into()));
    }
    let bad = patch.values.iter().filter(|&&a| a > alpha).count();
    let rho = bad as f64 / patch.len() as f64;
    Ok((rho, rho < eta))
}

fn check_thresholds(alpha: f64, eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} outside [0, 1]")));
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::InvalidParameter(format!("eta {eta} outside (0, 1]")));
    }
    Ok(())
}

/// Projected ROI patches for every source, `None` where the geometric
/// check fails or the footprint is empty. Computed once and reused for
/// calibration and for masks at different thresholds.
#[derive(Debug, Clone)]
pub struct RoiPatches {
    pub roi: Roi,
    pub patches: Vec<Option<AbsorptionPatch>>,
}

impl RoiPatches {
    pub fn compute(volume: &VoxelVolume, geometry: &ScanGeometry, sources: &SourceSet, roi: &Roi) -> Result<Self> {
        let patches = sources
            .positions
            .par_iter()
            .map(|s| -> Result<Option<AbsorptionPatch>> {
                if !geometric_check(geometry, s, roi)? {
                    return Ok(None);
                }
                let pose = geometry.detector.pose(*s, geometry.isocenter)?;
                let patch = project_roi_patch(volume, &pose, roi)?;
                Ok((!patch.is_empty()).then_some(patch))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RoiPatches { roi: *roi, patches })
    }

    pub fn mask(&self, alpha: f64, eta: f64) -> Result<ValidityMask> {
        check_thresholds(alpha, eta)?;
        let m = self.patches.len();
        let mut mask = ValidityMask {
            valid: vec![false; m],
            rho: vec![1.0; m],
            geometric_ok: vec![false; m],
            alpha,
            eta,
        };
        for (i, p) in self.patches.iter().enumerate() {
            if let Some(patch) = p {
                let (rho, ok) = attenuation_check(patch, alpha, eta)?;
                mask.geometric_ok[i] = true;
                mask.rho[i] = rho;
                mask.valid[i] = ok;
            }
        }
        Ok(mask)
    }

    fn pooled_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.patches.iter().flatten().flat_map(|p| p.values.iter().copied())
    }
}

/// Builds the validity mask for one ROI.
pub fn build_validity_mask(
    volume: &VoxelVolume,
    geometry: &ScanGeometry,
    sources: &SourceSet,
    roi: &Roi,
    alpha: f64,
    eta: f64,
) -> Result<ValidityMask> {
    check_thresholds(alpha, eta)?;
    RoiPatches::compute(volume, geometry, sources, roi)?.mask(alpha, eta)
}

/// Nearest-rank percentile of the absorption values pooled over all
/// geometrically valid (source, ROI) patches.
pub fn calibrate_alpha_from_patches(patches: &[RoiPatches], percentile: f64) -> Result<f64> {
    if !(percentile > 0.0 && percentile < 1.0) {
        return Err(Error::InvalidParameter(format!("percentile {percentile} outside (0, 1)")));
    }
    let pooled: Vec<f64> = patches.iter().flat_map(|p| p.pooled_values()).collect();
    if pooled.is_empty() {
        return Err(Error::Calibration("no geometrically valid source/ROI pairs".into()));
    }
    nearest_rank(&pooled, percentile)
}

/// Per-ROI variant of [`calibrate_alpha_from_patches`].
pub fn calibrate_alpha_per_roi(patches: &[RoiPatches], percentile: f64) -> Result<Vec<f64>> {
    patches
        .iter()
        .map(|p| calibrate_alpha_from_patches(std::slice::from_ref(p), percentile))
        .collect()
}

/// Pooled alpha calibration on an (unoccluded) scene.
pub fn calibrate_alpha(
    volume: &VoxelVolume,
    geometry: &ScanGeometry,
    sources: &SourceSet,
    rois: &[Roi],
    percentile: f64,
) -> Result<f64> {
    let patches = rois
        .iter()
        .map(|roi| RoiPatches::compute(volume, geometry, sources, roi))
        .collect::<Result<Vec<_>>>()?;
    calibrate_alpha_from_patches(&patches, percentile)
}
