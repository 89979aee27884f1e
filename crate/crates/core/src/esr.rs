//! Effective spatial resolution: per-direction angular gaps of a selected
//! trajectory, mapped to a feature size `2 r * gap`.
//!
//! The outputs are estimates. Gaps use only selected sources that are valid
//! for the ROI; with none, every gap is `pi/2`.

use std::f64::consts::FRAC_PI_2;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{fibonacci_sphere, Direction, DirectionGrid, SourceSet, Vec3};
use crate::scene::Roi;
use crate::stats::{mean, nearest_rank};
use crate::validity::ValidityMask;

/// `min_s arcsin |d_s . mu|` over sources, `pi/2` for an empty list.
pub fn directional_gap(point: &Vec3, mu: &Direction, sources: &[Vec3]) -> Result<f64> {
    let mut best = f64::INFINITY;
    for s in sources {
        let d = s - point;
        let n = d.norm();
        if n == 0.0 {
            return Err(Error::Geometry("source coincides with the evaluation point".into()));
        }
        best = best.min((d.dot(mu.unit()) / n).abs());
    }
    Ok(if best.is_finite() { best.min(1.0).asin() } else { FRAC_PI_2 })
}

/// Nearest-rank quantile of a gap list.
pub fn gap_quantile(gaps: &[f64], p: f64) -> Result<f64> {
    nearest_rank(gaps, p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsrPoint {
    pub position_mm: Vec3,
    pub mean_gap_rad: f64,
    pub quantile_gap_rad: f64,
    pub esr_mean_mm: f64,
    pub esr_quantile_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsrReport {
    /// Gaps at the ROI centre, one per grid direction.
    pub per_direction_gap_rad: Vec<f64>,
    pub mean_gap_rad: f64,
    pub quantile_gap_rad: f64,
    pub p: f64,
    pub roi_radius_mm: f64,
    pub esr_mean_mm: f64,
    pub esr_quantile_mm: f64,
    /// Point 0 is the ROI centre.
    pub evaluation_points: Vec<EsrPoint>,
    pub voxel_mean_esr_mm: f64,
    pub voxel_quantile_esr_mm: f64,
    pub unsupported: bool,
}

/// Deterministic points inside the ROI sphere: the centre, then a Fibonacci
/// shell sequence with radii `r * ((i - 0.5) / (n - 1))^(1/3)`.
pub fn roi_lattice(roi: &Roi, n: usize) -> Result<Vec<Vec3>> {
    if n == 0 {
        return Err(Error::InvalidParameter("voxel_samples must be at least 1".into()));
    }
    let mut pts = vec![roi.center_mm];
    if n > 1 {
        let dirs = fibonacci_sphere(n - 1)?;
        for (i, d) in dirs.iter().enumerate() {
            let rad = roi.radius_mm * ((i as f64 + 0.5) / (n - 1) as f64).cbrt();
            pts.push(roi.center_mm + d.unit() * rad);
        }
    }
    Ok(pts)
}

fn point_gaps(point: &Vec3, grid: &DirectionGrid, sources: &[Vec3]) -> Result<Vec<f64>> {
    grid.directions.par_iter().map(|mu| directional_gap(point, mu, sources)).collect()
}

pub fn esr_report(
    chosen: &[usize],
    sources: &SourceSet,
    roi: &Roi,
    grid: &DirectionGrid,
    mask: &ValidityMask,
    p: f64,
    voxel_samples: usize,
) -> Result<EsrReport> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!("quantile level {p} outside (0, 1)")));
    }
    if mask.len() != sources.len() {
        return Err(Error::DimensionMismatch("mask and source set differ in length".into()));
    }
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty direction grid".into()));
    }
    let mut active = Vec::new();
    for &i in chosen {
        if i >= sources.len() {
            return Err(Error::InvalidInput(format!("selected source {i} out of range")));
        }
        if mask.valid[i] {
            active.push(sources.positions[i]);
        }
    }
    let two_r = 2.0 * roi.radius_mm;
    let mut points = Vec::new();
    let mut center_gaps = Vec::new();
    for (n, pos) in roi_lattice(roi, voxel_samples)?.into_iter().enumerate() {
        let gaps = point_gaps(&pos, grid, &active)?;
        let mg = mean(&gaps);
        let qg = gap_quantile(&gaps, p)?;
        points.push(EsrPoint {
            position_mm: pos,
            mean_gap_rad: mg,
            quantile_gap_rad: qg,
            esr_mean_mm: two_r * mg,
            esr_quantile_mm: two_r * qg,
        });
        if n == 0 {
            center_gaps = gaps;
        }
    }
    let per_point: Vec<f64> = points.iter().map(|q| q.esr_mean_mm).collect();
    let c = &points[0];
    Ok(EsrReport {
        mean_gap_rad: c.mean_gap_rad,
        quantile_gap_rad: c.quantile_gap_rad,
        esr_mean_mm: c.esr_mean_mm,
        esr_quantile_mm: c.esr_quantile_mm,
        per_direction_gap_rad: center_gaps,
        p,
        roi_radius_mm: roi.radius_mm,
        voxel_mean_esr_mm: mean(&per_point),
        voxel_quantile_esr_mm: nearest_rank(&per_point, p)?,
        evaluation_points: points,
        unsupported: active.is_empty(),
    })
}
