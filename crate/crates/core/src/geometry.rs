//! Unit-sphere direction grids, candidate source sampling, and the
//! resolution-driven tolerance and density formulas.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Smallest grid size returned by [`required_directions`].
pub const MIN_DIRECTIONS: usize = 16;

/// A unit vector on the sphere. Plane normals are sign-ambiguous; consumers
/// compare through `|dot|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Direction(Vec3);

impl Direction {
    /// Normalizes `v`. Fails on zero or non-finite input.
    pub fn new(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::Geometry(format!("cannot normalize vector {:?}", v.as_slice())));
        }
        Ok(Direction(v / n))
    }

    pub fn unit(&self) -> &Vec3 {
        &self.0
    }

    pub fn dot(&self, other: &Direction) -> f64 {
        self.0.dot(&other.0)
    }
}

/// Nyquist angular tolerance `f_min / (2 r)` in radians.
///
/// Inputs with `f_min >= 2 r` are rejected: the coverage band would span a
/// radian or more and every score degenerates.
pub fn angular_tolerance(f_min_mm: f64, roi_radius_mm: f64) -> Result<f64> {
    check_resolution_inputs(f_min_mm, roi_radius_mm)?;
    let tol = f_min_mm / (2.0 * roi_radius_mm);
    debug_assert!(tol < FRAC_PI_2);
    Ok(tol)
}

/// Spherical-cap estimate of the direction count, `ceil(16 r^2 / f_min^2)`,
/// clamped below at [`MIN_DIRECTIONS`].
///
/// Unlike [`angular_tolerance`] this accepts coarse targets with
/// `f_min >= 2 r`; they fall under the clamp.
pub fn required_directions(f_min_mm: f64, roi_radius_mm: f64) -> Result<usize> {
    check_positive(f_min_mm, roi_radius_mm)?;
    let z = (16.0 * roi_radius_mm * roi_radius_mm / (f_min_mm * f_min_mm)).ceil();
    if !z.is_finite() || z > u32::MAX as f64 {
        return Err(Error::InvalidParameter(format!(
            "direction count {z} is not representable"
        )));
    }
    Ok((z as usize).max(MIN_DIRECTIONS))
}

fn check_resolution_inputs(f_min_mm: f64, roi_radius_mm: f64) -> Result<()> {
    check_positive(f_min_mm, roi_radius_mm)?;
    if f_min_mm >= 2.0 * roi_radius_mm {
        return Err(Error::InvalidParameter(format!(
            "f_min {f_min_mm} mm must be smaller than the ROI diameter {} mm",
            2.0 * roi_radius_mm
        )));
    }
    Ok(())
}

fn check_positive(f_min_mm: f64, roi_radius_mm: f64) -> Result<()> {
    if !(f_min_mm > 0.0 && f_min_mm.is_finite()) {
        return Err(Error::InvalidParameter(format!("f_min must be positive, got {f_min_mm}")));
    }
    if !(roi_radius_mm > 0.0 && roi_radius_mm.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "ROI radius must be positive, got {roi_radius_mm}"
        )));
    }
    Ok(())
}

/// Golden-angle Fibonacci lattice with `z` points.
///
/// Point `i` has `cos(theta) = 1 - 2 (i + 0.5) / z` and longitude
/// `2 pi i (1 - 1/phi)`. No point sits on a pole.
pub fn fibonacci_sphere(z: usize) -> Result<Vec<Direction>> {
    if z == 0 {
        return Err(Error::InvalidParameter("fibonacci_sphere needs z >= 1".into()));
    }
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    let step = 2.0 * PI * (1.0 - 1.0 / golden);
    let n = z as f64;
    Ok((0..z)
        .map(|i| {
            let fi = i as f64;
            let cos_t = 1.0 - 2.0 * (fi + 0.5) / n;
            let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
            let phi = (step * fi).rem_euclid(2.0 * PI);
            let v = Vec3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t);
            Direction(v / v.norm())
        })
        .collect())
}

/// Sampled plane normals together with the tolerance they were sized for.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectionGrid {
    pub directions: Vec<Direction>,
    /// Angular tolerance (radians).
    pub tolerance_rad: f64,
    /// `sin(tolerance_rad)`, the dot-product band half-width.
    pub dot_tolerance: f64,
    pub f_min_mm: f64,
    pub roi_radius_mm: f64,
    /// Size suggested by [`required_directions`]; may differ from `len()` when overridden.
    pub formula_z: usize,
}

impl DirectionGrid {
    /// Fibonacci grid sized from the resolution target, or with exactly
    /// `z_override` points when given.
    pub fn for_resolution(f_min_mm: f64, roi_radius_mm: f64, z_override: Option<usize>) -> Result<Self> {
        let tolerance_rad = angular_tolerance(f_min_mm, roi_radius_mm)?;
        let formula_z = required_directions(f_min_mm, roi_radius_mm)?;
        let z = z_override.unwrap_or(formula_z);
        Ok(DirectionGrid {
            directions: fibonacci_sphere(z)?,
            tolerance_rad,
            dot_tolerance: tolerance_rad.sin(),
            f_min_mm,
            roi_radius_mm,
            formula_z,
        })
    }

    /// Grid over caller-supplied directions with an explicit angular tolerance.
    pub fn from_directions(directions: Vec<Direction>, tolerance_rad: f64) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::InvalidParameter("direction grid must be non-empty".into()));
        }
        if !(tolerance_rad > 0.0 && tolerance_rad < FRAC_PI_2) {
            return Err(Error::InvalidParameter(format!(
                "tolerance {tolerance_rad} rad outside (0, pi/2)"
            )));
        }
        let z = directions.len();
        Ok(DirectionGrid {
            directions,
            tolerance_rad,
            dot_tolerance: tolerance_rad.sin(),
            f_min_mm: f64::NAN,
            roi_radius_mm: f64::NAN,
            formula_z: z,
        })
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Candidate source positions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceSet {
    pub positions: Vec<Vec3>,
    /// Distance from the isocenter.
    pub radius_mm: f64,
}

impl SourceSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// `m` sources on a Fibonacci sphere of the given radius around `isocenter`.
pub fn fibonacci_source_sphere(m: usize, radius_mm: f64, isocenter: Vec3) -> Result<SourceSet> {
    if m == 0 {
        return Err(Error::InvalidParameter("need at least one source".into()));
    }
    if !(radius_mm > 0.0 && radius_mm.is_finite()) {
        return Err(Error::InvalidParameter(format!("source radius must be positive, got {radius_mm}")));
    }
    let positions = fibonacci_sphere(m)?
        .into_iter()
        .map(|d| isocenter + d.unit() * radius_mm)
        .collect();
    Ok(SourceSet { positions, radius_mm })
}
