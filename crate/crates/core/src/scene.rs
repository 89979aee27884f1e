//! Procedural voxel phantoms, occluder plates, the flat-panel detector model
//! and a monochromatic Beer-Lambert ray marcher.
//!
//! The projector exists only to decide view validity, so it favours
//! determinism over radiometric accuracy: fixed half-voxel steps with
//! nearest-neighbour lookups.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Aluminium at roughly 36 keV.
pub const ALUMINIUM_MU: f64 = 0.416;
pub const OCCLUDER_MU: f64 = 2.5;
pub const OCCLUDER_THICKNESS_MM: f64 = 14.0;

/// Scalar attenuation field on a regular isotropic grid.
///
/// `origin_mm` is the outer corner of voxel `(0, 0, 0)`; voxels are stored
/// x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub origin_mm: Vec3,
    mu: Vec<f64>,
}

/// JSON sidecar describing a raw volume dump.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub origin_mm: [f64; 3],
    /// Always `"f64le"`.
    pub dtype: String,
}

impl VoxelVolume {
    pub fn zeros(dims: [usize; 3], spacing_mm: f64, origin_mm: Vec3) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidParameter(format!("volume dims must be >= 1, got {dims:?}")));
        }
        if !(spacing_mm > 0.0 && spacing_mm.is_finite()) {
            return Err(Error::InvalidParameter(format!("voxel spacing must be positive, got {spacing_mm}")));
        }
        Ok(VoxelVolume {
            dims,
            spacing_mm,
            origin_mm,
            mu: vec![0.0; dims[0] * dims[1] * dims[2]],
        })
    }

    /// Empty volume centred on the world origin.
    pub fn centered(dims: [usize; 3], spacing_mm: f64) -> Result<Self> {
        let origin = -Vec3::new(dims[0] as f64, dims[1] as f64, dims[2] as f64) * (spacing_mm / 2.0);
        Self::zeros(dims, spacing_mm, origin)
    }

    pub fn from_values(dims: [usize; 3], spacing_mm: f64, origin_mm: Vec3, mu: Vec<f64>) -> Result<Self> {
        let mut v = Self::zeros(dims, spacing_mm, origin_mm)?;
        if mu.len() != v.mu.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {:?} volume",
                mu.len(),
                dims
            )));
        }
        if let Some(bad) = mu.iter().find(|x| !(**x >= 0.0 && x.is_finite())) {
            return Err(Error::InvalidInput(format!("attenuation must be finite and >= 0, got {bad}")));
        }
        v.mu = mu;
        Ok(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.mu
    }

    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.mu[self.index(i, j, k)]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin_mm + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.spacing_mm
    }

    /// Lower and upper world corners.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let ext = Vec3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * self.spacing_mm;
        (self.origin_mm, self.origin_mm + ext)
    }

    pub fn max_mu(&self) -> f64 {
        self.mu.iter().copied().fold(0.0, f64::max)
    }

    /// Sets every voxel whose centre satisfies `inside` to `value`.
    pub fn paint(&mut self, value: f64, inside: impl Fn(&Vec3) -> bool) {
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    if inside(&self.voxel_center(i, j, k)) {
                        let idx = self.index(i, j, k);
                        self.mu[idx] = value;
                    }
                }
            }
        }
    }

    /// World-space box spanned by voxels with positive attenuation.
    pub fn object_bbox(&self) -> Option<(Vec3, Vec3)> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    if self.get(i, j, k) > 0.0 {
                        any = true;
                        for (a, c) in [i, j, k].into_iter().enumerate() {
                            lo[a] = lo[a].min(c);
                            hi[a] = hi[a].max(c);
                        }
                    }
                }
            }
        }
        any.then(|| {
            let s = self.spacing_mm;
            let min = self.origin_mm + Vec3::new(lo[0] as f64, lo[1] as f64, lo[2] as f64) * s;
            let max = self.origin_mm + Vec3::new(hi[0] as f64 + 1.0, hi[1] as f64 + 1.0, hi[2] as f64 + 1.0) * s;
            (min, max)
        })
    }

    /// Line integral of attenuation along the segment `a -> b`, clipped to
    /// the volume box.
    pub fn line_integral(&self, a: &Vec3, b: &Vec3) -> f64 {
        let d = b - a;
        let len = d.norm();
        if len == 0.0 {
            return 0.0;
        }
        let (lo, hi) = self.bounds();
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for ax in 0..3 {
            if d[ax].abs() < 1e-15 {
                if a[ax] < lo[ax] || a[ax] > hi[ax] {
                    return 0.0;
                }
            } else {
                let inv = 1.0 / d[ax];
                let (mut ta, mut tb) = ((lo[ax] - a[ax]) * inv, (hi[ax] - a[ax]) * inv);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
            }
        }
        if t1 <= t0 {
            return 0.0;
        }
        let seg = (t1 - t0) * len;
        let n = (seg / (0.5 * self.spacing_mm)).ceil().max(1.0) as usize;
        let h = seg / n as f64;
        let unit = d / len;
        let start = a + unit * (t0 * len) - self.origin_mm;
        let inv_s = 1.0 / self.spacing_mm;
        let [nx, ny, nz] = self.dims;
        let mut sum = 0.0;
        for s in 0..n {
            let p = start + unit * ((s as f64 + 0.5) * h);
            let i = ((p.x * inv_s).floor().max(0.0) as usize).min(nx - 1);
            let j = ((p.y * inv_s).floor().max(0.0) as usize).min(ny - 1);
            let k = ((p.z * inv_s).floor().max(0.0) as usize).min(nz - 1);
            sum += self.mu[i + nx * (j + ny * k)];
        }
        sum * h
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader {
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            origin_mm: [self.origin_mm.x, self.origin_mm.y, self.origin_mm.z],
            dtype: "f64le".into(),
        }
    }

    /// Writes `<stem>.raw` (little-endian f64) and `<stem>.json`.
    pub fn write_raw(&self, stem: &Path) -> Result<()> {
        let mut raw = BufWriter::new(File::create(stem.with_extension("raw"))?);
        for v in &self.mu {
            raw.write_all(&v.to_le_bytes())?;
        }
        raw.flush()?;
        let header = File::create(stem.with_extension("json"))?;
        serde_json::to_writer_pretty(header, &self.header())?;
        Ok(())
    }

    pub fn read_raw(stem: &Path) -> Result<Self> {
        let header: VolumeHeader = serde_json::from_reader(BufReader::new(File::open(stem.with_extension("json"))?))?;
        if header.dtype != "f64le" {
            return Err(Error::InvalidInput(format!("unsupported volume dtype {}", header.dtype)));
        }
        let mut bytes = Vec::new();
        BufReader::new(File::open(stem.with_extension("raw"))?).read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::InvalidInput("raw volume length is not a multiple of 8".into()));
        }
        let mu = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let o = header.origin_mm;
        Self::from_values(header.dims, header.spacing_mm, Vec3::new(o[0], o[1], o[2]), mu)
    }
}

/// Flat-panel detector. Each source gets its own panel, perpendicular to the
/// source-isocenter axis at distance `sdd_mm` from the source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub n_u: usize,
    pub n_v: usize,
    pub pitch_mm: f64,
    pub sdd_mm: f64,
}

impl Detector {
    pub fn validate(&self, sid_mm: f64) -> Result<()> {
        if self.n_u == 0 || self.n_v == 0 {
            return Err(Error::InvalidParameter("detector needs at least one pixel per side".into()));
        }
        if !(self.pitch_mm > 0.0) {
            return Err(Error::InvalidParameter(format!("pixel pitch must be positive, got {}", self.pitch_mm)));
        }
        if !(self.sdd_mm > sid_mm) {
            return Err(Error::InvalidParameter(format!(
                "SDD {} mm must exceed SID {} mm",
                self.sdd_mm, sid_mm
            )));
        }
        Ok(())
    }

    pub fn half_width_mm(&self) -> f64 {
        self.n_u as f64 * self.pitch_mm / 2.0
    }

    pub fn half_height_mm(&self) -> f64 {
        self.n_v as f64 * self.pitch_mm / 2.0
    }

    /// Panel placement for a source looking at `isocenter`.
    pub fn pose(&self, source: Vec3, isocenter: Vec3) -> Result<DetectorPose> {
        let axis = isocenter - source;
        let n = axis.norm();
        if !(n > 0.0) {
            return Err(Error::Geometry("source coincides with the isocenter".into()));
        }
        let w = axis / n;
        let up = if w.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
        let e_u = w.cross(&up).normalize();
        let e_v = w.cross(&e_u);
        Ok(DetectorPose {
            detector: *self,
            source,
            axis: w,
            e_u,
            e_v,
        })
    }
}

/// A detector placed for one source.
#[derive(Debug, Clone, Copy)]
pub struct DetectorPose {
    pub detector: Detector,
    pub source: Vec3,
    /// Unit principal axis, source towards isocenter.
    pub axis: Vec3,
    pub e_u: Vec3,
    pub e_v: Vec3,
}

impl DetectorPose {
    /// Depth of `p` along the principal axis.
    pub fn depth(&self, p: &Vec3) -> f64 {
        (p - self.source).dot(&self.axis)
    }

    /// Pinhole projection to panel coordinates (mm from the panel centre).
    /// `None` for points at or behind the source plane.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        let rel = p - self.source;
        let depth = rel.dot(&self.axis);
        if depth <= 0.0 {
            return None;
        }
        let scale = self.detector.sdd_mm / depth;
        Some((rel.dot(&self.e_u) * scale, rel.dot(&self.e_v) * scale))
    }

    /// World position of a pixel centre.
    pub fn pixel_center(&self, iu: usize, iv: usize) -> Vec3 {
        let (u, v) = self.pixel_uv(iu, iv);
        self.source + self.axis * self.detector.sdd_mm + self.e_u * u + self.e_v * v
    }

    fn pixel_uv(&self, iu: usize, iv: usize) -> (f64, f64) {
        let d = &self.detector;
        (
            (iu as f64 + 0.5 - d.n_u as f64 / 2.0) * d.pitch_mm,
            (iv as f64 + 0.5 - d.n_v as f64 / 2.0) * d.pitch_mm,
        )
    }
}

/// Spherical region of interest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub center_mm: Vec3,
    pub radius_mm: f64,
}

impl Roi {
    pub fn new(center_mm: Vec3, radius_mm: f64) -> Result<Self> {
        if !(radius_mm > 0.0 && radius_mm.is_finite()) {
            return Err(Error::InvalidParameter(format!("ROI radius must be positive, got {radius_mm}")));
        }
        Ok(Roi { center_mm, radius_mm })
    }

    pub fn fits_inside(&self, volume: &VoxelVolume) -> bool {
        let (lo, hi) = volume.bounds();
        (0..3).all(|a| self.center_mm[a] - self.radius_mm >= lo[a] && self.center_mm[a] + self.radius_mm <= hi[a])
    }
}

/// Absorption values `1 - exp(-line integral)` for the detector pixels whose
/// rays hit the ROI sphere.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AbsorptionPatch {
    pub pixels: Vec<[u32; 2]>,
    pub values: Vec<f64>,
}

impl AbsorptionPatch {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Forward-projects the ROI footprint for one source.
///
/// Pixels are visited row-major (v outer, u inner) so the output order is
/// fixed.
pub fn project_roi_patch(volume: &VoxelVolume, pose: &DetectorPose, roi: &Roi) -> Result<AbsorptionPatch> {
    let r = roi.radius_mm;
    let c = roi.center_mm;
    let depth_c = pose.depth(&c);
    if depth_c <= r {
        return Err(Error::Geometry(format!(
            "ROI sphere reaches the source plane (depth {depth_c:.3} mm, radius {r} mm)"
        )));
    }
    let det = pose.detector;
    // Panel-space bounding box of the cube around the sphere; x/depth is
    // monotone on each coordinate so the corners bound it.
    let rel = c - pose.source;
    let (cu, cv) = (rel.dot(&pose.e_u), rel.dot(&pose.e_v));
    let mut u_rng = (f64::INFINITY, f64::NEG_INFINITY);
    let mut v_rng = (f64::INFINITY, f64::NEG_INFINITY);
    for dd in [depth_c - r, depth_c + r] {
        for off in [-r, r] {
            let u = det.sdd_mm * (cu + off) / dd;
            let v = det.sdd_mm * (cv + off) / dd;
            u_rng = (u_rng.0.min(u), u_rng.1.max(u));
            v_rng = (v_rng.0.min(v), v_rng.1.max(v));
        }
    }
    let to_index = |x: f64, n: usize| -> f64 { (x / det.pitch_mm + n as f64 / 2.0).floor() };
    let iu0 = to_index(u_rng.0, det.n_u).max(0.0) as usize;
    let iu1 = to_index(u_rng.1, det.n_u).min(det.n_u as f64 - 1.0);
    let iv0 = to_index(v_rng.0, det.n_v).max(0.0) as usize;
    let iv1 = to_index(v_rng.1, det.n_v).min(det.n_v as f64 - 1.0);
    let mut patch = AbsorptionPatch::default();
    if iu1 < 0.0 || iv1 < 0.0 {
        return Ok(patch);
    }
    let (iu1, iv1) = (iu1 as usize, iv1 as usize);
    for iv in iv0..=iv1 {
        for iu in iu0..=iu1 {
            let p = pose.pixel_center(iu, iv);
            let dir = p - pose.source;
            let t = rel.dot(&dir) / dir.norm_squared();
            let closest = pose.source + dir * t;
            if (closest - c).norm() <= r {
                let integral = volume.line_integral(&pose.source, &p);
                patch.pixels.push([iu as u32, iv as u32]);
                patch.values.push(1.0 - (-integral).exp());
            }
        }
    }
    Ok(patch)
}

/// Phantom recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomPreset {
    /// Aluminium block with seeded spherical and cylindrical voids.
    BlockWithVoids,
    /// User-supplied primitives, painted in order.
    Custom,
}

impl FromStr for PhantomPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block_with_voids" => Ok(PhantomPreset::BlockWithVoids),
            "custom" => Ok(PhantomPreset::Custom),
            other => Err(Error::Config(format!("unknown phantom preset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Primitive {
    Box { center: Vec3, half_extents: Vec3, mu: f64 },
    Sphere { center: Vec3, radius: f64, mu: f64 },
    /// Cylinder with its axis along `axis` (0 = x, 1 = y, 2 = z).
    Cylinder { center: Vec3, axis: usize, radius: f64, half_length: f64, mu: f64 },
}

impl Primitive {
    fn mu(&self) -> f64 {
        match *self {
            Primitive::Box { mu, .. } | Primitive::Sphere { mu, .. } | Primitive::Cylinder { mu, .. } => mu,
        }
    }

    fn contains(&self, p: &Vec3) -> bool {
        match *self {
            Primitive::Box { center, half_extents, .. } => {
                (0..3).all(|a| (p[a] - center[a]).abs() <= half_extents[a])
            }
            Primitive::Sphere { center, radius, .. } => (p - center).norm() <= radius,
            Primitive::Cylinder { center, axis, radius, half_length, .. } => {
                let d = p - center;
                let along = d[axis];
                let radial2 = d.norm_squared() - along * along;
                along.abs() <= half_length && radial2 <= radius * radius
            }
        }
    }
}

/// Volume layout and recipe for [`generate_phantom`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub preset: PhantomPreset,
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    /// Half edge of the aluminium block for [`PhantomPreset::BlockWithVoids`].
    pub block_half_extent_mm: f64,
    pub primitives: Vec<Primitive>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            preset: PhantomPreset::BlockWithVoids,
            dims: [80, 80, 80],
            spacing_mm: 1.0,
            block_half_extent_mm: 16.0,
            primitives: Vec::new(),
        }
    }
}

/// Builds a deterministic phantom centred on the world origin.
pub fn generate_phantom(seed: u64, spec: &PhantomSpec) -> Result<VoxelVolume> {
    let mut vol = VoxelVolume::centered(spec.dims, spec.spacing_mm)?;
    let primitives = match spec.preset {
        PhantomPreset::BlockWithVoids => block_with_voids(seed, spec.block_half_extent_mm, &vol)?,
        PhantomPreset::Custom => spec.primitives.clone(),
    };
    for prim in &primitives {
        if !(prim.mu() >= 0.0 && prim.mu().is_finite()) {
            return Err(Error::SceneConstruction(format!("primitive attenuation {} is invalid", prim.mu())));
        }
        vol.paint(prim.mu(), |p| prim.contains(p));
    }
    Ok(vol)
}

fn block_with_voids(seed: u64, half: f64, vol: &VoxelVolume) -> Result<Vec<Primitive>> {
    let (lo, hi) = vol.bounds();
    if !(half > 2.0) || (0..3).any(|a| -half < lo[a] || half > hi[a]) {
        return Err(Error::SceneConstruction(format!(
            "block half extent {half} mm does not fit the volume"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prims = vec![Primitive::Box {
        center: Vec3::zeros(),
        half_extents: Vec3::repeat(half),
        mu: ALUMINIUM_MU,
    }];
    let n_voids = rng.gen_range(3..=6);
    let inner = 0.7 * half;
    for _ in 0..n_voids {
        let center = Vec3::new(
            rng.gen_range(-inner..inner),
            rng.gen_range(-inner..inner),
            rng.gen_range(-inner..inner),
        );
        if rng.gen_bool(0.5) {
            prims.push(Primitive::Sphere { center, radius: rng.gen_range(0.08..0.25) * half, mu: 0.0 });
        } else {
            prims.push(Primitive::Cylinder {
                center,
                axis: rng.gen_range(0..3),
                radius: rng.gen_range(0.05..0.15) * half,
                half_length: rng.gen_range(0.4..1.2) * half,
                mu: 0.0,
            });
        }
    }
    Ok(prims)
}

/// Occluder stress level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionLevel {
    None,
    Mild,
    Moderate,
    Severe,
}

impl OcclusionLevel {
    pub const ALL: [OcclusionLevel; 4] = [
        OcclusionLevel::None,
        OcclusionLevel::Mild,
        OcclusionLevel::Moderate,
        OcclusionLevel::Severe,
    ];

    pub fn plate_count(self) -> usize {
        match self {
            OcclusionLevel::None => 0,
            OcclusionLevel::Mild => 2,
            OcclusionLevel::Moderate => 4,
            OcclusionLevel::Severe => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OcclusionLevel::None => "none",
            OcclusionLevel::Mild => "mild",
            OcclusionLevel::Moderate => "moderate",
            OcclusionLevel::Severe => "severe",
        }
    }
}

impl FromStr for OcclusionLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(OcclusionLevel::None),
            "mild" => Ok(OcclusionLevel::Mild),
            "moderate" => Ok(OcclusionLevel::Moderate),
            "severe" => Ok(OcclusionLevel::Severe),
            other => Err(Error::Config(format!("unknown occlusion level '{other}'"))),
        }
    }
}

/// Axis-aligned slab placed outside the object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccluderPlate {
    pub axis: usize,
    pub center_mm: Vec3,
    pub half_extents_mm: Vec3,
    pub mu_mm: f64,
}

impl OccluderPlate {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| (p[a] - self.center_mm[a]).abs() <= self.half_extents_mm[a])
    }
}

/// The first `n` plates of the fixed placement sequence.
///
/// Plate `p` sits on face `+/-axis` with `axis = p % 3` (positive side for
/// `p < 3` and `p >= 6`) and covers one lateral half of that face, split
/// along the next axis. Levels take prefixes of the sequence, so a heavier
/// level always contains the plates of a lighter one.
pub fn occluder_plates(volume: &VoxelVolume, n: usize, seed: u64) -> Result<Vec<OccluderPlate>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if n > 8 {
        return Err(Error::SceneConstruction(format!("at most 8 plates are supported, asked for {n}")));
    }
    let (lo, hi) = volume
        .object_bbox()
        .ok_or_else(|| Error::SceneConstruction("volume contains no object to occlude".into()))?;
    let (vlo, vhi) = volume.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f63_636c_7564_6572);
    let center = (lo + hi) / 2.0;
    let half = (hi - lo) / 2.0;
    let mut plates = Vec::with_capacity(n);
    for p in 0..n {
        let axis = p % 3;
        let positive = p < 3 || p >= 6;
        // Faces used twice (+x, +y) get the complementary lateral half.
        let upper = p < 3;
        let split = (axis + 1) % 3;
        let other = (axis + 2) % 3;
        let gap = rng.gen_range(2.0..4.0);
        let t = OCCLUDER_THICKNESS_MM / 2.0;
        let mut c = center;
        c[axis] = if positive { hi[axis] + gap + t } else { lo[axis] - gap - t };
        let reach_split = half[split] + 6.0;
        let reach_other = (half[other] + 6.0) * rng.gen_range(0.9..1.0);
        c[split] = if upper { center[split] + reach_split / 2.0 } else { center[split] - reach_split / 2.0 };
        let mut he = Vec3::zeros();
        he[axis] = t;
        he[split] = reach_split / 2.0;
        he[other] = reach_other;
        let plate = OccluderPlate { axis, center_mm: c, half_extents_mm: he, mu_mm: OCCLUDER_MU };
        if (0..3).any(|a| c[a] - he[a] < vlo[a] || c[a] + he[a] > vhi[a]) {
            return Err(Error::SceneConstruction(format!(
                "occluder plate {p} on axis {axis} does not fit inside the volume"
            )));
        }
        plates.push(plate);
    }
    Ok(plates)
}

/// Returns a copy of `volume` with the plates for `level` painted in.
pub fn apply_occlusion(volume: &VoxelVolume, level: OcclusionLevel, seed: u64) -> Result<VoxelVolume> {
    let plates = occluder_plates(volume, level.plate_count(), seed)?;
    let mut out = volume.clone();
    for plate in &plates {
        out.paint(plate.mu_mm, |p| plate.contains(p));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn table_detector() -> Detector {
        Detector { n_u: 256, n_v: 256, pitch_mm: 0.9, sdd_mm: 4000.0 }
    }

    /// Chord length of the segment a->b through an axis-aligned box, by
    /// dense bisection-free parametric sampling of the inside indicator.
    fn chord_oracle(lo: &Vec3, hi: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
        let n = 200_000;
        let len = (b - a).norm();
        let inside = (0..n)
            .filter(|s| {
                let p = a + (b - a) * ((*s as f64 + 0.5) / n as f64);
                (0..3).all(|ax| p[ax] >= lo[ax] && p[ax] <= hi[ax])
            })
            .count();
        len * inside as f64 / n as f64
    }

    #[test]
    fn uniform_slab_absorption() {
        let mu = 0.416;
        let vol = VoxelVolume::from_values([10, 4, 4], 1.0, Vec3::new(-5.0, -2.0, -2.0), vec![mu; 160]).unwrap();
        let integral = vol.line_integral(&Vec3::new(-100.0, 0.1, 0.2), &Vec3::new(100.0, 0.1, 0.2));
        let absorption = 1.0 - (-integral).exp();
        let expected = 1.0 - (-mu * 10.0f64).exp();
        assert!((expected - 0.9844).abs() < 1e-4);
        assert!((absorption - expected).abs() / expected < 0.01);
    }

    #[test]
    fn ray_march_matches_chord_oracle() {
        let mu = 0.3;
        let vol = VoxelVolume::from_values([20, 16, 12], 1.5, Vec3::new(-15.0, -12.0, -9.0), vec![mu; 20 * 16 * 12])
            .unwrap();
        let (lo, hi) = vol.bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        for _ in 0..200 {
            let a = Vec3::new(rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0));
            let b = Vec3::new(rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0));
            let chord = chord_oracle(&lo, &hi, &a, &b);
            if chord < 2.0 {
                continue;
            }
            let got = vol.line_integral(&a, &b);
            assert!((got - mu * chord).abs() <= 0.01 * mu * chord, "got {got} want {}", mu * chord);
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn empty_volume_gives_zero_patch() {
        let vol = VoxelVolume::centered([20, 20, 20], 1.0).unwrap();
        let pose = table_detector().pose(Vec3::new(2000.0, 0.0, 0.0), Vec3::zeros()).unwrap();
        let roi = Roi::new(Vec3::zeros(), 5.0).unwrap();
        let patch = project_roi_patch(&vol, &pose, &roi).unwrap();
        assert!(!patch.is_empty());
        assert!(patch.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_footprint_matches_magnified_disk() {
        let vol = VoxelVolume::centered([20, 20, 20], 1.0).unwrap();
        let pose = table_detector().pose(Vec3::new(0.0, 2000.0, 0.0), Vec3::zeros()).unwrap();
        let roi = Roi::new(Vec3::zeros(), 5.0).unwrap();
        let patch = project_roi_patch(&vol, &pose, &roi).unwrap();
        // Magnification 2 -> disk of radius ~10 mm -> ~ pi 100 / 0.81 pixels.
        let area = std::f64::consts::PI * 100.0 / 0.81;
        assert!((patch.len() as f64 - area).abs() / area < 0.05, "{} pixels", patch.len());
    }

    #[test]
    fn doubling_attenuation_increases_patch() {
        let spec = PhantomSpec { dims: [40, 40, 40], block_half_extent_mm: 8.0, ..Default::default() };
        let vol = generate_phantom(5, &spec).unwrap();
        let doubled =
            VoxelVolume::from_values(vol.dims, vol.spacing_mm, vol.origin_mm, vol.values().iter().map(|v| 2.0 * v).collect())
                .unwrap();
        let pose = table_detector().pose(Vec3::new(1200.0, 1200.0, 1131.0), Vec3::zeros()).unwrap();
        let roi = Roi::new(Vec3::zeros(), 4.0).unwrap();
        let a = project_roi_patch(&vol, &pose, &roi).unwrap();
        let b = project_roi_patch(&doubled, &pose, &roi).unwrap();
        assert_eq!(a.pixels, b.pixels);
        let mut nonzero = 0;
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((0.0..=1.0).contains(x) && (0.0..=1.0).contains(y));
            if *x > 0.0 && *x < 1.0 {
                assert!(y > x);
                nonzero += 1;
            }
        }
        assert!(nonzero > 0);
    }

    #[test]
    fn roi_at_source_plane_is_rejected() {
        let vol = VoxelVolume::centered([10, 10, 10], 1.0).unwrap();
        let pose = table_detector().pose(Vec3::new(3.0, 0.0, 0.0), Vec3::zeros()).unwrap();
        let roi = Roi::new(Vec3::zeros(), 4.0).unwrap();
        assert!(matches!(project_roi_patch(&vol, &pose, &roi), Err(Error::Geometry(_))));
    }

    #[test]
    fn phantom_is_deterministic_and_seeded() {
        let spec = PhantomSpec::default();
        let a = generate_phantom(0, &spec).unwrap();
        let b = generate_phantom(0, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.max_mu(), ALUMINIUM_MU);
        let c = generate_phantom(1, &spec).unwrap();
        let d = generate_phantom(2, &spec).unwrap();
        assert_ne!(c.values(), d.values());
        assert!("block_with_voids".parse::<PhantomPreset>().is_ok());
        assert!("teapot".parse::<PhantomPreset>().is_err());
    }

    #[test]
    fn custom_phantom_paints_primitives() {
        let spec = PhantomSpec {
            preset: PhantomPreset::Custom,
            dims: [20, 20, 20],
            primitives: vec![
                Primitive::Box { center: Vec3::zeros(), half_extents: Vec3::repeat(5.0), mu: 0.2 },
                Primitive::Sphere { center: Vec3::zeros(), radius: 2.0, mu: 0.0 },
            ],
            ..Default::default()
        };
        let v = generate_phantom(0, &spec).unwrap();
        assert_eq!(v.get(10, 10, 10), 0.0);
        assert_eq!(v.get(13, 10, 10), 0.2);
        assert_eq!(v.get(0, 0, 0), 0.0);
    }

    #[test]
    fn occlusion_levels() {
        let base = generate_phantom(0, &PhantomSpec::default()).unwrap();
        assert_eq!(apply_occlusion(&base, OcclusionLevel::None, 0).unwrap(), base);
        let severe = apply_occlusion(&base, OcclusionLevel::Severe, 0).unwrap();
        let plates = occluder_plates(&base, 8, 0).unwrap();
        assert_eq!(plates.len(), 8);
        let (lo, hi) = base.object_bbox().unwrap();
        for plate in &plates {
            let a = plate.axis;
            assert_eq!(plate.half_extents_mm[a] * 2.0, OCCLUDER_THICKNESS_MM);
            let near = plate.center_mm[a].abs() - plate.half_extents_mm[a];
            assert!(near > hi[a].max(-lo[a]));
        }
        let mut plate_voxels = 0;
        for (x, y) in base.values().iter().zip(severe.values()) {
            if *x > 0.0 {
                assert_eq!(x, y, "object voxels untouched");
            } else if *y > 0.0 {
                assert_eq!(*y, OCCLUDER_MU);
                plate_voxels += 1;
            }
        }
        assert!(plate_voxels > 0);
        // Heavier levels contain the lighter ones.
        let mild = apply_occlusion(&base, OcclusionLevel::Mild, 0).unwrap();
        for (m, s) in mild.values().iter().zip(severe.values()) {
            assert!(s >= m);
        }
    }

    #[test]
    fn plates_that_do_not_fit_are_errors() {
        let spec = PhantomSpec { dims: [36, 36, 36], ..Default::default() };
        let base = generate_phantom(0, &spec).unwrap();
        assert!(matches!(
            apply_occlusion(&base, OcclusionLevel::Mild, 0),
            Err(Error::SceneConstruction(_))
        ));
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec { dims: [12, 10, 8], block_half_extent_mm: 3.0, ..Default::default() };
        let v = generate_phantom(9, &spec).unwrap();
        let stem = dir.path().join("vol");
        v.write_raw(&stem).unwrap();
        assert_eq!(VoxelVolume::read_raw(&stem).unwrap(), v);
    }
}
