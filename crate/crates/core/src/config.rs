//! Run configuration. Every field has a default; JSON configs may give any subset.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::SolverLimits;
use crate::geometry::Vec3;
use crate::multi_roi::Weighting;
use crate::scene::{Detector, OcclusionLevel, PhantomSpec, Roi};
use crate::validity::{ScanGeometry, DEFAULT_ALPHA_PERCENTILE, DEFAULT_ETA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Greedy,
    BinaryGreedy,
    Exact,
    ExactWorstcase,
    JointExact,
    JointGreedy,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Greedy,
        Method::BinaryGreedy,
        Method::Exact,
        Method::ExactWorstcase,
        Method::JointExact,
        Method::JointGreedy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Greedy => "greedy",
            Method::BinaryGreedy => "binary_greedy",
            Method::Exact => "exact",
            Method::ExactWorstcase => "exact_worstcase",
            Method::JointExact => "joint_exact",
            Method::JointGreedy => "joint_greedy",
        }
    }

    pub fn is_joint(self) -> bool {
        matches!(self, Method::JointExact | Method::JointGreedy)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub phantom: PhantomSpec,
    pub occlusion: OcclusionLevel,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { phantom: PhantomSpec::default(), occlusion: OcclusionLevel::None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub sid_mm: f64,
    pub sdd_mm: f64,
    pub detector_u: usize,
    pub detector_v: usize,
    pub pixel_pitch_mm: f64,
    /// Candidate source count.
    pub m: usize,
    pub isocenter_mm: Vec3,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            sid_mm: 2000.0,
            sdd_mm: 4000.0,
            detector_u: 256,
            detector_v: 256,
            pixel_pitch_mm: 0.9,
            m: 800,
            isocenter_mm: Vec3::zeros(),
        }
    }
}

impl GeometryConfig {
    pub fn scan(&self) -> ScanGeometry {
        ScanGeometry {
            detector: Detector {
                n_u: self.detector_u,
                n_v: self.detector_v,
                pitch_mm: self.pixel_pitch_mm,
                sdd_mm: self.sdd_mm,
            },
            isocenter: self.isocenter_mm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidityConfig {
    pub eta: f64,
    /// Fixed absorption threshold; calibrated on the unoccluded scene when absent.
    pub alpha: Option<f64>,
    pub alpha_percentile: f64,
}

impl Default for ValidityConfig {
    fn default() -> Self {
        ValidityConfig { eta: DEFAULT_ETA, alpha: None, alpha_percentile: DEFAULT_ALPHA_PERCENTILE }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub d_fuse_mm: f64,
    pub weighting: Weighting,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { d_fuse_mm: 0.0, weighting: Weighting::DistanceWeighted }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsrConfig {
    pub p: f64,
    pub voxel_samples: usize,
}

impl Default for EsrConfig {
    fn default() -> Self {
        EsrConfig { p: 0.95, voxel_samples: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for the phantom and the occluder placement.
    pub seed: u64,
    pub scene: SceneConfig,
    pub geometry: GeometryConfig,
    pub rois: Vec<Roi>,
    pub f_min_mm: f64,
    pub z_override: Option<usize>,
    pub validity: ValidityConfig,
    pub method: Method,
    pub k: usize,
    pub fusion: FusionConfig,
    pub limits: SolverLimits,
    pub esr: EsrConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            scene: SceneConfig::default(),
            geometry: GeometryConfig::default(),
            rois: vec![Roi { center_mm: Vec3::zeros(), radius_mm: 10.0 }],
            f_min_mm: 1.0,
            z_override: None,
            validity: ValidityConfig::default(),
            method: Method::Greedy,
            k: 20,
            fusion: FusionConfig::default(),
            limits: SolverLimits::default(),
            esr: EsrConfig::default(),
            output_dir: None,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        positive("sid_mm", g.sid_mm)?;
        positive("sdd_mm", g.sdd_mm)?;
        positive("pixel_pitch_mm", g.pixel_pitch_mm)?;
        positive("f_min_mm", self.f_min_mm)?;
        positive("spacing_mm", self.scene.phantom.spacing_mm)?;
        if g.detector_u == 0 || g.detector_v == 0 || g.m == 0 {
            return Err(Error::Config("detector size and source count must be positive".into()));
        }
        g.scan().detector.validate(g.sid_mm).map_err(|e| Error::Config(e.to_string()))?;
        if self.rois.is_empty() {
            return Err(Error::Config("at least one ROI is required".into()));
        }
        for (q, r) in self.rois.iter().enumerate() {
            positive(&format!("rois[{q}].radius_mm"), r.radius_mm)?;
            if !(2.0 * r.radius_mm > self.f_min_mm) {
                return Err(Error::Config(format!("rois[{q}]: f_min_mm must be below the ROI diameter")));
            }
        }
        if self.z_override == Some(0) {
            return Err(Error::Config("z_override must be positive".into()));
        }
        let v = &self.validity;
        if !(v.eta > 0.0 && v.eta <= 1.0) {
            return Err(Error::Config(format!("eta {} outside (0, 1]", v.eta)));
        }
        if !(v.alpha_percentile > 0.0 && v.alpha_percentile < 1.0) {
            return Err(Error::Config(format!("alpha_percentile {} outside (0, 1)", v.alpha_percentile)));
        }
        if let Some(a) = v.alpha {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::Config(format!("alpha {a} outside [0, 1)")));
            }
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.fusion.d_fuse_mm >= 0.0 && self.fusion.d_fuse_mm.is_finite()) {
            return Err(Error::Config("d_fuse_mm must be non-negative".into()));
        }
        positive("time_limit_s", self.limits.time_limit_s)?;
        if !(self.limits.gap_limit >= 0.0 && self.limits.gap_limit < 1.0) {
            return Err(Error::Config(format!("gap_limit {} outside [0, 1)", self.limits.gap_limit)));
        }
        if !(self.esr.p > 0.0 && self.esr.p < 1.0) {
            return Err(Error::Config(format!("esr.p {} outside (0, 1)", self.esr.p)));
        }
        if self.esr.voxel_samples == 0 {
            return Err(Error::Config("esr.voxel_samples must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn partial_config_and_errors() {
        let c = RunConfig::from_json(r#"{"k": 5, "method": "exact", "geometry": {"m": 40}}"#).unwrap();
        assert_eq!((c.k, c.method, c.geometry.m, c.geometry.sid_mm), (5, Method::Exact, 40, 2000.0));
        let e = RunConfig::from_json("{\n\"k\": 0\n}").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = RunConfig::from_json("{\n\"method\": \"annealing\"\n}").unwrap_err();
        assert!(e.to_string().contains("line 2"));
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"validity": {"eta": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"rois": []}"#).is_err());
        assert_eq!("joint_greedy".parse::<Method>().unwrap(), Method::JointGreedy);
    }
}
