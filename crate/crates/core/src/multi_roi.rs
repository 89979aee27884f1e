//! Joint selection for several ROIs sharing one view budget.
//!
//! ROIs are grouped by single linkage on centre distance. Each cluster is
//! scored at its centroid with an inflated radius, so every member sphere
//! lies inside the cluster sphere.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coverage::{build_matrix, CoverageMatrix, Flavor};
use crate::error::{Error, Result};
use crate::exact::{exact_objective, ExactResult, SolverLimits};
use crate::geometry::{DirectionGrid, SourceSet, Vec3};
use crate::greedy::{greedy_objective, Selection};
use crate::objective::Objective;
use crate::scene::Roi;
use crate::validity::ValidityMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `w_c = |C_c|`.
    #[default]
    DistanceWeighted,
    /// All ROIs in one cluster with weight 1.
    Uniform,
    /// Every cluster weighted 1.
    None,
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distance_weighted" => Ok(Weighting::DistanceWeighted),
            "uniform" => Ok(Weighting::Uniform),
            "none" => Ok(Weighting::None),
            _ => Err(Error::Config(format!("unknown weighting '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// Ascending ROI indices.
    pub members: Vec<usize>,
    pub centroid_mm: Vec3,
    pub effective_radius_mm: f64,
    pub weight: f64,
}

fn cluster_of(rois: &[Roi], members: Vec<usize>, weight: f64) -> Cluster {
    let n = members.len() as f64;
    let centroid = members.iter().map(|&q| rois[q].center_mm).sum::<Vec3>() / n;
    let r = members.iter().map(|&q| rois[q].radius_mm).fold(0.0, f64::max);
    let spread = members.iter().map(|&q| (rois[q].center_mm - centroid).norm()).fold(0.0, f64::max);
    Cluster { members, centroid_mm: centroid, effective_radius_mm: r + spread, weight }
}

/// Single-linkage clusters under centre distance `<= d_fuse`, ordered by
/// smallest member, weighted `|C_c|`.
pub fn fuse_rois(rois: &[Roi], d_fuse: f64) -> Result<Vec<Cluster>> {
    if rois.is_empty() {
        return Err(Error::InvalidInput("no ROIs to fuse".into()));
    }
    if !(d_fuse >= 0.0 && d_fuse.is_finite()) {
        return Err(Error::InvalidParameter(format!("d_fuse {d_fuse} must be non-negative")));
    }
    let n = rois.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for a in 0..n {
        for b in a + 1..n {
            if (rois[a].center_mm - rois[b].center_mm).norm() <= d_fuse {
                let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for q in 0..n {
        let r = root(&mut parent, q);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(q);
    }
    Ok(groups.into_iter().map(|g| {
        let w = g.len() as f64;
        cluster_of(rois, g, w)
    }).collect())
}

/// Clusters for a weighting strategy.
pub fn clusters_for(rois: &[Roi], d_fuse: f64, weighting: Weighting) -> Result<Vec<Cluster>> {
    let mut clusters = fuse_rois(rois, d_fuse)?;
    match weighting {
        Weighting::DistanceWeighted => {}
        Weighting::None => clusters.iter_mut().for_each(|c| c.weight = 1.0),
        Weighting::Uniform => clusters = vec![cluster_of(rois, (0..rois.len()).collect(), 1.0)],
    }
    Ok(clusters)
}

#[derive(Debug, Clone)]
pub struct JointInstance {
    pub clusters: Vec<Cluster>,
    pub matrices: Vec<CoverageMatrix>,
    pub grids: Vec<Option<DirectionGrid>>,
    pub k: usize,
    pub weighting: Weighting,
}

impl JointInstance {
    /// Instance over prebuilt matrices (one per cluster).
    pub fn from_parts(clusters: Vec<Cluster>, matrices: Vec<CoverageMatrix>, k: usize, weighting: Weighting) -> Result<Self> {
        if clusters.len() != matrices.len() || clusters.is_empty() {
            return Err(Error::DimensionMismatch("need one matrix per cluster".into()));
        }
        let grids = vec![None; clusters.len()];
        let inst = JointInstance { clusters, matrices, grids, k, weighting };
        inst.objective()?;
        Ok(inst)
    }

    /// Builds each cluster's grid from its effective radius and its matrix
    /// at the centroid under the conjunction of member masks.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        rois: &[Roi],
        masks: &[ValidityMask],
        sources: &SourceSet,
        f_min_mm: f64,
        z_override: Option<usize>,
        d_fuse: f64,
        weighting: Weighting,
        flavor: Flavor,
        k: usize,
    ) -> Result<Self> {
        if masks.len() != rois.len() {
            return Err(Error::DimensionMismatch("need one validity mask per ROI".into()));
        }
        let clusters = clusters_for(rois, d_fuse, weighting)?;
        let built: Vec<(DirectionGrid, CoverageMatrix)> = clusters
            .par_iter()
            .map(|c| {
                let grid = DirectionGrid::for_resolution(f_min_mm, c.effective_radius_mm, z_override)?;
                let mut mask = masks[c.members[0]].clone();
                for &q in &c.members[1..] {
                    mask = mask.intersect(&masks[q])?;
                }
                let a = build_matrix(flavor, sources, &c.centroid_mm, &grid, &mask)?;
                Ok((grid, a))
            })
            .collect::<Result<_>>()?;
        let (grids, matrices): (Vec<_>, Vec<_>) = built.into_iter().map(|(g, a)| (Some(g), a)).unzip();
        Ok(JointInstance { clusters, matrices, grids, k, weighting })
    }

    pub fn objective(&self) -> Result<Objective<'_>> {
        Objective::weighted(self.clusters.iter().map(|c| c.weight).zip(self.matrices.iter()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub members: Vec<usize>,
    pub centroid_mm: Vec3,
    pub effective_radius_mm: f64,
    pub weight: f64,
    pub z: usize,
    /// Unweighted `f_sat` of the shared selection on this cluster.
    pub objective: f64,
}

fn reports(inst: &JointInstance, chosen: &[usize]) -> Result<Vec<ClusterReport>> {
    let per = inst.objective()?.breakdown(chosen);
    Ok(inst
        .clusters
        .iter()
        .zip(&inst.matrices)
        .zip(per)
        .map(|((c, a), f)| ClusterReport {
            members: c.members.clone(),
            centroid_mm: c.centroid_mm,
            effective_radius_mm: c.effective_radius_mm,
            weight: c.weight,
            z: a.z,
            objective: f,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointExact {
    pub result: ExactResult,
    pub clusters: Vec<ClusterReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointGreedy {
    pub selection: Selection,
    pub clusters: Vec<ClusterReport>,
}

pub fn joint_exact_select(inst: &JointInstance, limits: &SolverLimits, warm_start: Option<&Selection>) -> Result<JointExact> {
    let result = exact_objective(&inst.objective()?, inst.k, limits, warm_start)?;
    let clusters = reports(inst, &result.chosen)?;
    Ok(JointExact { result, clusters })
}

pub fn joint_greedy_select(inst: &JointInstance) -> Result<JointGreedy> {
    let selection = greedy_objective(&inst.objective()?, inst.k)?;
    let clusters = reports(inst, &selection.chosen)?;
    Ok(JointGreedy { selection, clusters })
}
