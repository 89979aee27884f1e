//! Set Cover reductions to view selection, checked against exhaustive oracles.
//!
//! A Set Cover instance `(U, {S_i}, k)` maps to a view-selection instance
//! with voxels `V = T = U`, projection footprints `R_i = S_i` and threshold
//! `L = |U|`, and to a binary coverage matrix `B_ij = [j in S_i]` with `L = z`.

use rayon::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::{CoverageMatrix, Flavor, SparseRow};
use crate::error::{Error, Result};
use crate::exact::binomial;
use crate::objective::{column_sums, saturated_coverage};

/// Largest number of subsets an oracle will enumerate.
pub const ORACLE_LIMIT: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetCoverInstance {
    pub universe_size: usize,
    pub subsets: Vec<Vec<usize>>,
    pub budget: usize,
}

impl SetCoverInstance {
    pub fn validate(&self) -> Result<()> {
        if self.subsets.is_empty() {
            return Err(Error::InvalidInput("set cover instance has no subsets".into()));
        }
        for (i, s) in self.subsets.iter().enumerate() {
            if let Some(e) = s.iter().find(|&&e| e >= self.universe_size) {
                return Err(Error::InvalidInput(format!("subset {i} has element {e} outside the universe")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiCttopInstance {
    pub voxels: usize,
    pub projections: Vec<Vec<usize>>,
    pub roi: Vec<usize>,
    pub budget: usize,
    pub threshold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalInstance {
    pub matrix: CoverageMatrix,
    pub budget: usize,
    pub threshold: usize,
}

pub fn reduce_setcover_to_cttop(sc: &SetCoverInstance) -> Result<RoiCttopInstance> {
    sc.validate()?;
    Ok(RoiCttopInstance {
        voxels: sc.universe_size,
        projections: sc.subsets.clone(),
        roi: (0..sc.universe_size).collect(),
        budget: sc.budget,
        threshold: sc.universe_size,
    })
}

pub fn reduce_setcover_to_directional(sc: &SetCoverInstance) -> Result<DirectionalInstance> {
    sc.validate()?;
    let rows = sc
        .subsets
        .iter()
        .map(|s| {
            let mut cols: Vec<u32> = s.iter().map(|&e| e as u32).collect();
            cols.sort_unstable();
            cols.dedup();
            let vals = vec![1.0; cols.len()];
            SparseRow { cols, vals }
        })
        .collect();
    Ok(DirectionalInstance {
        matrix: CoverageMatrix::from_rows(Flavor::Binary, sc.universe_size, rows)?,
        budget: sc.budget,
        threshold: sc.universe_size,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionFlavor {
    Cttop,
    BinaryDirectional,
    SoftDirectional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ReducedInstance {
    Cttop(RoiCttopInstance),
    Directional(DirectionalInstance),
}

/// True if some subset of `0..m` of size `min(k, m)` satisfies `test`.
/// Every predicate used here is monotone, so larger sets never hurt.
fn exists_subset(m: usize, k: usize, test: &(dyn Fn(&[usize]) -> bool + Sync)) -> Result<bool> {
    let s = k.min(m);
    if binomial(m, s) > ORACLE_LIMIT {
        return Err(Error::TooLarge(format!("C({m}, {s}) subsets exceed the oracle limit")));
    }
    fn rec(m: usize, s: usize, start: usize, cur: &mut Vec<usize>, test: &(dyn Fn(&[usize]) -> bool + Sync)) -> bool {
        if cur.len() == s {
            return test(cur);
        }
        for i in start..=m - (s - cur.len()) {
            cur.push(i);
            if rec(m, s, i + 1, cur, test) {
                return true;
            }
            cur.pop();
        }
        false
    }
    Ok(rec(m, s, 0, &mut Vec::new(), test))
}

/// Does some choice of at most `budget` subsets cover the universe?
pub fn setcover_decide(sc: &SetCoverInstance) -> Result<bool> {
    sc.validate()?;
    let n = sc.universe_size;
    exists_subset(sc.subsets.len(), sc.budget, &|pick| {
        let mut hit = vec![false; n];
        for &i in pick {
            for &e in &sc.subsets[i] {
                hit[e] = true;
            }
        }
        hit.iter().all(|&h| h)
    })
}

/// Exhaustive decision on a reduced instance.
/// `Cttop`: some `<= k` projections cover at least `L` ROI voxels.
/// `BinaryDirectional`: at least `L` columns covered.
/// `SoftDirectional`: saturated coverage at least `L`.
pub fn brute_force_decide(instance: &ReducedInstance, flavor: DecisionFlavor) -> Result<bool> {
    match (instance, flavor) {
        (ReducedInstance::Cttop(c), DecisionFlavor::Cttop) => {
            let mut in_roi = vec![false; c.voxels];
            for &v in &c.roi {
                in_roi[v] = true;
            }
            exists_subset(c.projections.len(), c.budget, &|pick| {
                let mut hit = vec![false; c.voxels];
                for &i in pick {
                    for &v in &c.projections[i] {
                        hit[v] = true;
                    }
                }
                hit.iter().zip(&in_roi).filter(|(h, r)| **h && **r).count() >= c.threshold
            })
        }
        (ReducedInstance::Directional(d), DecisionFlavor::BinaryDirectional) => {
            exists_subset(d.matrix.m, d.budget, &|pick| {
                column_sums(&d.matrix, pick).iter().filter(|&&s| s > 0.0).count() >= d.threshold
            })
        }
        (ReducedInstance::Directional(d), DecisionFlavor::SoftDirectional) => {
            let theta = d.threshold as f64;
            exists_subset(d.matrix.m, d.budget, &|pick| saturated_coverage(&d.matrix, pick) >= theta)
        }
        _ => Err(Error::InvalidInput(format!("{flavor:?} decision does not apply to this instance"))),
    }
}

/// Random Set Cover instance; each element joins each subset with probability `density`.
pub fn random_setcover(n: usize, m: usize, k: usize, density: f64, seed: u64) -> Result<SetCoverInstance> {
    if n == 0 || m == 0 || k == 0 {
        return Err(Error::InvalidParameter("n, m and k must be positive".into()));
    }
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::InvalidParameter(format!("density {density} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subsets = (0..m).map(|_| (0..n).filter(|_| rng.gen_bool(density)).collect()).collect();
    Ok(SetCoverInstance { universe_size: n, subsets, budget: k })
}

/// Generator settings for reduction batches; sizes are drawn uniformly from `1..=max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorParams {
    pub count: usize,
    pub max_n: usize,
    pub max_m: usize,
    pub max_k: usize,
    pub density: f64,
    pub seed: u64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams { count: 1000, max_n: 10, max_m: 10, max_k: 4, density: 0.3, seed: 0 }
    }
}

pub fn generate_batch(p: &GeneratorParams) -> Result<Vec<SetCoverInstance>> {
    if p.max_n == 0 || p.max_m == 0 || p.max_k == 0 {
        return Err(Error::InvalidParameter("generator maxima must be positive".into()));
    }
    (0..p.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64));
            let n = rng.gen_range(1..=p.max_n);
            let m = rng.gen_range(1..=p.max_m);
            let k = rng.gen_range(1..=p.max_k);
            random_setcover(n, m, k, p.density, rng.gen())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub setcover: bool,
    pub cttop: bool,
    pub binary_directional: bool,
    pub soft_directional: bool,
}

impl InstanceOutcome {
    pub fn agrees(&self) -> bool {
        self.cttop == self.setcover && self.binary_directional == self.setcover && self.soft_directional == self.setcover
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub instances: usize,
    pub agree: usize,
    pub disagree: usize,
    pub yes_instances: usize,
    /// Indices of disagreeing instances.
    pub disagreements: Vec<usize>,
}

pub fn check_instance(sc: &SetCoverInstance) -> Result<InstanceOutcome> {
    let cttop = ReducedInstance::Cttop(reduce_setcover_to_cttop(sc)?);
    let dir = ReducedInstance::Directional(reduce_setcover_to_directional(sc)?);
    Ok(InstanceOutcome {
        setcover: setcover_decide(sc)?,
        cttop: brute_force_decide(&cttop, DecisionFlavor::Cttop)?,
        binary_directional: brute_force_decide(&dir, DecisionFlavor::BinaryDirectional)?,
        soft_directional: brute_force_decide(&dir, DecisionFlavor::SoftDirectional)?,
    })
}

pub fn check_equivalence(instances: &[SetCoverInstance]) -> Result<EquivalenceReport> {
    let outcomes: Vec<InstanceOutcome> = instances.par_iter().map(check_instance).collect::<Result<_>>()?;
    let disagreements: Vec<usize> = outcomes.iter().enumerate().filter(|(_, o)| !o.agrees()).map(|(i, _)| i).collect();
    Ok(EquivalenceReport {
        instances: outcomes.len(),
        agree: outcomes.len() - disagreements.len(),
        disagree: disagreements.len(),
        yes_instances: outcomes.iter().filter(|o| o.setcover).count(),
        disagreements,
    })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum InstanceFile {
    One(SetCoverInstance),
    Many(Vec<SetCoverInstance>),
}

/// Parses one instance object or an array of them.
pub fn parse_instances(text: &str) -> Result<Vec<SetCoverInstance>> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
    let parsed = match &value {
        serde_json::Value::Array(_) => serde_json::from_str::<Vec<SetCoverInstance>>(text).map(InstanceFile::Many),
        _ => serde_json::from_str::<SetCoverInstance>(text).map(InstanceFile::One),
    };
    let list = match parsed.map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))? {
        InstanceFile::One(i) => vec![i],
        InstanceFile::Many(v) => v,
    };
    for sc in &list {
        sc.validate()?;
    }
    Ok(list)
}

/// The three-element example: `U = {0, 1, 2}`, `S = {{0, 1}, {1, 2}, {2}}`, `k = 2`.
pub fn bundled_example() -> SetCoverInstance {
    SetCoverInstance { universe_size: 3, subsets: vec![vec![0, 1], vec![1, 2], vec![2]], budget: 2 }
}
