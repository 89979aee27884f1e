//! End-to-end runs: scene, validity, matrices, selection, readouts, ESR, and
//! the files a run leaves behind.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Method, RunConfig};
use crate::coverage::{build_matrix, CoverageMatrix, Flavor};
use crate::error::{Error, Result};
use crate::esr::{esr_report, EsrReport};
use crate::exact::{exact_select, exact_worstcase_select, ExactResult, SearchKind, SolveStatus};
use crate::geometry::{fibonacci_source_sphere, DirectionGrid, SourceSet};
use crate::greedy::{binary_greedy_select, greedy_select, Selection};
use crate::metrics::{cross_evaluate, CoverageReadout};
use crate::multi_roi::{joint_exact_select, joint_greedy_select, ClusterReport, JointInstance};
use crate::objective::saturated_coverage;
use crate::scene::{apply_occlusion, generate_phantom, OcclusionLevel, Roi, VoxelVolume};
use crate::validity::{calibrate_alpha_from_patches, calibrate_alpha_per_roi, RoiPatches, ScanGeometry, ValidityMask, ValiditySummary};

/// Environment variable holding the worker thread count.
pub const WORKERS_ENV: &str = "TRAJSEL_WORKERS";

/// Worker count from [`WORKERS_ENV`], if set to a positive integer.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{WORKERS_ENV} must be a positive integer, got '{s}'"))),
        },
    }
}

/// Runs `f` on a dedicated pool of `workers` threads (the global pool when `None`).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?
            .install(f),
    }
}

/// The unoccluded phantom and the scene actually scanned.
pub fn build_volumes(cfg: &RunConfig, level: OcclusionLevel) -> Result<(VoxelVolume, VoxelVolume)> {
    let base = generate_phantom(cfg.seed, &cfg.scene.phantom)?;
    let occluded = apply_occlusion(&base, level, cfg.seed)?;
    Ok((base, occluded))
}

pub fn sources_for(cfg: &RunConfig) -> Result<SourceSet> {
    fibonacci_source_sphere(cfg.geometry.m, cfg.geometry.sid_mm, cfg.geometry.isocenter_mm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaInfo {
    pub value: f64,
    /// True when derived from the unoccluded scene rather than fixed in the config.
    pub calibrated: bool,
    pub percentile: f64,
    /// Per-ROI percentiles of the same pooled data, for reference.
    pub per_roi: Vec<f64>,
}

/// Alpha from the config, or the pooled nearest-rank percentile of
/// absorption values on the unoccluded scene.
pub fn calibrate(cfg: &RunConfig, baseline: &VoxelVolume, sources: &SourceSet) -> Result<AlphaInfo> {
    let p = cfg.validity.alpha_percentile;
    if let Some(a) = cfg.validity.alpha {
        return Ok(AlphaInfo { value: a, calibrated: false, percentile: p, per_roi: Vec::new() });
    }
    let scan = cfg.geometry.scan();
    let patches: Vec<RoiPatches> =
        cfg.rois.iter().map(|roi| RoiPatches::compute(baseline, &scan, sources, roi)).collect::<Result<_>>()?;
    Ok(AlphaInfo {
        value: calibrate_alpha_from_patches(&patches, p)?,
        calibrated: true,
        percentile: p,
        per_roi: calibrate_alpha_per_roi(&patches, p).unwrap_or_default(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub occlusion: OcclusionLevel,
    pub plates: usize,
    pub max_mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub z: usize,
    pub formula_z: usize,
    pub tolerance_rad: f64,
    pub theta_max_deg: f64,
    pub dot_tolerance: f64,
}

impl From<&DirectionGrid> for GridInfo {
    fn from(g: &DirectionGrid) -> Self {
        GridInfo {
            z: g.len(),
            formula_z: g.formula_z,
            tolerance_rad: g.tolerance_rad,
            theta_max_deg: g.tolerance_rad.to_degrees(),
            dot_tolerance: g.dot_tolerance,
        }
    }
}

/// Scene, masks, grids and matrices for one occlusion level; shared by all selections on it.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cache_key: String,
    pub scene: SceneSummary,
    pub sources: SourceSet,
    pub scan: ScanGeometry,
    pub rois: Vec<Roi>,
    pub alpha: AlphaInfo,
    /// One mask per configured ROI.
    pub masks: Vec<ValidityMask>,
    /// ROIs with at least one valid source, in config order.
    pub included: Vec<usize>,
    pub excluded: Vec<usize>,
    /// Indexed like `included`.
    pub grids: Vec<DirectionGrid>,
    pub soft: Vec<CoverageMatrix>,
    pub binary: Vec<CoverageMatrix>,
    pub timings: BTreeMap<String, f64>,
}

/// Content hash of everything that determines the prepared matrices.
pub fn cache_key(cfg: &RunConfig, level: OcclusionLevel, alpha: f64) -> String {
    let key = serde_json::json!({
        "seed": cfg.seed,
        "phantom": cfg.scene.phantom,
        "occlusion": level,
        "geometry": cfg.geometry,
        "rois": cfg.rois,
        "f_min_mm": cfg.f_min_mm,
        "z_override": cfg.z_override,
        "eta": cfg.validity.eta,
        "alpha": alpha,
    });
    hex::encode(Sha256::digest(key.to_string().as_bytes()))
}

/// Builds everything up to the coverage matrices. `alpha` overrides calibration (used by sweeps).
pub fn prepare(cfg: &RunConfig, level: OcclusionLevel, alpha: Option<AlphaInfo>) -> Result<Prepared> {
    cfg.validate()?;
    let mut timings = BTreeMap::new();
    let t = Instant::now();
    let (base, vol) = build_volumes(cfg, level)?;
    let sources = sources_for(cfg)?;
    let scan = cfg.geometry.scan();
    timings.insert("scene_s".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let alpha = match alpha {
        Some(a) => a,
        None => calibrate(cfg, &base, &sources)?,
    };
    timings.insert("calibration_s".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let masks: Vec<ValidityMask> = cfg
        .rois
        .iter()
        .map(|roi| RoiPatches::compute(&vol, &scan, &sources, roi)?.mask(alpha.value, cfg.validity.eta))
        .collect::<Result<_>>()?;
    timings.insert("validity_s".into(), t.elapsed().as_secs_f64());
    let (included, excluded): (Vec<usize>, Vec<usize>) = (0..cfg.rois.len()).partition(|&q| masks[q].valid_count() > 0);
    if included.is_empty() {
        return Err(Error::InfeasibleScene("no ROI has a valid candidate source".into()));
    }

    let t = Instant::now();
    let built: Vec<(DirectionGrid, CoverageMatrix, CoverageMatrix)> = included
        .iter()
        .map(|&q| {
            let roi = &cfg.rois[q];
            let grid = DirectionGrid::for_resolution(cfg.f_min_mm, roi.radius_mm, cfg.z_override)?;
            let a = build_matrix(Flavor::Soft, &sources, &roi.center_mm, &grid, &masks[q])?;
            let b = build_matrix(Flavor::Binary, &sources, &roi.center_mm, &grid, &masks[q])?;
            Ok((grid, a, b))
        })
        .collect::<Result<_>>()?;
    timings.insert("matrices_s".into(), t.elapsed().as_secs_f64());
    let mut grids = Vec::new();
    let mut soft = Vec::new();
    let mut binary = Vec::new();
    for (g, a, b) in built {
        grids.push(g);
        soft.push(a);
        binary.push(b);
    }
    Ok(Prepared {
        cache_key: cache_key(cfg, level, alpha.value),
        scene: SceneSummary {
            dims: vol.dims,
            spacing_mm: vol.spacing_mm,
            occlusion: level,
            plates: level.plate_count(),
            max_mu: vol.max_mu(),
        },
        sources,
        scan,
        rois: cfg.rois.clone(),
        alpha,
        masks,
        included,
        excluded,
        grids,
        soft,
        binary,
        timings,
    })
}

impl Prepared {
    pub fn validity(&self) -> ValidityReport {
        let per_roi: Vec<ValiditySummary> = self.masks.iter().map(ValidityMask::summary).collect();
        let mean = per_roi.iter().map(|s| s.valid_fraction).sum::<f64>() / per_roi.len() as f64;
        ValidityReport { per_roi, mean_valid_fraction: mean, excluded_rois: self.excluded.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub per_roi: Vec<ValiditySummary>,
    pub mean_valid_fraction: f64,
    /// ROIs without any valid source; they take no part in selection.
    pub excluded_rois: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub upper_bound: f64,
    pub gap: f64,
    pub status: SolveStatus,
    pub node_count: u64,
    pub warm_start_used: bool,
    pub search: SearchKind,
}

impl From<&ExactResult> for Certificate {
    fn from(r: &ExactResult) -> Self {
        Certificate {
            upper_bound: r.upper_bound,
            gap: r.gap,
            status: r.status,
            node_count: r.node_count,
            warm_start_used: r.warm_start_used,
            search: r.search,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCaseInfo {
    pub t_value: f64,
    pub excluded_columns: usize,
    pub tiebreak_mean: f64,
    pub status: SolveStatus,
    pub node_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub method: Method,
    /// Matrix flavor the selection was optimized on.
    pub flavor: Flavor,
    /// Ascending for exact methods, pick order for greedy ones.
    pub chosen: Vec<usize>,
    /// Objective on the optimized matrix of this ROI (count of covered directions for binary).
    pub objective: f64,
    pub per_step_gains: Vec<f64>,
    pub budget: usize,
    pub unused_budget: usize,
    pub certificate: Option<Certificate>,
    pub worstcase: Option<WorstCaseInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiResult {
    pub roi_index: usize,
    pub roi: Roi,
    pub grid: GridInfo,
    pub selection: SelectionRecord,
    pub readout: CoverageReadout,
    pub esr: EsrReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSummary {
    pub objective: f64,
    pub chosen: Vec<usize>,
    pub per_step_gains: Vec<f64>,
    pub certificate: Option<Certificate>,
    /// Member indices refer to the configured ROI list.
    pub clusters: Vec<ClusterReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub cache_key: String,
    pub scene: SceneSummary,
    pub alpha: AlphaInfo,
    pub validity: ValidityReport,
    pub rois: Vec<RoiResult>,
    pub joint: Option<JointSummary>,
    /// Wall-clock seconds per stage; the only non-deterministic part of a report.
    pub timings: BTreeMap<String, f64>,
}

impl RunReport {
    /// JSON of the report with timings removed.
    pub fn canonical_json(&self) -> Result<String> {
        let mut r = self.clone();
        r.timings.clear();
        Ok(serde_json::to_string_pretty(&r)?)
    }
}

fn no_incumbent(r: &ExactResult, a: &CoverageMatrix) -> bool {
    r.status == SolveStatus::TimeLimit && r.chosen.is_empty() && !a.is_empty()
}

fn record_from_selection(method: Method, s: &Selection) -> SelectionRecord {
    SelectionRecord {
        method,
        flavor: s.matrix_flavor,
        chosen: s.chosen.clone(),
        objective: s.objective,
        per_step_gains: s.per_step_gains.clone(),
        budget: s.budget,
        unused_budget: s.unused_budget(),
        certificate: None,
        worstcase: None,
    }
}

/// Runs the configured method for one included ROI (position `pos` in `prep.included`).
fn select_single(prep: &Prepared, cfg: &RunConfig, pos: usize) -> Result<SelectionRecord> {
    let a = &prep.soft[pos];
    let k = cfg.k;
    Ok(match cfg.method {
        Method::Greedy => record_from_selection(Method::Greedy, &greedy_select(a, k)?),
        Method::BinaryGreedy => record_from_selection(Method::BinaryGreedy, &binary_greedy_select(&prep.binary[pos], k)?),
        Method::Exact => {
            let warm = greedy_select(a, k)?;
            let r = exact_select(a, k, &cfg.limits, Some(&warm))?;
            if no_incumbent(&r, a) {
                return Err(Error::NoIncumbent);
            }
            SelectionRecord {
                method: Method::Exact,
                flavor: Flavor::Soft,
                unused_budget: k - r.chosen.len(),
                chosen: r.chosen.clone(),
                objective: r.objective,
                per_step_gains: Vec::new(),
                budget: k,
                certificate: Some((&r).into()),
                worstcase: None,
            }
        }
        Method::ExactWorstcase => {
            let r = exact_worstcase_select(a, k, true, &cfg.limits)?;
            SelectionRecord {
                method: Method::ExactWorstcase,
                flavor: Flavor::Soft,
                unused_budget: k - r.chosen.len(),
                objective: saturated_coverage(a, &r.chosen),
                chosen: r.chosen.clone(),
                per_step_gains: Vec::new(),
                budget: k,
                certificate: None,
                worstcase: Some(WorstCaseInfo {
                    t_value: r.t_value,
                    excluded_columns: r.excluded_columns.len(),
                    tiebreak_mean: r.tiebreak_mean,
                    status: r.status,
                    node_count: r.node_count,
                }),
            }
        }
        Method::JointExact | Method::JointGreedy => unreachable!("joint methods are handled by select_joint"),
    })
}

fn select_joint(prep: &Prepared, cfg: &RunConfig) -> Result<JointSummary> {
    let rois: Vec<Roi> = prep.included.iter().map(|&q| prep.rois[q]).collect();
    let masks: Vec<ValidityMask> = prep.included.iter().map(|&q| prep.masks[q].clone()).collect();
    let inst = JointInstance::build(
        &rois,
        &masks,
        &prep.sources,
        cfg.f_min_mm,
        cfg.z_override,
        cfg.fusion.d_fuse_mm,
        cfg.fusion.weighting,
        Flavor::Soft,
        cfg.k,
    )?;
    let greedy = joint_greedy_select(&inst)?;
    let (objective, chosen, gains, certificate, mut clusters) = if cfg.method == Method::JointExact {
        let r = joint_exact_select(&inst, &cfg.limits, Some(&greedy.selection))?;
        if r.result.status == SolveStatus::TimeLimit && r.result.chosen.is_empty() && inst.matrices.iter().any(|a| !a.is_empty()) {
            return Err(Error::NoIncumbent);
        }
        (r.result.objective, r.result.chosen.clone(), Vec::new(), Some((&r.result).into()), r.clusters)
    } else {
        let s = greedy.selection;
        (s.objective, s.chosen, s.per_step_gains, None, greedy.clusters)
    };
    for c in &mut clusters {
        c.members = c.members.iter().map(|&i| prep.included[i]).collect();
    }
    Ok(JointSummary { objective, chosen, per_step_gains: gains, certificate, clusters })
}

/// Selection, readouts and ESR on a prepared scene.
pub fn run_on(prep: &Prepared, cfg: &RunConfig) -> Result<(Vec<RoiResult>, Option<JointSummary>, BTreeMap<String, f64>)> {
    let mut timings = BTreeMap::new();
    let t = Instant::now();
    let joint = if cfg.method.is_joint() { Some(select_joint(prep, cfg)?) } else { None };
    let records: Vec<SelectionRecord> = (0..prep.included.len())
        .map(|pos| match &joint {
            Some(j) => {
                let a = &prep.soft[pos];
                Ok(SelectionRecord {
                    method: cfg.method,
                    flavor: Flavor::Soft,
                    chosen: j.chosen.clone(),
                    objective: saturated_coverage(a, &j.chosen),
                    per_step_gains: j.per_step_gains.clone(),
                    budget: cfg.k,
                    unused_budget: cfg.k - j.chosen.len(),
                    certificate: j.certificate.clone(),
                    worstcase: None,
                })
            }
            None => select_single(prep, cfg, pos),
        })
        .collect::<Result<_>>()?;
    timings.insert("selection_s".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let results = prep
        .included
        .iter()
        .enumerate()
        .zip(records)
        .map(|((pos, &q), selection)| {
            let readout = cross_evaluate(&selection.chosen, selection.flavor, &prep.soft[pos], Some(&prep.binary[pos]))?;
            let esr = esr_report(
                &selection.chosen,
                &prep.sources,
                &prep.rois[q],
                &prep.grids[pos],
                &prep.masks[q],
                cfg.esr.p,
                cfg.esr.voxel_samples,
            )?;
            Ok(RoiResult { roi_index: q, roi: prep.rois[q], grid: (&prep.grids[pos]).into(), selection, readout, esr })
        })
        .collect::<Result<Vec<_>>>()?;
    timings.insert("readout_esr_s".into(), t.elapsed().as_secs_f64());
    Ok((results, joint, timings))
}

fn assemble(cfg: &RunConfig, prep: &Prepared, results: Vec<RoiResult>, joint: Option<JointSummary>, mut timings: BTreeMap<String, f64>) -> RunReport {
    timings.extend(prep.timings.iter().map(|(k, v)| (k.clone(), *v)));
    RunReport {
        config: cfg.clone(),
        cache_key: prep.cache_key.clone(),
        scene: prep.scene.clone(),
        alpha: prep.alpha.clone(),
        validity: prep.validity(),
        rois: results,
        joint,
        timings,
    }
}

/// Full single run. Writes outputs when `cfg.output_dir` is set.
pub fn plan(cfg: &RunConfig, workers: Option<usize>) -> Result<RunReport> {
    with_workers(workers, || {
        let start = Instant::now();
        let prep = prepare(cfg, cfg.scene.occlusion, None)?;
        let (results, joint, timings) = run_on(&prep, cfg)?;
        let mut report = assemble(cfg, &prep, results, joint, timings);
        if let Some(dir) = &cfg.output_dir {
            write_outputs(dir, &report, &prep)?;
        }
        report.timings.insert("total_s".into(), start.elapsed().as_secs_f64());
        if let Some(dir) = &cfg.output_dir {
            fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        }
        Ok(report)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereRow {
    pub dir_x: f64,
    pub dir_y: f64,
    pub dir_z: f64,
    pub lon_deg: f64,
    pub lat_deg: f64,
    pub gap_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub direction: usize,
    pub dir_x: f64,
    pub dir_y: f64,
    pub dir_z: f64,
    pub gap_rad: f64,
}

pub fn gap_rows(grid: &DirectionGrid, esr: &EsrReport) -> Vec<GapRow> {
    grid.directions
        .iter()
        .zip(&esr.per_direction_gap_rad)
        .enumerate()
        .map(|(j, (d, &g))| {
            let u = d.unit();
            GapRow { direction: j, dir_x: u.x, dir_y: u.y, dir_z: u.z, gap_rad: g }
        })
        .collect()
}

pub fn sphere_rows(gaps: &[GapRow]) -> Vec<SphereRow> {
    gaps.iter()
        .map(|g| SphereRow {
            dir_x: g.dir_x,
            dir_y: g.dir_y,
            dir_z: g.dir_z,
            lon_deg: g.dir_y.atan2(g.dir_x).to_degrees(),
            lat_deg: g.dir_z.clamp(-1.0, 1.0).asin().to_degrees(),
            gap_deg: g.gap_rad.to_degrees(),
        })
        .collect()
}

/// Sphere-map CSV: a `# theta_max_deg=<value>` line, then one row per direction.
pub fn write_sphere_map<W: Write>(mut out: W, theta_max_deg: f64, rows: &[SphereRow]) -> Result<()> {
    writeln!(out, "# theta_max_deg={theta_max_deg}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes matrix dumps, gap CSVs and sphere maps (the report itself is written by the caller).
pub fn write_outputs(dir: &Path, report: &RunReport, prep: &Prepared) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (pos, r) in report.rois.iter().enumerate() {
        let q = r.roi_index;
        prep.soft[pos].write_triples_csv(fs::File::create(dir.join(format!("roi{q}_soft.csv")))?)?;
        prep.binary[pos].write_triples_csv(fs::File::create(dir.join(format!("roi{q}_binary.csv")))?)?;
        let gaps = gap_rows(&prep.grids[pos], &r.esr);
        write_csv(&dir.join(format!("roi{q}_gaps.csv")), &gaps)?;
        write_sphere_map(fs::File::create(dir.join(format!("roi{q}_sphere_map.csv")))?, r.grid.theta_max_deg, &sphere_rows(&gaps))?;
    }
    Ok(())
}

/// Rebuilds the sphere map of ROI `roi_index` from a saved report and its gap CSV.
pub fn export_sphere_map(report_path: &Path, gaps_path: &Path, roi_index: usize) -> Result<(f64, Vec<SphereRow>)> {
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(report_path)?)?;
    let entry = report["rois"]
        .as_array()
        .and_then(|rs| rs.iter().find(|r| r["roi_index"].as_u64() == Some(roi_index as u64)))
        .ok_or_else(|| Error::InvalidInput(format!("report has no results for ROI {roi_index}")))?;
    let esr: EsrReport = serde_json::from_value(entry["esr"].clone())
        .map_err(|_| Error::InvalidInput(format!("report has no ESR section for ROI {roi_index}")))?;
    let theta = entry["grid"]["theta_max_deg"]
        .as_f64()
        .ok_or_else(|| Error::InvalidInput("report has no grid tolerance".into()))?;
    let mut rdr = csv::Reader::from_path(gaps_path)?;
    let gaps: Vec<GapRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    if gaps.len() != esr.per_direction_gap_rad.len()
        || gaps.iter().zip(&esr.per_direction_gap_rad).any(|(g, e)| (g.gap_rad - e).abs() > 1e-9)
    {
        return Err(Error::InvalidInput("gap CSV does not match the report's ESR section".into()));
    }
    Ok((theta, sphere_rows(&gaps)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub alpha: AlphaInfo,
    pub validity: ValidityReport,
}

/// Calibrates alpha on the unoccluded scene and reports the resulting validity.
pub fn calibrate_report(cfg: &RunConfig, workers: Option<usize>) -> Result<CalibrationReport> {
    with_workers(workers, || {
        cfg.validate()?;
        let (base, _) = build_volumes(cfg, OcclusionLevel::None)?;
        let sources = sources_for(cfg)?;
        let uncalibrated = RunConfig { validity: crate::config::ValidityConfig { alpha: None, ..cfg.validity }, ..cfg.clone() };
        let alpha = calibrate(&uncalibrated, &base, &sources)?;
        let scan = cfg.geometry.scan();
        let masks: Vec<ValidityMask> = cfg
            .rois
            .iter()
            .map(|roi| RoiPatches::compute(&base, &scan, &sources, roi)?.mask(alpha.value, cfg.validity.eta))
            .collect::<Result<_>>()?;
        let per_roi: Vec<ValiditySummary> = masks.iter().map(ValidityMask::summary).collect();
        let mean = per_roi.iter().map(|s| s.valid_fraction).sum::<f64>() / per_roi.len() as f64;
        let excluded = (0..masks.len()).filter(|&q| masks[q].valid_count() == 0).collect();
        Ok(CalibrationReport { alpha, validity: ValidityReport { per_roi, mean_valid_fraction: mean, excluded_rois: excluded } })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub k_list: Vec<usize>,
    pub occlusions: Vec<OcclusionLevel>,
    pub methods: Vec<Method>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub occlusion: OcclusionLevel,
    pub method: Method,
    pub roi: Option<usize>,
    /// `ok`, or `error:<kind>` for a failed cell.
    pub status: String,
    pub error: Option<String>,
    pub valid_fraction: Option<f64>,
    pub n_chosen: Option<usize>,
    pub objective: Option<f64>,
    pub binary_tuy: Option<f64>,
    pub soft_tuy: Option<f64>,
    pub saturated: Option<f64>,
    pub esr_mean_mm: Option<f64>,
    pub esr_quantile_mm: Option<f64>,
    pub gap: Option<f64>,
    pub solver_status: Option<SolveStatus>,
    /// Greedy objective over exact objective for the same (k, occlusion, ROI).
    pub greedy_exact_ratio: Option<f64>,
    pub time_s: f64,
}

impl SweepRow {
    fn failed(k: usize, occlusion: OcclusionLevel, method: Method, e: &Error, time_s: f64) -> Self {
        SweepRow {
            k,
            occlusion,
            method,
            roi: None,
            status: format!("error:{}", e.kind()),
            error: Some(e.to_string()),
            valid_fraction: None,
            n_chosen: None,
            objective: None,
            binary_tuy: None,
            soft_tuy: None,
            saturated: None,
            esr_mean_mm: None,
            esr_quantile_mm: None,
            gap: None,
            solver_status: None,
            greedy_exact_ratio: None,
            time_s,
        }
    }
}

fn dedup<T: Ord + Copy>(v: &[T]) -> Vec<T> {
    let mut v = v.to_vec();
    v.sort();
    v.dedup();
    v
}

/// Cross product of budgets, occlusion levels and methods. Matrices are built once
/// per distinct content hash; failed cells yield flagged rows and the sweep continues.
pub fn sweep(cfg: &RunConfig, spec: &SweepSpec, workers: Option<usize>) -> Result<Vec<SweepRow>> {
    if spec.k_list.is_empty() || spec.occlusions.is_empty() || spec.methods.is_empty() {
        return Err(Error::Config("sweep lists must be non-empty".into()));
    }
    if spec.k_list.contains(&0) {
        return Err(Error::Config("sweep budgets must be positive".into()));
    }
    cfg.validate()?;
    with_workers(workers, || {
        let (base, _) = build_volumes(cfg, OcclusionLevel::None)?;
        let sources = sources_for(cfg)?;
        let alpha = calibrate(cfg, &base, &sources)?;
        let levels = dedup(&spec.occlusions);
        let mut cache: BTreeMap<String, Arc<std::result::Result<Prepared, Error>>> = BTreeMap::new();
        let mut by_level = BTreeMap::new();
        for &level in &levels {
            let key = cache_key(cfg, level, alpha.value);
            let entry = cache.entry(key).or_insert_with(|| Arc::new(prepare(cfg, level, Some(alpha.clone())))).clone();
            by_level.insert(level, entry);
        }
        let cells: Vec<(usize, OcclusionLevel, Method)> = dedup(&spec.k_list)
            .into_iter()
            .flat_map(|k| levels.iter().flat_map(move |&o| dedup(&spec.methods).into_iter().map(move |m| (k, o, m))))
            .collect();
        let mut rows: Vec<SweepRow> = cells
            .par_iter()
            .flat_map_iter(|&(k, level, method)| {
                let t = Instant::now();
                let cell_cfg = RunConfig { k, method, scene: crate::config::SceneConfig { occlusion: level, ..cfg.scene.clone() }, ..cfg.clone() };
                let out = match by_level[&level].as_ref() {
                    Err(e) => Err(Error::InvalidInput(format!("scene preparation failed: {e}"))),
                    Ok(prep) => run_on(prep, &cell_cfg).map(|r| (prep, r)),
                };
                let elapsed = t.elapsed().as_secs_f64();
                match out {
                    Err(e) => vec![SweepRow::failed(k, level, method, &e, elapsed)],
                    Ok((prep, (results, _, _))) => results
                        .into_iter()
                        .map(|r| SweepRow {
                            k,
                            occlusion: level,
                            method,
                            roi: Some(r.roi_index),
                            status: "ok".into(),
                            error: None,
                            valid_fraction: Some(prep.masks[r.roi_index].valid_fraction()),
                            n_chosen: Some(r.selection.chosen.len()),
                            objective: Some(r.selection.objective),
                            binary_tuy: Some(r.readout.binary_tuy),
                            soft_tuy: Some(r.readout.soft_tuy),
                            saturated: Some(r.readout.saturated),
                            esr_mean_mm: Some(r.esr.esr_mean_mm),
                            esr_quantile_mm: Some(r.esr.esr_quantile_mm),
                            gap: r.selection.certificate.as_ref().map(|c| c.gap),
                            solver_status: r
                                .selection
                                .certificate
                                .as_ref()
                                .map(|c| c.status)
                                .or(r.selection.worstcase.as_ref().map(|w| w.status)),
                            greedy_exact_ratio: None,
                            time_s: elapsed,
                        })
                        .collect(),
                }
            })
            .collect();
        rows.sort_by_key(|r| (r.k, r.occlusion, r.method, r.roi));
        fill_ratios(&mut rows);
        Ok(rows)
    })
}

fn fill_ratios(rows: &mut [SweepRow]) {
    let mut exact: BTreeMap<(usize, OcclusionLevel, Option<usize>), f64> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.method == Method::Exact) {
        if let Some(o) = r.objective {
            exact.insert((r.k, r.occlusion, r.roi), o);
        }
    }
    for r in rows.iter_mut().filter(|r| matches!(r.method, Method::Greedy | Method::Exact)) {
        let greedy = if r.method == Method::Greedy { r.objective } else { None };
        if let (Some(&e), Some(g)) = (exact.get(&(r.k, r.occlusion, r.roi)), greedy) {
            r.greedy_exact_ratio = Some(if e > 0.0 { g / e } else { 1.0 });
        }
    }
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Default output location for a command when none is configured.
pub fn output_dir_or(cfg: &RunConfig, fallback: &str) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(fallback))
}
