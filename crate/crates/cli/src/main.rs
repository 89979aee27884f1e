use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use trajsel::config::{Method, RunConfig};
use trajsel::error::{Error, Result};
use trajsel::harness::{self, GeneratorParams};
use trajsel::multi_roi::Weighting;
use trajsel::pipeline::{self, SweepSpec};
use trajsel::scene::OcclusionLevel;

/// View selection for ROI cone-beam CT under resolution-aware directional coverage.
#[derive(Parser)]
#[command(name = "trajsel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline once and print the report.
    Plan(RunArgs),
    /// Run every combination of budgets, occlusion levels and methods; write a CSV table.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated budgets.
        #[arg(long, value_delimiter = ',', default_value = "20,60,100")]
        k_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "none,mild,moderate,severe")]
        occlusions: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "greedy")]
        methods: Vec<String>,
        /// CSV destination (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check Set Cover reductions against exhaustive oracles.
    Reduce {
        /// JSON file with one instance or an array of instances.
        #[arg(long)]
        file: Option<PathBuf>,
        /// Check the built-in three-element example.
        #[arg(long, conflicts_with = "file")]
        bundled: bool,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        max_n: usize,
        #[arg(long, default_value_t = 10)]
        max_m: usize,
        #[arg(long, default_value_t = 4)]
        max_k: usize,
        #[arg(long, default_value_t = 0.3)]
        density: f64,
    },
    /// Convert a run's direction-gap CSV into sphere-map plot data.
    ExportSphereMap {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        gaps: PathBuf,
        #[arg(long, default_value_t = 0)]
        roi: usize,
        /// CSV destination (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the (optionally occluded) phantom as raw f64 plus a JSON header.
    SceneGen {
        #[command(flatten)]
        run: RunArgs,
        /// Output path stem; `<stem>.raw` and `<stem>.json` are written.
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate the absorption threshold on the unoccluded scene.
    CalibrateAlpha(RunArgs),
}

/// Overrides applied on top of `--config` (or the defaults).
#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    occlusion: Option<String>,
    /// Candidate source count.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    f_min: Option<f64>,
    #[arg(long)]
    z_override: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    alpha_percentile: Option<f64>,
    #[arg(long)]
    d_fuse: Option<f64>,
    #[arg(long)]
    weighting: Option<String>,
    /// Seconds.
    #[arg(long)]
    time_limit: Option<f64>,
    /// Relative optimality gap.
    #[arg(long)]
    gap_limit: Option<f64>,
    #[arg(long)]
    esr_p: Option<f64>,
    #[arg(long)]
    voxel_samples: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.method {
            c.method = v.parse()?;
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = &self.occlusion {
            c.scene.occlusion = v.parse()?;
        }
        if let Some(v) = self.m {
            c.geometry.m = v;
        }
        if let Some(v) = self.f_min {
            c.f_min_mm = v;
        }
        if self.z_override.is_some() {
            c.z_override = self.z_override;
        }
        if let Some(v) = self.eta {
            c.validity.eta = v;
        }
        if self.alpha.is_some() {
            c.validity.alpha = self.alpha;
        }
        if let Some(v) = self.alpha_percentile {
            c.validity.alpha_percentile = v;
        }
        if let Some(v) = self.d_fuse {
            c.fusion.d_fuse_mm = v;
        }
        if let Some(v) = &self.weighting {
            c.fusion.weighting = v.parse::<Weighting>()?;
        }
        if let Some(v) = self.time_limit {
            c.limits.time_limit_s = v;
        }
        if let Some(v) = self.gap_limit {
            c.limits.gap_limit = v;
        }
        if let Some(v) = self.esr_p {
            c.esr.p = v;
        }
        if let Some(v) = self.voxel_samples {
            c.esr.voxel_samples = v;
        }
        if self.output_dir.is_some() {
            c.output_dir = self.output_dir.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_or_print(out: Option<&Path>, f: impl FnOnce(&mut dyn std::io::Write) -> Result<()>) -> Result<()> {
    match out {
        Some(p) => f(&mut fs::File::create(p)?),
        None => f(&mut std::io::stdout().lock()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let workers = pipeline::workers_from_env()?;
    match cli.command {
        Command::Plan(args) => print_json(&pipeline::plan(&args.resolve()?, workers)?),
        Command::Sweep { run, k_list, occlusions, methods, out } => {
            let cfg = run.resolve()?;
            let spec = SweepSpec {
                k_list,
                occlusions: occlusions.iter().map(|s| s.parse::<OcclusionLevel>()).collect::<Result<_>>()?,
                methods: methods.iter().map(|s| s.parse::<Method>()).collect::<Result<_>>()?,
            };
            let rows = pipeline::sweep(&cfg, &spec, workers)?;
            write_or_print(out.as_deref(), |w| pipeline::write_sweep_csv(w, &rows))?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            if failed > 0 {
                eprintln!("{failed} sweep cell(s) failed; see the status column");
            }
            Ok(())
        }
        Command::Reduce { file, bundled, count, seed, max_n, max_m, max_k, density } => {
            let instances = if let Some(p) = file {
                harness::parse_instances(&fs::read_to_string(&p)?)?
            } else if bundled {
                vec![harness::bundled_example()]
            } else {
                harness::generate_batch(&GeneratorParams { count, max_n, max_m, max_k, density, seed })?
            };
            let report = pipeline::with_workers(workers, || harness::check_equivalence(&instances))?;
            print_json(&report)?;
            if report.disagree > 0 {
                return Err(Error::InvalidInput(format!("{} reduction(s) disagree", report.disagree)));
            }
            Ok(())
        }
        Command::ExportSphereMap { report, gaps, roi, out } => {
            let (theta, rows) = pipeline::export_sphere_map(&report, &gaps, roi)?;
            write_or_print(out.as_deref(), |w| pipeline::write_sphere_map(w, theta, &rows))
        }
        Command::SceneGen { run, out } => {
            let cfg = run.resolve()?;
            let (_, vol) = pipeline::build_volumes(&cfg, cfg.scene.occlusion)?;
            vol.write_raw(&out)?;
            print_json(&json!({ "stem": out, "header": vol.header(), "max_mu": vol.max_mu() }))
        }
        Command::CalibrateAlpha(args) => print_json(&pipeline::calibrate_report(&args.resolve()?, workers)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code }));
            ExitCode::from(code as u8)
        }
    }
}
