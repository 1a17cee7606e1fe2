//! `cos` — command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
//! Errors go to stderr as a single JSON object.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use cos_core::ait::write_history_csv;
use cos_core::eval::evaluate;
use cos_core::geometry::{BBox, DetectionSet, SourceTag};
use cos_core::glt::{compute_stats, glt_pipeline, NightPrior};
use cos_core::io::{self, RunConfig};
use cos_core::ptc::{filter_initial, ptc_fuse, PseudoLabelSet};
use cos_core::rng::{name_stream, rng_for};
use cos_core::sim::detect_all;
use cos_core::sweep::{ait_sweep, write_csv, SweepGrid};

#[derive(Parser)]
#[command(name = "cos", version, about = "Night-time domain adaptation toolkit")]
struct Cli {
    /// Run configuration (JSON). Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply the night-time global-local transformation to a directory of images.
    Glt(GltArgs),
    /// Compute night-prior channel statistics from a directory of night images.
    Stats(StatsArgs),
    /// Fuse teacher and proxy detections into pseudo-labels.
    Fuse(FuseArgs),
    /// Sweep tau_cls / tau_loc / gamma over fixed detections and write a CSV.
    AitSweep(SweepArgs),
    /// Run the synthetic teacher / proxy / student loop.
    Simulate(SimulateArgs),
    /// Score detections against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct GltArgs {
    /// Directory of .png / .ppm / .pgm daytime images.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Night prior JSON produced by `cos stats`.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Optional detection file with object boxes; image_id is the file stem.
    #[arg(long)]
    boxes: Option<PathBuf>,
    /// Output directory; files keep their names.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// Directory of night-time images.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Output JSON file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FuseArgs {
    /// Teacher detection file.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Without proxy detections only confidence filtering is applied.
    #[arg(long)]
    proxy: Option<PathBuf>,
    /// Output pseudo-label file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Secure confidence threshold (default from config, 0.8).
    #[arg(long)]
    tau_cls: Option<f64>,
    /// Teacher/proxy IoU needed to validate an uncertain detection.
    #[arg(long)]
    tau_loc: Option<f64>,
    /// Lower edge of the uncertain confidence band.
    #[arg(long)]
    tau_lb: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    /// Teacher detection file.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Proxy detection file.
    #[arg(long)]
    proxy: Option<PathBuf>,
    /// Ground-truth file; fixes the image set.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated grid; defaults to the configured tau_cls.
    #[arg(long, value_delimiter = ',')]
    tau_cls: Vec<f64>,
    /// Comma-separated grid; defaults to 0.5,0.6,0.7,0.8,0.9.
    #[arg(long, value_delimiter = ',')]
    tau_loc: Vec<f64>,
    /// Comma-separated grid; defaults to the configured gamma.
    #[arg(long, value_delimiter = ',')]
    gamma: Vec<f64>,
    /// Threshold updates before scoring.
    #[arg(long)]
    passes: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory for report.json, trace.csv and ait.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write ground_truth.json, teacher.json and proxy.json from the
    /// initial models, and student.json from the final student.
    #[arg(long)]
    export_detections: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Detection file to score.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Ground-truth file.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Output JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the text table here (it is always printed).
    #[arg(long)]
    table: Option<PathBuf>,
    /// Matching IoU (default from config, 0.5).
    #[arg(long)]
    iou: Option<f64>,
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| cos_core::Error::invalid(name, "required (flag or paths entry in the configuration)").into())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run_glt(cfg: &RunConfig, a: GltArgs) -> Result<()> {
    let images = required(a.images, &cfg.paths.images, "images")?;
    let prior_path = required(a.prior, &cfg.paths.prior, "prior")?;
    let out = required(a.out, &cfg.paths.output, "out")?;
    let prior = io::load_prior(&prior_path)?;
    let boxes: Vec<DetectionSet> = match a.boxes.or_else(|| cfg.paths.boxes.clone()) {
        Some(p) => io::load_detections(&p, SourceTag::GroundTruth)?,
        None => Vec::new(),
    };
    let files = io::list_images(&images)?;
    let results: Vec<(PathBuf, cos_core::glt::ImagePlanes)> = files
        .par_iter()
        .map(|path| -> Result<_> {
            let img = io::read_image(path)?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
            let obj: Vec<BBox> = boxes
                .iter()
                .filter(|s| s.image_id == stem)
                .flat_map(|s| s.detections.iter().map(|d| d.bbox))
                .collect();
            let mut rng = rng_for(cfg.seed, &[cfg.glt.rng_seed, name_stream(name)]);
            let enhanced = glt_pipeline(&img, &obj, &prior, &cfg.glt, &mut rng)
                .with_context(|| format!("transforming {}", path.display()))?;
            Ok((out.join(name), enhanced))
        })
        .collect::<Result<_>>()?;
    for (path, img) in &results {
        io::write_image(path, img)?;
    }
    println!("enhanced {} images into {}", results.len(), out.display());
    Ok(())
}

fn run_stats(cfg: &RunConfig, a: StatsArgs) -> Result<()> {
    let images = required(a.images, &cfg.paths.images, "images")?;
    let out = required(a.out, &cfg.paths.output, "out")?;
    let files = io::list_images(&images)?;
    let stats = files
        .par_iter()
        .map(|p| io::read_image(p).map(|img| compute_stats(&img)))
        .collect::<cos_core::Result<Vec<_>>>()?;
    let prior = NightPrior::from_stats(&stats)?;
    io::write_prior(&out, &prior)?;
    println!("night prior from {} images written to {}", prior.sample_count, out.display());
    Ok(())
}

fn run_fuse(cfg: &RunConfig, a: FuseArgs) -> Result<()> {
    let teacher_path = required(a.teacher, &cfg.paths.teacher, "teacher")?;
    let out = required(a.out, &cfg.paths.output, "out")?;
    let mut ptc = cfg.ptc;
    if let Some(v) = a.tau_cls {
        ptc.tau_cls = v;
    }
    if let Some(v) = a.tau_loc {
        ptc.tau_loc = v;
    }
    if let Some(v) = a.tau_lb {
        ptc.tau_lb = v;
    }
    ptc.validate("ptc")?;
    let teacher = io::load_detections(&teacher_path, SourceTag::Teacher)?;
    let proxy = match a.proxy.or_else(|| cfg.paths.proxy.clone()) {
        Some(p) => Some(io::load_detections(&p, SourceTag::Proxy)?),
        None => None,
    };
    let labels: Vec<PseudoLabelSet> = teacher
        .iter()
        .map(|t| match &proxy {
            Some(sets) => {
                let p = sets
                    .iter()
                    .find(|p| p.image_id == t.image_id)
                    .cloned()
                    .unwrap_or_else(|| DetectionSet::new(t.image_id.clone(), SourceTag::Proxy));
                ptc_fuse(t, &p, &ptc)
            }
            None => Ok(filter_initial(t, &ptc)),
        })
        .collect::<cos_core::Result<_>>()?;
    let records = io::records_from_pseudo_labels(&labels);
    io::write_detections(&out, &records)?;
    println!("{} pseudo-labels written to {}", records.len(), out.display());
    Ok(())
}

fn run_sweep(cfg: &RunConfig, a: SweepArgs) -> Result<()> {
    let teacher = io::load_detections(&required(a.teacher, &cfg.paths.teacher, "teacher")?, SourceTag::Teacher)?;
    let proxy = io::load_detections(&required(a.proxy, &cfg.paths.proxy, "proxy")?, SourceTag::Proxy)?;
    let gt = io::load_detections(&required(a.gt, &cfg.paths.ground_truth, "gt")?, SourceTag::GroundTruth)?;
    let out = required(a.out, &cfg.paths.output, "out")?;
    let or = |v: Vec<f64>, d: Vec<f64>| if v.is_empty() { d } else { v };
    let grid = SweepGrid {
        tau_cls: or(a.tau_cls, vec![cfg.ptc.tau_cls]),
        tau_loc: or(a.tau_loc, SweepGrid::default().tau_loc),
        gamma: or(a.gamma, vec![cfg.ait.gamma]),
    };
    let mut sweep = cfg.sweep;
    if let Some(p) = a.passes {
        sweep.passes = p;
    }
    let rows = ait_sweep(&teacher, &proxy, &gt, &grid, &sweep)?;
    io::write_atomic_with(&out, |w| write_csv(&rows, w))?;
    println!("{} sweep rows written to {}", rows.len(), out.display());
    Ok(())
}

fn run_simulate(cfg: &RunConfig, a: SimulateArgs) -> Result<()> {
    let out = required(a.out, &cfg.paths.output, "out")?;
    let sim = cfg.simulate()?;
    let report = &sim.report;
    let exports = if a.export_detections {
        let gt: Vec<DetectionSet> = sim.scenes.iter().map(|s| s.gt.clone()).collect();
        let m = &cfg.sim.models;
        let f = &report.final_models;
        Some([
            ("ground_truth.json", gt),
            ("teacher.json", detect_all(&m.teacher, &sim.scenes, SourceTag::Teacher, cfg.seed)),
            ("proxy.json", detect_all(&m.proxy, &sim.scenes, SourceTag::Proxy, cfg.seed)),
            ("student.json", detect_all(&f.student, &sim.scenes, SourceTag::Student, cfg.seed)),
        ])
    } else {
        None
    };
    io::write_json_atomic(&out.join("report.json"), report)?;
    io::write_atomic_with(&out.join("trace.csv"), |w| report.write_trace_csv(w))?;
    io::write_atomic_with(&out.join("ait.csv"), |w| write_history_csv(&report.ait_history, w))?;
    if let Some(files) = exports {
        for (name, sets) in files {
            io::write_detections(&out.join(name), &io::records_from_sets(&sets))?;
        }
    }
    let last = report.epochs.last();
    println!(
        "{} epochs; final tau {:.4}; student skill {:.4}; student mAP@0.5 {:.4}",
        report.epochs.len(),
        last.map(|e| e.tau).unwrap_or(cfg.ptc.tau_cls),
        report.final_models.student.skill,
        report.final_eval.map
    );
    Ok(())
}

fn run_evaluate(cfg: &RunConfig, a: EvaluateArgs) -> Result<()> {
    let dets = io::load_detections(&required(a.detections, &cfg.paths.detections, "detections")?, SourceTag::Student)?;
    let gt = io::load_detections(&required(a.gt, &cfg.paths.ground_truth, "gt")?, SourceTag::GroundTruth)?;
    let out = required(a.out, &cfg.paths.output, "out")?;
    let mut eval_cfg = cfg.eval;
    if let Some(v) = a.iou {
        eval_cfg.iou_thresh = v;
    }
    let report = evaluate(&dets, &gt, &eval_cfg)?;
    let table = report.to_table(&[]);
    io::write_json_atomic(&out, &report)?;
    if let Some(t) = a.table {
        io::write_atomic(&t, table.as_bytes())?;
    }
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Glt(a) => run_glt(&cfg, a),
        Command::Stats(a) => run_stats(&cfg, a),
        Command::Fuse(a) => run_fuse(&cfg, a),
        Command::AitSweep(a) => run_sweep(&cfg, a),
        Command::Simulate(a) => run_simulate(&cfg, a),
        Command::Evaluate(a) => run_evaluate(&cfg, a),
    }
}

fn report_error(kind: &str, message: String) {
    let body = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{body}");
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain()
        .any(|e| e.downcast_ref::<cos_core::Error>().is_some_and(cos_core::Error::is_validation))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("validation", e.render().to_string().trim_end().to_string());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_validation(&e) => {
            report_error("validation", format!("{e:#}"));
            ExitCode::from(1)
        }
        Err(e) => {
            report_error("runtime", format!("{e:#}"));
            ExitCode::from(2)
        }
    }
}
