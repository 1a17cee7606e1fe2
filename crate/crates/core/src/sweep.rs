//! Threshold sensitivity sweep over fixed teacher/proxy detections.
//!
//! For every `(tau_cls, tau_loc, gamma)` combination the threshold starts at
//! `tau_cls` and is adapted for a number of passes over the data set; the
//! final threshold then produces the pseudo-labels that are scored against
//! ground truth.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ait::ThresholdState;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig};
use crate::geometry::{match_by_class_and_iou, Detection, DetectionSet, SourceTag};
use crate::ptc::{ptc_fuse_detailed, Provenance, PseudoLabelSet, PtcConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub tau_cls: Vec<f64>,
    pub tau_loc: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            tau_cls: vec![0.8],
            tau_loc: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            gamma: vec![0.05],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Threshold updates before scoring; 0 scores the starting threshold.
    pub passes: usize,
    pub tau_lb: f64,
    pub floor: f64,
    /// IoU against ground truth for a pseudo-label to count as a TP.
    pub eval_iou: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            passes: 10,
            tau_lb: 0.25,
            floor: 0.25,
            eval_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau_cls: f64,
    pub tau_loc: f64,
    pub gamma: f64,
    pub final_tau: f64,
    /// Extended (proxy-validated) labels that hit a ground-truth object.
    pub matched_tp: usize,
    pub matched_fp: usize,
    pub pl_tp: usize,
    pub pl_fp: usize,
    pub pl_fn: usize,
    pub map50: f64,
}

pub const CSV_HEADER: [&str; 10] = [
    "tau_cls",
    "tau_loc",
    "gamma",
    "final_tau",
    "matched_tp",
    "matched_fp",
    "pl_tp",
    "pl_fp",
    "pl_fn",
    "map50",
];

pub fn write_csv<W: std::io::Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(CSV_HEADER)?;
    for r in rows {
        wr.write_record([
            r.tau_cls.to_string(),
            r.tau_loc.to_string(),
            r.gamma.to_string(),
            r.final_tau.to_string(),
            r.matched_tp.to_string(),
            r.matched_fp.to_string(),
            r.pl_tp.to_string(),
            r.pl_fp.to_string(),
            r.pl_fn.to_string(),
            r.map50.to_string(),
        ])?;
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Teacher and proxy detections aligned to the ground-truth image order.
struct Aligned {
    teacher: Vec<DetectionSet>,
    proxy: Vec<DetectionSet>,
    gt: Vec<DetectionSet>,
}

fn align(teacher: &[DetectionSet], proxy: &[DetectionSet], gt: &[DetectionSet]) -> Result<Aligned> {
    let index: HashMap<&str, usize> = gt.iter().enumerate().map(|(i, g)| (g.image_id.as_str(), i)).collect();
    if index.len() != gt.len() {
        return Err(Error::invalid("ground_truth", "duplicate image_id"));
    }
    let place = |sets: &[DetectionSet], what: &str, tag: SourceTag| -> Result<Vec<DetectionSet>> {
        let mut out: Vec<DetectionSet> = gt.iter().map(|g| DetectionSet::new(g.image_id.clone(), tag)).collect();
        let mut filled = vec![false; gt.len()];
        for s in sets {
            let &i = index.get(s.image_id.as_str()).ok_or_else(|| {
                Error::invalid(what, format!("image_id '{}' has no ground truth entry", s.image_id))
            })?;
            if std::mem::replace(&mut filled[i], true) {
                return Err(Error::invalid(what, format!("duplicate image_id '{}'", s.image_id)));
            }
            out[i].detections = s.detections.clone();
        }
        Ok(out)
    };
    Ok(Aligned {
        teacher: place(teacher, "teacher", SourceTag::Teacher)?,
        proxy: place(proxy, "proxy", SourceTag::Proxy)?,
        gt: gt.to_vec(),
    })
}

fn fuse_all(data: &Aligned, cfg: &PtcConfig) -> Result<(Vec<PseudoLabelSet>, Vec<f64>)> {
    let mut labels = Vec::with_capacity(data.gt.len());
    let mut matched = Vec::new();
    for (t, p) in data.teacher.iter().zip(&data.proxy) {
        let o = ptc_fuse_detailed(t, p, cfg)?;
        matched.extend(o.matched_confidences);
        labels.push(o.labels);
    }
    Ok((labels, matched))
}

fn score(
    data: &Aligned,
    tau_cls: f64,
    tau_loc: f64,
    gamma: f64,
    cfg: &SweepConfig,
) -> Result<SweepRow> {
    let base = PtcConfig {
        tau_cls,
        tau_loc,
        tau_lb: cfg.tau_lb.min(tau_cls),
        one_to_one: true,
    };
    base.validate("sweep")?;
    let mut ait = ThresholdState::new(tau_cls.max(cfg.floor), gamma, cfg.floor)?;
    for pass in 0..cfg.passes {
        let (_, matched) = fuse_all(data, &base.with_tau_cls(ait.tau()))?;
        ait.step(&matched, pass as u64 + 1)?;
    }
    let (labels, _) = fuse_all(data, &base.with_tau_cls(ait.tau()))?;

    let (mut matched_tp, mut matched_fp, mut pl_tp, mut pl_fp, mut pl_fn) = (0, 0, 0, 0, 0);
    for (l, g) in labels.iter().zip(&data.gt) {
        let dets: Vec<Detection> = l.detections().cloned().collect();
        let hits = match_by_class_and_iou(&dets, &g.detections, cfg.eval_iou);
        let mut is_tp = vec![false; dets.len()];
        for m in &hits {
            is_tp[m.src] = true;
        }
        for (label, tp) in l.labels.iter().zip(&is_tp) {
            if label.provenance == Provenance::Extended {
                if *tp {
                    matched_tp += 1;
                } else {
                    matched_fp += 1;
                }
            }
        }
        pl_tp += hits.len();
        pl_fp += dets.len() - hits.len();
        pl_fn += g.len() - hits.len();
    }
    let pl_sets: Vec<DetectionSet> = labels.iter().map(|l| l.to_detection_set(SourceTag::Teacher)).collect();
    let eval_cfg = EvalConfig {
        iou_thresh: cfg.eval_iou,
        ..EvalConfig::default()
    };
    let map50 = evaluate(&pl_sets, &data.gt, &eval_cfg)?.map;
    Ok(SweepRow {
        tau_cls,
        tau_loc,
        gamma,
        final_tau: ait.tau(),
        matched_tp,
        matched_fp,
        pl_tp,
        pl_fp,
        pl_fn,
        map50,
    })
}

/// One row per grid point, ordered by `tau_cls`, then `tau_loc`, then
/// `gamma` as listed in the grid.
pub fn ait_sweep(
    teacher: &[DetectionSet],
    proxy: &[DetectionSet],
    gt: &[DetectionSet],
    grid: &SweepGrid,
    cfg: &SweepConfig,
) -> Result<Vec<SweepRow>> {
    if !(0.0..=1.0).contains(&cfg.floor) {
        return Err(Error::invalid("sweep.floor", "must lie in [0, 1]"));
    }
    let data = align(teacher, proxy, gt)?;
    let points: Vec<(f64, f64, f64)> = grid
        .tau_cls
        .iter()
        .flat_map(|&c| grid.tau_loc.iter().flat_map(move |&l| grid.gamma.iter().map(move |&g| (c, l, g))))
        .collect();
    points
        .par_iter()
        .map(|&(c, l, g)| score(&data, c, l, g, cfg))
        .collect()
}
