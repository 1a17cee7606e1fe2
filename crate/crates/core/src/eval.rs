//! Detection evaluation: per-class AP at an IoU threshold with all-point
//! interpolation, size-stratified AP, and pseudo-label quality counts.
//!
//! Detections are ranked by descending confidence (insertion order on ties)
//! and matched greedily, per image and per class, to the highest-IoU unmatched
//! ground-truth box at or above the threshold. AP is the area under the
//! monotone precision envelope.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{confidence_order, iou, match_by_class_and_iou, Detection, DetectionSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    /// Areas below this are "small".
    pub small_area: f64,
    /// Areas at or above this are "large".
    pub large_area: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresh: 0.5,
            small_area: 32.0 * 32.0,
            large_area: 96.0 * 96.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.iou_thresh > 0.0 && self.iou_thresh <= 1.0) {
            return Err(Error::invalid(format!("{path}.iou_thresh"), "must lie in (0, 1]"));
        }
        if !(self.small_area > 0.0 && self.small_area <= self.large_area) {
            return Err(Error::invalid(
                format!("{path}.small_area"),
                "need 0 < small_area <= large_area",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlQuality {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PlQuality {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        PlQuality {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    pub fn merge(&self, other: &PlQuality) -> PlQuality {
        PlQuality::from_counts(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_)
    }
}

/// TP/FP/FN of one image's detections against its ground truth under
/// class-aware one-to-one matching.
pub fn pl_quality(dets: &[Detection], gt: &[Detection], iou_thresh: f64) -> PlQuality {
    let tp = match_by_class_and_iou(dets, gt, iou_thresh).len();
    PlQuality::from_counts(tp, dets.len() - tp, gt.len() - tp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresh: f64,
    /// Classes with at least one ground-truth box.
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map: f64,
    /// Mean of mAP over IoU thresholds 0.50, 0.55, ..., 0.95.
    pub map_50_95: f64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub pl_quality: PlQuality,
}

impl EvalReport {
    /// Plain-text table: one column per class followed by mAP, values in
    /// percent; a second block with the size strata.
    pub fn to_table(&self, class_names: &[String]) -> String {
        let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"));
        let pct = |v: Option<f64>| v.map(|v| format!("{:.1}", 100.0 * v)).unwrap_or_else(|| "-".into());
        let mut header: Vec<String> = self.per_class_ap.keys().map(|&c| name(c)).collect();
        header.push(format!("mAP@{}", self.iou_thresh));
        let mut row: Vec<String> = self.per_class_ap.values().map(|&v| pct(Some(v))).collect();
        row.push(pct(Some(self.map)));
        let widths: Vec<usize> = header
            .iter()
            .zip(&row)
            .map(|(h, r)| h.len().max(r.len()))
            .collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
        };
        let mut out = String::new();
        out.push_str(&line(&header));
        out.push('\n');
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
        out.push('\n');
        out.push_str(&line(&row));
        out.push_str("\n\n");
        out.push_str(&format!(
            "AP@[.50:.95] {}   AP^S {}   AP^M {}   AP^L {}\n",
            pct(Some(self.map_50_95)),
            pct(self.ap_small),
            pct(self.ap_medium),
            pct(self.ap_large)
        ));
        let q = &self.pl_quality;
        out.push_str(&format!(
            "TP {}   FP {}   FN {}   precision {:.4}   recall {:.4}   F1 {:.4}\n",
            q.tp, q.fp, q.fn_, q.precision, q.recall, q.f1
        ));
        out
    }
}

/// Area under the precision envelope given TP flags in rank order and the
/// number of ground-truth boxes.
fn ap_from_ranked(is_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let precision: Vec<f64> = is_tp
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            tp += usize::from(t);
            tp as f64 / (k + 1) as f64
        })
        .collect();
    let mut envelope = precision;
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let area: f64 = is_tp
        .iter()
        .zip(&envelope)
        .filter(|(t, _)| **t)
        .map(|(_, e)| *e)
        .sum();
    area / n_gt as f64
}

/// For each detection (by index), the ground-truth index it matched, if any.
fn greedy_assign(dets: &[&Detection], gt: &[&Detection], iou_thresh: f64) -> Vec<Option<usize>> {
    let order = {
        let owned: Vec<Detection> = dets.iter().map(|d| (*d).clone()).collect();
        confidence_order(&owned)
    };
    let mut taken = vec![false; gt.len()];
    let mut out = vec![None; dets.len()];
    for di in order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gt.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let v = iou(&dets[di].bbox, &g.bbox);
            if v >= iou_thresh && best.is_none_or(|b| v > b.1) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            out[di] = Some(gi);
        }
    }
    out
}

/// Single-class, single-image AP. `None` when there is neither ground truth
/// nor a detection.
pub fn average_precision(dets: &[Detection], gt: &[Detection], iou_thresh: f64) -> Option<f64> {
    if gt.is_empty() && dets.is_empty() {
        return None;
    }
    let d: Vec<&Detection> = dets.iter().collect();
    let g: Vec<&Detection> = gt.iter().collect();
    let assigned = greedy_assign(&d, &g, iou_thresh);
    let is_tp: Vec<bool> = confidence_order(dets)
        .into_iter()
        .map(|i| assigned[i].is_some())
        .collect();
    Some(ap_from_ranked(&is_tp, gt.len()))
}

#[derive(Clone, Copy)]
enum Stratum {
    All,
    Range(f64, f64),
}

impl Stratum {
    fn contains(&self, area: f64) -> bool {
        match *self {
            Stratum::All => true,
            Stratum::Range(lo, hi) => area >= lo && area < hi,
        }
    }
}

struct ClassImage<'a> {
    dets: Vec<&'a Detection>,
    gt: Vec<&'a Detection>,
    assigned: Vec<Option<usize>>,
}

struct Ranked {
    confidence: f64,
    image: usize,
    det: usize,
}

fn pooled_ap(images: &[ClassImage<'_>], stratum: Stratum) -> Option<f64> {
    let n_gt: usize = images
        .iter()
        .map(|im| im.gt.iter().filter(|g| stratum.contains(g.bbox.area())).count())
        .sum();
    let mut ranked: Vec<Ranked> = images
        .iter()
        .enumerate()
        .flat_map(|(ii, im)| {
            im.dets.iter().enumerate().map(move |(di, d)| Ranked {
                confidence: d.confidence,
                image: ii,
                det: di,
            })
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.image.cmp(&b.image))
            .then(a.det.cmp(&b.det))
    });
    let mut is_tp = Vec::with_capacity(ranked.len());
    for r in &ranked {
        let im = &images[r.image];
        match im.assigned[r.det] {
            Some(gi) if stratum.contains(im.gt[gi].bbox.area()) => is_tp.push(true),
            Some(_) => {}
            None if stratum.contains(im.dets[r.det].bbox.area()) => is_tp.push(false),
            None => {}
        }
    }
    if n_gt == 0 && is_tp.is_empty() {
        return None;
    }
    // classes without ground truth in the stratum do not enter the mean
    (n_gt > 0).then(|| ap_from_ranked(&is_tp, n_gt))
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn index_sets<'a>(
    dets: &'a [DetectionSet],
    gt: &'a [DetectionSet],
) -> Result<(Vec<&'a DetectionSet>, HashMap<&'a str, &'a DetectionSet>)> {
    let mut gt_by_id: HashMap<&str, &DetectionSet> = HashMap::new();
    for g in gt {
        if gt_by_id.insert(g.image_id.as_str(), g).is_some() {
            return Err(Error::invalid(
                "ground_truth",
                format!("duplicate image_id '{}'", g.image_id),
            ));
        }
    }
    let mut seen = BTreeSet::new();
    for d in dets {
        if !gt_by_id.contains_key(d.image_id.as_str()) {
            return Err(Error::invalid(
                "detections",
                format!("image_id '{}' has no ground truth entry", d.image_id),
            ));
        }
        if !seen.insert(d.image_id.as_str()) {
            return Err(Error::invalid(
                "detections",
                format!("duplicate image_id '{}'", d.image_id),
            ));
        }
    }
    Ok((gt.iter().collect(), gt_by_id))
}

fn map_at(
    dets_by_id: &HashMap<&str, &DetectionSet>,
    gt: &[&DetectionSet],
    classes: &BTreeSet<usize>,
    iou_thresh: f64,
    strata: &[Stratum],
) -> Vec<BTreeMap<usize, f64>> {
    let mut out = vec![BTreeMap::new(); strata.len()];
    for &c in classes {
        let images: Vec<ClassImage<'_>> = gt
            .iter()
            .map(|g| {
                let gts: Vec<&Detection> = g.detections.iter().filter(|d| d.class_id == c).collect();
                let ds: Vec<&Detection> = dets_by_id
                    .get(g.image_id.as_str())
                    .map(|s| s.detections.iter().filter(|d| d.class_id == c).collect())
                    .unwrap_or_default();
                let assigned = greedy_assign(&ds, &gts, iou_thresh);
                ClassImage {
                    dets: ds,
                    gt: gts,
                    assigned,
                }
            })
            .collect();
        for (si, s) in strata.iter().enumerate() {
            if let Some(ap) = pooled_ap(&images, *s) {
                out[si].insert(c, ap);
            }
        }
    }
    out
}

pub fn evaluate(dets: &[DetectionSet], gt: &[DetectionSet], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate("eval")?;
    let (gt_sets, _) = index_sets(dets, gt)?;
    let dets_by_id: HashMap<&str, &DetectionSet> =
        dets.iter().map(|d| (d.image_id.as_str(), d)).collect();
    let classes: BTreeSet<usize> = gt
        .iter()
        .flat_map(|g| g.detections.iter().map(|d| d.class_id))
        .collect();

    let strata = [
        Stratum::All,
        Stratum::Range(0.0, cfg.small_area),
        Stratum::Range(cfg.small_area, cfg.large_area),
        Stratum::Range(cfg.large_area, f64::INFINITY),
    ];
    let at_thresh = map_at(&dets_by_id, &gt_sets, &classes, cfg.iou_thresh, &strata);
    let per_class_ap = at_thresh[0].clone();
    let map = mean(per_class_ap.values().copied()).unwrap_or(0.0);

    let map_50_95 = mean((0..10).map(|i| {
        let t = 0.5 + 0.05 * i as f64;
        let m = map_at(&dets_by_id, &gt_sets, &classes, t, &[Stratum::All]);
        mean(m[0].values().copied()).unwrap_or(0.0)
    }))
    .unwrap_or(0.0);

    let mut quality = PlQuality::from_counts(0, 0, 0);
    for g in &gt_sets {
        let d: &[Detection] = dets_by_id
            .get(g.image_id.as_str())
            .map(|s| s.detections.as_slice())
            .unwrap_or(&[]);
        quality = quality.merge(&pl_quality(d, &g.detections, cfg.iou_thresh));
    }

    Ok(EvalReport {
        iou_thresh: cfg.iou_thresh,
        per_class_ap,
        map,
        map_50_95,
        ap_small: mean(at_thresh[1].values().copied()),
        ap_medium: mean(at_thresh[2].values().copied()),
        ap_large: mean(at_thresh[3].values().copied()),
        pl_quality: quality,
    })
}
