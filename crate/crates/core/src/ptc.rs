//! Proxy-based target consistency.
//!
//! Teacher detections at or above the secure threshold become *initial*
//! pseudo-labels. Teacher detections in the uncertain band
//! `[tau_lb, tau_cls)` are kept as *extended* labels when the proxy student
//! predicts the same class with IoU at least `tau_loc`. The fused label always
//! carries the teacher's box and confidence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, match_by_class_and_iou, Detection, DetectionSet, Match};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PtcConfig {
    /// Secure classification threshold.
    pub tau_cls: f64,
    /// Localization threshold on teacher/proxy IoU.
    pub tau_loc: f64,
    /// Lower edge of the uncertain band.
    pub tau_lb: f64,
    /// When true a proxy detection validates at most one teacher detection.
    pub one_to_one: bool,
}

impl Default for PtcConfig {
    fn default() -> Self {
        PtcConfig {
            tau_cls: 0.8,
            tau_loc: 0.8,
            tau_lb: 0.25,
            one_to_one: true,
        }
    }
}

impl PtcConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_cls) {
            return Err(Error::invalid(format!("{path}.tau_cls"), "must lie in [0, 1]"));
        }
        if !(0.0..=self.tau_cls).contains(&self.tau_lb) {
            return Err(Error::invalid(
                format!("{path}.tau_lb"),
                format!("must lie in [0, tau_cls = {}]", self.tau_cls),
            ));
        }
        if !(self.tau_loc > 0.0 && self.tau_loc <= 1.0) {
            return Err(Error::invalid(format!("{path}.tau_loc"), "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Copy with a different live classification threshold, keeping the band's
    /// lower edge at or below it.
    pub fn with_tau_cls(&self, tau_cls: f64) -> Self {
        PtcConfig {
            tau_cls,
            tau_lb: self.tau_lb.min(tau_cls),
            ..*self
        }
    }

    fn in_band(&self, confidence: f64) -> bool {
        confidence >= self.tau_lb && confidence < self.tau_cls
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Initial,
    Extended,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub detection: Detection,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub image_id: String,
    pub labels: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn empty(image_id: impl Into<String>) -> Self {
        PseudoLabelSet {
            image_id: image_id.into(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.labels.iter().filter(|l| l.provenance == provenance).count()
    }

    pub fn detections(&self) -> impl Iterator<Item = &Detection> {
        self.labels.iter().map(|l| &l.detection)
    }

    pub fn to_detection_set(&self, source: crate::geometry::SourceTag) -> DetectionSet {
        DetectionSet::with_detections(
            self.image_id.clone(),
            source,
            self.detections().cloned().collect(),
        )
    }
}

pub fn filter_initial(teacher: &DetectionSet, cfg: &PtcConfig) -> PseudoLabelSet {
    PseudoLabelSet {
        image_id: teacher.image_id.clone(),
        labels: teacher
            .detections
            .iter()
            .filter(|d| d.confidence >= cfg.tau_cls)
            .map(|d| PseudoLabel {
                detection: d.clone(),
                provenance: Provenance::Initial,
            })
            .collect(),
    }
}

/// Teacher/proxy pairs that validate uncertain teacher detections. `src`
/// indexes `teacher.detections`, `reference` indexes `proxy.detections`;
/// sorted by teacher index.
pub fn consistent_matches(teacher: &DetectionSet, proxy: &DetectionSet, cfg: &PtcConfig) -> Vec<Match> {
    let band: Vec<usize> = (0..teacher.len())
        .filter(|&i| cfg.in_band(teacher.detections[i].confidence))
        .collect();

    if cfg.one_to_one {
        let candidates: Vec<Detection> = band.iter().map(|&i| teacher.detections[i].clone()).collect();
        let mut out: Vec<Match> = match_by_class_and_iou(&candidates, &proxy.detections, cfg.tau_loc)
            .into_iter()
            .map(|m| Match {
                src: band[m.src],
                ..m
            })
            .collect();
        out.sort_by_key(|m| m.src);
        return out;
    }

    band.into_iter()
        .filter_map(|ti| {
            let t = &teacher.detections[ti];
            let mut best: Option<Match> = None;
            for (pi, p) in proxy.detections.iter().enumerate() {
                if p.class_id != t.class_id {
                    continue;
                }
                let v = iou(&t.bbox, &p.bbox);
                if v >= cfg.tau_loc && best.is_none_or(|b| v > b.iou) {
                    best = Some(Match {
                        src: ti,
                        reference: pi,
                        iou: v,
                    });
                }
            }
            best
        })
        .collect()
}

pub fn mine_consistent(teacher: &DetectionSet, proxy: &DetectionSet, cfg: &PtcConfig) -> PseudoLabelSet {
    labels_from_matches(teacher, &consistent_matches(teacher, proxy, cfg))
}

fn labels_from_matches(teacher: &DetectionSet, matches: &[Match]) -> PseudoLabelSet {
    PseudoLabelSet {
        image_id: teacher.image_id.clone(),
        labels: matches
            .iter()
            .map(|m| PseudoLabel {
                detection: teacher.detections[m.src].clone(),
                provenance: Provenance::Extended,
            })
            .collect(),
    }
}

/// Initial labels first, then extended ones.
pub fn merge_pseudo_labels(initial: &PseudoLabelSet, extended: &PseudoLabelSet) -> Result<PseudoLabelSet> {
    if initial.image_id != extended.image_id {
        return Err(Error::invalid(
            "image_id",
            format!(
                "cannot merge pseudo-labels of '{}' with '{}'",
                initial.image_id, extended.image_id
            ),
        ));
    }
    let mut labels = initial.labels.clone();
    labels.extend(extended.labels.iter().cloned());
    Ok(PseudoLabelSet {
        image_id: initial.image_id.clone(),
        labels,
    })
}

/// Fused labels together with the matches that produced the extended part.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutcome {
    pub labels: PseudoLabelSet,
    pub matches: Vec<Match>,
    /// Teacher confidences of the matched detections, in teacher order.
    pub matched_confidences: Vec<f64>,
}

pub fn ptc_fuse_detailed(teacher: &DetectionSet, proxy: &DetectionSet, cfg: &PtcConfig) -> Result<FusionOutcome> {
    if teacher.image_id != proxy.image_id {
        return Err(Error::invalid(
            "image_id",
            format!(
                "teacher detections for '{}' paired with proxy detections for '{}'",
                teacher.image_id, proxy.image_id
            ),
        ));
    }
    let initial = filter_initial(teacher, cfg);
    let matches = consistent_matches(teacher, proxy, cfg);
    let extended = labels_from_matches(teacher, &matches);
    let matched_confidences = matches
        .iter()
        .map(|m| teacher.detections[m.src].confidence)
        .collect();
    Ok(FusionOutcome {
        labels: merge_pseudo_labels(&initial, &extended)?,
        matches,
        matched_confidences,
    })
}

pub fn ptc_fuse(teacher: &DetectionSet, proxy: &DetectionSet, cfg: &PtcConfig) -> Result<PseudoLabelSet> {
    ptc_fuse_detailed(teacher, proxy, cfg).map(|o| o.labels)
}
