//! Detection data types and axis-aligned box geometry.
//!
//! Boxes are corner-encoded `(x1, y1, x2, y2)` in pixel coordinates. A box with
//! zero or negative extent is rejected when constructed, so every [`BBox`] in
//! circulation has a strictly positive area and [`iou`] never divides by zero.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(
                "bbox",
                format!("non-finite coordinate in ({x1}, {y1}, {x2}, {y2})"),
            ));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::invalid(
                "bbox",
                format!("degenerate box ({x1}, {y1}, {x2}, {y2}): need x1 < x2 and y1 < y2"),
            ));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    /// Builds a box from COCO `[x, y, width, height]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::invalid(
                "bbox",
                format!("width and height must be positive, got {w} x {h}"),
            ));
        }
        BBox::new(x, y, x + w, y + h)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Intersects with `[0, width] x [0, height]`. Returns `None` when nothing
    /// of positive area remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        BBox::new(
            self.x1.max(0.0),
            self.y1.max(0.0),
            self.x2.min(width),
            self.y2.min(height),
        )
        .ok()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            x1: f64,
            y1: f64,
            x2: f64,
            y2: f64,
        }
        let r = Raw::deserialize(d)?;
        BBox::new(r.x1, r.y1, r.x2, r.y2).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union; the localization-consistency measure.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    /// Maximum class score.
    pub confidence: f64,
    pub scores: Option<Vec<f64>>,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: usize, confidence: f64) -> Result<Self> {
        check_confidence(confidence)?;
        Ok(Detection {
            bbox,
            class_id,
            confidence,
            scores: None,
        })
    }

    /// Derives class and confidence from a per-class score vector. Ties in the
    /// maximum go to the lowest class index.
    pub fn from_scores(bbox: BBox, scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("scores", "empty score vector"));
        }
        for &s in &scores {
            check_confidence(s)?;
        }
        let total: f64 = scores.iter().sum();
        if total > 1.0 + 1e-9 {
            return Err(Error::invalid(
                "scores",
                format!("class scores sum to {total} > 1"),
            ));
        }
        let (class_id, confidence) = argmax(&scores);
        Ok(Detection {
            bbox,
            class_id,
            confidence,
            scores: Some(scores),
        })
    }
}

fn check_confidence(c: f64) -> Result<()> {
    if (0.0..=1.0).contains(&c) {
        Ok(())
    } else {
        Err(Error::invalid(
            "confidence",
            format!("{c} is outside [0, 1]"),
        ))
    }
}

/// Index and value of the maximum; first index wins ties.
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Teacher,
    Proxy,
    Student,
    GroundTruth,
}

/// Detections produced by one network (or the annotations) for one image, in
/// insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub image_id: String,
    pub detections: Vec<Detection>,
    pub source: SourceTag,
}

impl DetectionSet {
    pub fn new(image_id: impl Into<String>, source: SourceTag) -> Self {
        DetectionSet {
            image_id: image_id.into(),
            detections: Vec::new(),
            source,
        }
    }

    pub fn with_detections(
        image_id: impl Into<String>,
        source: SourceTag,
        detections: Vec<Detection>,
    ) -> Self {
        DetectionSet {
            image_id: image_id.into(),
            detections,
            source,
        }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub src: usize,
    pub reference: usize,
    pub iou: f64,
}

/// Indices of `dets` ordered by descending confidence, lower index first on ties.
pub fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// One-to-one class-aware matching.
///
/// Sources are visited in descending confidence. Each takes the unmatched
/// reference of the same class with the largest IoU, provided it reaches
/// `min_iou`; equal IoUs go to the lower reference index. The result is sorted
/// by source index.
pub fn match_by_class_and_iou(src: &[Detection], refs: &[Detection], min_iou: f64) -> Vec<Match> {
    let mut taken = vec![false; refs.len()];
    let mut out = Vec::new();
    for si in confidence_order(src) {
        let s = &src[si];
        let mut best: Option<Match> = None;
        for (ri, r) in refs.iter().enumerate() {
            if taken[ri] || r.class_id != s.class_id {
                continue;
            }
            let v = iou(&s.bbox, &r.bbox);
            if v < min_iou {
                continue;
            }
            if best.is_none_or(|b| v > b.iou) {
                best = Some(Match {
                    src: si,
                    reference: ri,
                    iou: v,
                });
            }
        }
        if let Some(m) = best {
            taken[m.reference] = true;
            out.push(m);
        }
    }
    out.sort_by_key(|m| m.src);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(b: BBox, class: usize, conf: f64) -> Detection {
        Detection::new(b, class, conf).unwrap()
    }

    #[test]
    fn iou_fixtures() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bb(0.0, 0.0, 1.0, 1.0), &bb(5.0, 5.0, 6.0, 6.0)), 0.0);
        let v = iou(&a, &bb(5.0, 5.0, 15.0, 15.0));
        assert!((v - 25.0 / 175.0).abs() < 1e-15);
        // edge-touching boxes share no area
        assert_eq!(iou(&a, &bb(10.0, 0.0, 20.0, 10.0)), 0.0);
    }

    #[test]
    fn rejects_degenerate_and_non_finite() {
        assert!(BBox::new(0.0, 0.0, 0.0, 5.0).is_err());
        assert!(BBox::new(3.0, 0.0, 1.0, 5.0).is_err());
        assert!(BBox::new(0.0, f64::NAN, 1.0, 5.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 5.0).is_err());
        assert!(BBox::from_xywh(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(Detection::new(bb(0.0, 0.0, 1.0, 1.0), 0, 1.2).is_err());
    }

    #[test]
    fn clip_to_canvas() {
        let b = bb(-5.0, 2.0, 12.0, 8.0).clip(10.0, 10.0).unwrap();
        assert_eq!((b.x1(), b.y1(), b.x2(), b.y2()), (0.0, 2.0, 10.0, 8.0));
        assert!(bb(20.0, 20.0, 30.0, 30.0).clip(10.0, 10.0).is_none());
    }

    #[test]
    fn from_scores_takes_first_max() {
        let d = Detection::from_scores(bb(0.0, 0.0, 1.0, 1.0), vec![0.1, 0.4, 0.4, 0.1]).unwrap();
        assert_eq!(d.class_id, 1);
        assert_eq!(d.confidence, 0.4);
        assert!(Detection::from_scores(bb(0.0, 0.0, 1.0, 1.0), vec![0.7, 0.7]).is_err());
    }

    #[test]
    fn matching_fixtures() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert!(match_by_class_and_iou(&[], &[det(a, 0, 0.5)], 0.5).is_empty());

        // class mismatch
        let r = bb(0.0, 0.0, 10.0, 9.0);
        assert!(match_by_class_and_iou(&[det(a, 2, 0.5)], &[det(r, 3, 0.5)], 0.5).is_empty());

        // two candidates: 0.85 and 0.6
        let b1 = bb(0.0, 0.0, 10.0, 8.5);
        let b2 = bb(0.0, 0.0, 10.0, 6.0);
        assert!((iou(&a, &b1) - 0.85).abs() < 1e-12);
        let m = match_by_class_and_iou(&[det(a, 1, 0.5)], &[det(b1, 1, 0.3), det(b2, 1, 0.9)], 0.8);
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].src, m[0].reference), (0, 0));
        assert!((m[0].iou - 0.85).abs() < 1e-12);
    }

    #[test]
    fn matching_is_one_to_one_and_confidence_greedy() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let low = det(a, 0, 0.3);
        let high = det(bb(0.0, 0.0, 10.0, 9.0), 0, 0.6);
        let refs = [det(a, 0, 0.5)];
        let m = match_by_class_and_iou(&[low, high], &refs, 0.8);
        // the higher-confidence source claims the single reference
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].src, 1);
    }

    #[test]
    fn matching_ties_go_to_lower_reference() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let refs = [det(bb(0.0, 0.0, 10.0, 9.0), 0, 0.1), det(bb(0.0, 1.0, 10.0, 10.0), 0, 0.9)];
        let m = match_by_class_and_iou(&[det(a, 0, 0.5)], &refs, 0.5);
        assert_eq!(m[0].reference, 0);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.1..50.0f64, 0.1..50.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn matching_permutation_stable(
            src in prop::collection::vec((arb_box(), 0usize..3, 0.0..1.0f64), 0..8),
            refs in prop::collection::vec((arb_box(), 0usize..3, 0.0..1.0f64), 0..8),
            shift in 0usize..8,
        ) {
            let src: Vec<Detection> = src.into_iter().map(|(b, c, s)| det(b, c, s)).collect();
            let refs: Vec<Detection> = refs.into_iter().map(|(b, c, s)| det(b, c, s)).collect();
            let base = match_by_class_and_iou(&src, &refs, 0.1);

            // rotate both lists, then map indices back
            let n = src.len().max(1);
            let rs = shift % n;
            let mut src_rot = src.clone();
            src_rot.rotate_left(rs.min(src.len()));
            let m = refs.len().max(1);
            let rr = shift % m;
            let mut refs_rot = refs.clone();
            refs_rot.rotate_left(rr.min(refs.len()));
            let mut back: Vec<(usize, usize)> = match_by_class_and_iou(&src_rot, &refs_rot, 0.1)
                .into_iter()
                .map(|mm| ((mm.src + rs) % n, (mm.reference + rr) % m))
                .collect();
            back.sort();
            let mut expect: Vec<(usize, usize)> = base.iter().map(|mm| (mm.src, mm.reference)).collect();
            expect.sort();
            prop_assert_eq!(back, expect);
        }
    }
}
