//! COCO-style detection files: a JSON array of
//! `{image_id, category_id, bbox: [x, y, width, height], score, provenance?}`.
//!
//! Coordinates are written rounded to 6 decimals; reading converts to corner
//! form with `x2 = x + width`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{from_json_str, read_text, write_json_atomic};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection, DetectionSet, SourceTag};
use crate::ptc::{Provenance, PseudoLabelSet};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageId {
    Int(u64),
    Str(String),
}

impl ImageId {
    /// Canonical decimal ids are written back as integers.
    pub fn from_name(name: &str) -> Self {
        match name.parse::<u64>() {
            Ok(v) if v.to_string() == name => ImageId::Int(v),
            _ => ImageId::Str(name.to_string()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            ImageId::Int(v) => v.to_string(),
            ImageId::Str(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image_id: ImageId,
    pub category_id: usize,
    pub bbox: [f64; 4],
    /// Ground-truth files may omit it; it then reads as 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

fn round6(v: f64) -> f64 {
    let r = (v * 1e6).round() / 1e6;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

impl DetectionRecord {
    pub fn from_detection(image_id: &str, d: &Detection, provenance: Option<Provenance>) -> Self {
        let b = &d.bbox;
        DetectionRecord {
            image_id: ImageId::from_name(image_id),
            category_id: d.class_id,
            bbox: [round6(b.x1()), round6(b.y1()), round6(b.width()), round6(b.height())],
            score: Some(d.confidence),
            provenance,
        }
    }

    fn to_detection(&self, index: usize, source_name: &str) -> Result<Detection> {
        let err = |field: &str, message: String| Error::Parse {
            source_name: source_name.to_string(),
            path: format!("[{index}].{field}"),
            message,
        };
        let [x, y, w, h] = self.bbox;
        if !self.bbox.iter().all(|v| v.is_finite()) {
            return Err(err("bbox", "coordinates must be finite".into()));
        }
        if !(w > 0.0 && h > 0.0) {
            return Err(err("bbox", format!("width and height must be positive, got {w} x {h}")));
        }
        let score = self.score.unwrap_or(1.0);
        if !(0.0..=1.0).contains(&score) {
            return Err(err("score", format!("{score} outside [0, 1]")));
        }
        let bbox = BBox::new(x, y, x + w, y + h).map_err(|e| err("bbox", e.to_string()))?;
        Detection::new(bbox, self.category_id, score).map_err(|e| err("score", e.to_string()))
    }
}

/// Groups records by image in order of first appearance; detections keep
/// file order within an image.
pub fn parse_detections(text: &str, source_name: &str, source: SourceTag) -> Result<Vec<DetectionSet>> {
    let records: Vec<DetectionRecord> = from_json_str(text, source_name)?;
    let mut sets: Vec<DetectionSet> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        let det = r.to_detection(i, source_name)?;
        let name = r.image_id.name();
        let slot = *index.entry(name.clone()).or_insert_with(|| {
            sets.push(DetectionSet::new(name, source));
            sets.len() - 1
        });
        sets[slot].detections.push(det);
    }
    Ok(sets)
}

pub fn load_detections(path: &Path, source: SourceTag) -> Result<Vec<DetectionSet>> {
    parse_detections(&read_text(path)?, &path.display().to_string(), source)
}

pub fn records_from_sets(sets: &[DetectionSet]) -> Vec<DetectionRecord> {
    sets.iter()
        .flat_map(|s| {
            s.detections
                .iter()
                .map(|d| DetectionRecord::from_detection(&s.image_id, d, None))
        })
        .collect()
}

pub fn records_from_pseudo_labels(sets: &[PseudoLabelSet]) -> Vec<DetectionRecord> {
    sets.iter()
        .flat_map(|s| {
            s.labels
                .iter()
                .map(|l| DetectionRecord::from_detection(&s.image_id, &l.detection, Some(l.provenance)))
        })
        .collect()
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    write_json_atomic(path, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng as _;

    fn parse(text: &str) -> Result<Vec<DetectionSet>> {
        parse_detections(text, "test.json", SourceTag::Teacher)
    }

    #[test]
    fn basic_records() {
        assert!(parse("[]").unwrap().is_empty());
        let sets = parse(r#"[{"image_id": 7, "category_id": 2, "bbox": [0, 0, 10, 10], "score": 0.5}]"#).unwrap();
        assert_eq!(sets[0].image_id, "7");
        assert_eq!(sets[0].detections[0].bbox, BBox::new(0.0, 0.0, 10.0, 10.0).unwrap());
        assert_eq!(sets[0].detections[0].class_id, 2);
    }

    #[test]
    fn grouping_keeps_first_appearance_order() {
        let sets = parse(
            r#"[{"image_id": "b", "category_id": 0, "bbox": [0, 0, 1, 1], "score": 0.1},
                {"image_id": "a", "category_id": 0, "bbox": [0, 0, 2, 2], "score": 0.2},
                {"image_id": "b", "category_id": 0, "bbox": [0, 0, 3, 3], "score": 0.3}]"#,
        )
        .unwrap();
        let ids: Vec<&str> = sets.iter().map(|s| s.image_id.as_str()).collect();
        assert_eq!(ids, ["b", "a"]);
        assert_eq!(sets[0].detections[1].confidence, 0.3);
    }

    #[test]
    fn errors_name_the_record() {
        let bad_size = r#"[{"image_id": 1, "category_id": 0, "bbox": [0, 0, 1, 1], "score": 0.5},
                           {"image_id": 1, "category_id": 0, "bbox": [0, 0, -1, 1], "score": 0.5}]"#;
        let e = parse(bad_size).unwrap_err();
        assert!(e.to_string().contains("[1].bbox"), "{e}");
        let bad_score = r#"[{"image_id": 1, "category_id": 0, "bbox": [0, 0, 1, 1], "score": 1.5}]"#;
        assert!(parse(bad_score).unwrap_err().to_string().contains("[0].score"));
        let unknown = r#"[{"image_id": 1, "category_id": 0, "bbox": [0, 0, 1, 1], "area": 1}]"#;
        let e = parse(unknown).unwrap_err();
        assert!(e.is_validation() && e.to_string().contains("[0]"), "{e}");
        assert!(parse("{").unwrap_err().is_validation());
    }

    #[test]
    fn write_then_read_round_trip() {
        let mut rng = rng_for(17, &[]);
        let sets: Vec<DetectionSet> = (0..50)
            .map(|i| {
                let dets = (0..20)
                    .map(|_| {
                        let x = rng.random_range(0.0..500.0);
                        let y = rng.random_range(0.0..500.0);
                        let w = rng.random_range(0.5..100.0);
                        let h = rng.random_range(0.5..100.0);
                        let b = BBox::new(x, y, x + w, y + h).unwrap();
                        Detection::new(b, rng.random_range(0..8), rng.random()).unwrap()
                    })
                    .collect();
                DetectionSet::with_detections(format!("img{i}"), SourceTag::Teacher, dets)
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        write_detections(&p, &records_from_sets(&sets)).unwrap();
        let back = load_detections(&p, SourceTag::Teacher).unwrap();
        assert_eq!(back.len(), sets.len());
        let mut n = 0;
        for (a, b) in sets.iter().zip(&back) {
            assert_eq!(a.image_id, b.image_id);
            for (da, db) in a.detections.iter().zip(&b.detections) {
                for (u, v) in [
                    (da.bbox.x1(), db.bbox.x1()),
                    (da.bbox.y1(), db.bbox.y1()),
                    (da.bbox.x2(), db.bbox.x2()),
                    (da.bbox.y2(), db.bbox.y2()),
                ] {
                    assert!((u - v).abs() <= 1e-6 + 1e-12 * u.abs(), "{u} vs {v}");
                }
                assert_eq!(da.confidence, db.confidence);
                assert_eq!(da.class_id, db.class_id);
                n += 1;
            }
        }
        assert_eq!(n, 1000);
    }

    #[test]
    fn ids_keep_their_json_type() {
        assert_eq!(ImageId::from_name("12"), ImageId::Int(12));
        assert_eq!(ImageId::from_name("012"), ImageId::Str("012".into()));
        let d = Detection::new(BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), 0, 0.5).unwrap();
        let r = DetectionRecord::from_detection("3", &d, Some(Provenance::Extended));
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(
            json,
            r#"{"image_id":3,"category_id":0,"bbox":[0.0,0.0,1.0,1.0],"score":0.5,"provenance":"extended"}"#
        );
    }
}
