//! Synthetic closed-loop harness.
//!
//! Detector training is replaced by a scalar *skill* per network. Scenes carry
//! ground-truth boxes plus background clutter; a detector of a given skill
//! finds each object with probability `skill * (1 - difficulty * (1 - skill))`,
//! jitters its box, and fires false positives on clutter. The loop then runs
//! the real pseudo-labelling machinery (PTC, AIT, EMA, phase gates) on those
//! detections and lets the student's skill follow pseudo-label F1.

use rand::Rng as _;
use rand_distr::{Beta, Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ait::{AitRecord, ThresholdState};
use crate::error::{Error, Result};
use crate::eval::{evaluate, pl_quality, EvalConfig, EvalReport, PlQuality};
use crate::geometry::{BBox, Detection, DetectionSet, SourceTag};
use crate::ptc::{filter_initial, ptc_fuse_detailed, Provenance, PtcConfig};
use crate::rng::{rng_for, Rng};
use crate::schedule::{ema_update, ParamVector, PhasePlan};

const SCENE_STREAM: u64 = 0x5CE7E;
const LOOP_STREAM: u64 = 0x1009;
const FINAL_STREAM: u64 = 0xF1A1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: f64,
    pub height: f64,
    pub class_count: usize,
    pub mean_objects: f64,
    /// Side-length range of generated boxes; sizes are log-uniform.
    pub min_size: f64,
    pub max_size: f64,
    /// Expected number of background structures detectors may fire on.
    pub mean_clutter: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 640.0,
            height: 480.0,
            class_count: 6,
            mean_objects: 6.0,
            min_size: 12.0,
            max_size: 200.0,
            mean_clutter: 3.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        let p = |f: &str| format!("{path}.{f}");
        if !(self.width.is_finite() && self.width > 0.0) {
            return Err(Error::invalid(p("width"), "must be positive"));
        }
        if !(self.height.is_finite() && self.height > 0.0) {
            return Err(Error::invalid(p("height"), "must be positive"));
        }
        if self.class_count == 0 {
            return Err(Error::invalid(p("class_count"), "must be at least 1"));
        }
        if !(self.mean_objects.is_finite() && self.mean_objects >= 0.0) {
            return Err(Error::invalid(p("mean_objects"), "must be finite and >= 0"));
        }
        if !(self.mean_clutter.is_finite() && self.mean_clutter >= 0.0) {
            return Err(Error::invalid(p("mean_clutter"), "must be finite and >= 0"));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size.is_finite()) {
            return Err(Error::invalid(p("min_size"), "need 0 < min_size <= max_size"));
        }
        if self.min_size > self.width.min(self.height) {
            return Err(Error::invalid(p("min_size"), "boxes would not fit on the canvas"));
        }
        Ok(())
    }
}

/// Background structure that looks like an object of `class_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clutter {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub gt: DetectionSet,
    pub class_count: usize,
    /// One entry per ground-truth box, in `[0, 1]`.
    pub difficulty: Vec<f64>,
    pub clutter: Vec<Clutter>,
}

fn poisson(rng: &mut Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|p| p.sample(rng) as usize).unwrap_or(0)
}

/// A box placed uniformly on the canvas with log-uniform size and aspect
/// ratio in [1/2, 2]. Returns the box and its normalized size in [0, 1]
/// (0 = smallest).
fn random_box(rng: &mut Rng, cfg: &SceneConfig) -> (BBox, f64) {
    let (lo, hi) = (cfg.min_size.ln(), cfg.max_size.ln());
    let u: f64 = rng.random();
    let log_s = lo + u * (hi - lo);
    let log_a = (rng.random::<f64>() - 0.5) * 2.0 * std::f64::consts::LN_2;
    let s = log_s.exp();
    let w = (s * (0.5 * log_a).exp()).min(cfg.width);
    let h = (s * (-0.5 * log_a).exp()).min(cfg.height);
    let x1 = rng.random::<f64>() * (cfg.width - w);
    let y1 = rng.random::<f64>() * (cfg.height - h);
    let bbox = BBox::new(x1, y1, (x1 + w).min(cfg.width), (y1 + h).min(cfg.height))
        .expect("generated box has positive extent");
    let size = if hi > lo { (log_s - lo) / (hi - lo) } else { 0.5 };
    (bbox, size)
}

pub fn generate_scene(index: usize, cfg: &SceneConfig, seed: u64) -> Scene {
    let mut rng = rng_for(seed, &[SCENE_STREAM, index as u64]);
    let n = poisson(&mut rng, cfg.mean_objects);
    let mut gt = Vec::with_capacity(n);
    let mut difficulty = Vec::with_capacity(n);
    for _ in 0..n {
        let (bbox, size) = random_box(&mut rng, cfg);
        let class_id = rng.random_range(0..cfg.class_count);
        let darkness: f64 = rng.random();
        difficulty.push(0.5 * (1.0 - size) + 0.5 * darkness);
        gt.push(Detection::new(bbox, class_id, 1.0).expect("valid confidence"));
    }
    let clutter = (0..poisson(&mut rng, cfg.mean_clutter))
        .map(|_| {
            let (bbox, _) = random_box(&mut rng, cfg);
            Clutter {
                bbox,
                class_id: rng.random_range(0..cfg.class_count),
            }
        })
        .collect();
    let image_id = format!("scene_{index:05}");
    Scene {
        gt: DetectionSet::with_detections(image_id.clone(), SourceTag::GroundTruth, gt),
        image_id,
        width: cfg.width,
        height: cfg.height,
        class_count: cfg.class_count,
        difficulty,
        clutter,
    }
}

pub fn generate_scenes(n: usize, cfg: &SceneConfig, seed: u64) -> Result<Vec<Scene>> {
    cfg.validate("sim.scenes")?;
    Ok((0..n).map(|i| generate_scene(i, cfg, seed)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorModel {
    pub skill: f64,
    /// Box jitter scale as a fraction of box size, multiplied by `1 - skill`
    /// and by `0.5 + difficulty`.
    pub loc_noise: f64,
    /// Extra jitter on false positives; clutter has no crisp extent.
    pub fp_loc_noise: f64,
    /// Concentration of the Beta confidence distribution.
    pub conf_sharpness: f64,
    /// Expected false positives per scene.
    pub fp_rate: f64,
    /// Mean confidence of false positives.
    pub fp_confidence: f64,
    /// Stream identifier separating this network's draws from the others.
    pub rng_seed: u64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        DetectorModel {
            skill: 0.7,
            loc_noise: 0.15,
            fp_loc_noise: 0.1,
            conf_sharpness: 8.0,
            fp_rate: 2.0,
            fp_confidence: 0.3,
            rng_seed: 0,
        }
    }
}

impl DetectorModel {
    pub fn with_skill(skill: f64, rng_seed: u64) -> Self {
        DetectorModel {
            skill,
            rng_seed,
            ..DetectorModel::default()
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let p = |f: &str| format!("{path}.{f}");
        if !(0.0..=1.0).contains(&self.skill) {
            return Err(Error::invalid(p("skill"), "must lie in [0, 1]"));
        }
        if !(self.loc_noise.is_finite() && self.loc_noise >= 0.0) {
            return Err(Error::invalid(p("loc_noise"), "must be finite and >= 0"));
        }
        if !(self.fp_loc_noise.is_finite() && self.fp_loc_noise >= 0.0) {
            return Err(Error::invalid(p("fp_loc_noise"), "must be finite and >= 0"));
        }
        if !(self.conf_sharpness.is_finite() && self.conf_sharpness > 0.0) {
            return Err(Error::invalid(p("conf_sharpness"), "must be finite and > 0"));
        }
        if !(self.fp_rate.is_finite() && self.fp_rate >= 0.0) {
            return Err(Error::invalid(p("fp_rate"), "must be finite and >= 0"));
        }
        if !(self.fp_confidence > 0.0 && self.fp_confidence < 1.0) {
            return Err(Error::invalid(p("fp_confidence"), "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn detection_probability(&self, difficulty: f64) -> f64 {
        self.skill * (1.0 - difficulty * (1.0 - self.skill))
    }

    /// Mean of the confidence given to a found object. Equals 1 at skill 1 so
    /// a perfect detector clears every threshold.
    pub fn mean_confidence(&self, difficulty: f64) -> f64 {
        (1.0 - (1.0 - self.skill) * (0.25 + 0.75 * difficulty)).clamp(0.0, 1.0)
    }

    pub fn correct_class_probability(&self, class_count: usize) -> f64 {
        self.skill + (1.0 - self.skill) / class_count as f64
    }

    fn confidence(&self, rng: &mut Rng, mean: f64) -> f64 {
        if mean >= 1.0 {
            return 1.0;
        }
        if mean <= 0.0 {
            return 0.0;
        }
        let k = self.conf_sharpness;
        Beta::new(mean * k, (1.0 - mean) * k)
            .map(|b| b.sample(rng))
            .unwrap_or(mean)
            .clamp(0.0, 1.0)
    }

    fn class(&self, rng: &mut Rng, true_class: usize, class_count: usize) -> usize {
        let keep = rng.random::<f64>() < self.correct_class_probability(class_count);
        let other = if class_count > 1 {
            let k = rng.random_range(0..class_count - 1);
            if k >= true_class {
                k + 1
            } else {
                k
            }
        } else {
            true_class
        };
        if keep {
            true_class
        } else {
            other
        }
    }

    fn jitter(&self, rng: &mut Rng, bbox: &BBox, sigma: f64, width: f64, height: f64) -> Option<BBox> {
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        let z: [f64; 4] = std::array::from_fn(|_| n.sample(rng));
        if sigma == 0.0 {
            return Some(*bbox);
        }
        let (cx, cy) = bbox.center();
        let (w, h) = (bbox.width(), bbox.height());
        let cx = cx + z[0] * sigma * w;
        let cy = cy + z[1] * sigma * h;
        let w = w * (z[2] * sigma).exp();
        let h = h * (z[3] * sigma).exp();
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
            .ok()?
            .clip(width, height)
    }
}

/// Detections of one network on one scene.
pub fn detect(model: &DetectorModel, scene: &Scene, source: SourceTag, rng: &mut Rng) -> DetectionSet {
    let mut out = Vec::new();
    for (g, &d) in scene.gt.detections.iter().zip(&scene.difficulty) {
        let found = rng.random::<f64>() < model.detection_probability(d);
        let sigma = model.loc_noise * (1.0 - model.skill) * (0.5 + d);
        let bbox = model.jitter(rng, &g.bbox, sigma, scene.width, scene.height);
        let confidence = model.confidence(rng, model.mean_confidence(d));
        let class_id = model.class(rng, g.class_id, scene.class_count);
        if let (true, Some(bbox)) = (found, bbox) {
            out.push(Detection::new(bbox, class_id, confidence).expect("confidence in range"));
        }
    }
    let canvas = SceneConfig {
        width: scene.width,
        height: scene.height,
        class_count: scene.class_count,
        ..SceneConfig::default()
    };
    for _ in 0..poisson(rng, model.fp_rate) {
        let (bbox, true_class) = if scene.clutter.is_empty() {
            let (b, _) = random_box(rng, &canvas);
            (Some(b), rng.random_range(0..scene.class_count))
        } else {
            let c = &scene.clutter[rng.random_range(0..scene.clutter.len())];
            let sigma = model.loc_noise * (1.0 - model.skill) + model.fp_loc_noise;
            (model.jitter(rng, &c.bbox, sigma, scene.width, scene.height), c.class_id)
        };
        let class_id = model.class(rng, true_class, scene.class_count);
        let confidence = model.confidence(rng, model.fp_confidence);
        if let Some(bbox) = bbox {
            out.push(Detection::new(bbox, class_id, confidence).expect("confidence in range"));
        }
    }
    DetectionSet::with_detections(scene.image_id.clone(), source, out)
}

/// Deterministic detections of `model` on every scene, one derived stream
/// per scene.
pub fn detect_all(model: &DetectorModel, scenes: &[Scene], source: SourceTag, seed: u64) -> Vec<DetectionSet> {
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = rng_for(seed, &[FINAL_STREAM, i as u64, model.rng_seed]);
            detect(model, s, source, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Models {
    pub teacher: DetectorModel,
    pub proxy: DetectorModel,
    pub student: DetectorModel,
}

impl Default for Models {
    fn default() -> Self {
        Models {
            teacher: DetectorModel::with_skill(0.7, 1),
            proxy: DetectorModel::with_skill(0.65, 2),
            student: DetectorModel::with_skill(0.7, 3),
        }
    }
}

impl Models {
    pub fn validate(&self, path: &str) -> Result<()> {
        self.teacher.validate(&format!("{path}.teacher"))?;
        self.proxy.validate(&format!("{path}.proxy"))?;
        self.student.validate(&format!("{path}.student"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub epochs: usize,
    /// Rate at which student skill follows pseudo-label F1.
    pub lr: f64,
    /// Rate at which proxy skill follows the F1 of the teacher's initial
    /// pseudo-labels.
    pub proxy_lr: f64,
    /// Skill supported by source supervision alone.
    pub source_skill: f64,
    /// Pull toward `source_skill` during burn-up, standing in for the
    /// supervised source loss that keeps training alongside the pseudo-label
    /// loss. Burn-in uses `lr`.
    pub source_lr: f64,
    pub use_ptc: bool,
    pub use_ait: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            epochs: 50,
            lr: 0.1,
            proxy_lr: 0.1,
            source_skill: 0.7,
            source_lr: 0.3,
            use_ptc: true,
            use_ait: true,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        for (name, v) in [
            ("lr", self.lr),
            ("proxy_lr", self.proxy_lr),
            ("source_skill", self.source_skill),
            ("source_lr", self.source_lr),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{path}.{name}"), "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Images processed before this epoch.
    pub iteration: u64,
    pub in_burn_up: bool,
    pub ptc_enabled: bool,
    pub ait_enabled: bool,
    /// Threshold after this epoch's update.
    pub tau: f64,
    pub teacher_skill: f64,
    pub proxy_skill: f64,
    pub student_skill: f64,
    /// Quality of the pseudo-labels that supervised the student; absent
    /// during burn-in.
    pub pseudo_labels: Option<PlQuality>,
    pub initial_labels: Option<PlQuality>,
    pub n_initial: usize,
    pub n_extended: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub epochs: Vec<EpochRecord>,
    pub ait_history: Vec<AitRecord>,
    pub final_models: Models,
    pub final_eval: EvalReport,
}

impl LoopReport {
    pub fn tau_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.tau).collect()
    }

    pub fn student_skill_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.student_skill).collect()
    }

    /// Pseudo-label recall per epoch, `None` during burn-in.
    pub fn recall_trace(&self) -> Vec<Option<f64>> {
        self.epochs.iter().map(|e| e.pseudo_labels.map(|q| q.recall)).collect()
    }

    pub fn write_trace_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "epoch",
            "iteration",
            "in_burn_up",
            "ptc_enabled",
            "ait_enabled",
            "tau",
            "teacher_skill",
            "proxy_skill",
            "student_skill",
            "pl_precision",
            "pl_recall",
            "pl_f1",
            "n_initial",
            "n_extended",
        ])?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for e in &self.epochs {
            wr.write_record([
                e.epoch.to_string(),
                e.iteration.to_string(),
                e.in_burn_up.to_string(),
                e.ptc_enabled.to_string(),
                e.ait_enabled.to_string(),
                e.tau.to_string(),
                e.teacher_skill.to_string(),
                e.proxy_skill.to_string(),
                e.student_skill.to_string(),
                opt(e.pseudo_labels.map(|q| q.precision)),
                opt(e.pseudo_labels.map(|q| q.recall)),
                opt(e.pseudo_labels.map(|q| q.f1)),
                e.n_initial.to_string(),
                e.n_extended.to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

struct SceneOutcome {
    quality: PlQuality,
    initial_quality: PlQuality,
    matched: Vec<f64>,
    n_initial: usize,
    n_extended: usize,
}

fn scene_step(
    scene: &Scene,
    index: usize,
    epoch: usize,
    models: &Models,
    ptc: &PtcConfig,
    use_ptc: bool,
    seed: u64,
) -> Result<SceneOutcome> {
    let stream = |m: &DetectorModel| rng_for(seed, &[LOOP_STREAM, epoch as u64, index as u64, m.rng_seed]);
    let teacher = detect(&models.teacher, scene, SourceTag::Teacher, &mut stream(&models.teacher));
    let proxy = detect(&models.proxy, scene, SourceTag::Proxy, &mut stream(&models.proxy));
    let initial = filter_initial(&teacher, ptc);
    let initial_quality = pl_quality(
        &initial.detections().cloned().collect::<Vec<_>>(),
        &scene.gt.detections,
        0.5,
    );
    let (labels, matched) = if use_ptc {
        let fused = ptc_fuse_detailed(&teacher, &proxy, ptc)?;
        (fused.labels, fused.matched_confidences)
    } else {
        (initial, Vec::new())
    };
    let dets: Vec<Detection> = labels.detections().cloned().collect();
    Ok(SceneOutcome {
        quality: pl_quality(&dets, &scene.gt.detections, 0.5),
        initial_quality,
        matched,
        n_initial: labels.count(Provenance::Initial),
        n_extended: labels.count(Provenance::Extended),
    })
}

fn ema_skill(teacher: f64, student: f64, alpha: f64) -> Result<f64> {
    let t = ParamVector::new(vec![teacher])?;
    let s = ParamVector::new(vec![student])?;
    Ok(ema_update(&t, &s, alpha)?.values()[0])
}

/// Runs the teacher / proxy / student loop for `cfg.epochs` passes over
/// `scenes`. One pass is `scenes.len()` iterations of `plan`. The threshold
/// adapts once per epoch from the pooled matched confidences, and the teacher
/// moves toward the student by `ema_alpha^scenes.len()` per epoch, which is
/// the per-image EMA applied once per image with the student held fixed.
pub fn run_uda_loop(
    plan: &PhasePlan,
    ptc: &PtcConfig,
    mut ait: ThresholdState,
    models: &Models,
    scenes: &[Scene],
    cfg: &LoopConfig,
    seed: u64,
) -> Result<LoopReport> {
    plan.validate("plan")?;
    ptc.validate("ptc")?;
    models.validate("sim.models")?;
    cfg.validate("sim.loop")?;
    let mut m = *models;
    let n = scenes.len() as u64;
    let alpha_epoch = plan.ema_alpha.powf(n as f64);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut seen_burn_up = false;

    for epoch in 0..cfg.epochs {
        let iteration = epoch as u64 * n;
        let flags = plan.phase_at(iteration);
        let ptc_on = cfg.use_ptc && flags.ptc_enabled;
        let ait_on = cfg.use_ait && flags.ait_enabled;
        let mut record = EpochRecord {
            epoch,
            iteration,
            in_burn_up: flags.in_burn_up,
            ptc_enabled: ptc_on,
            ait_enabled: ait_on,
            tau: ait.tau(),
            teacher_skill: m.teacher.skill,
            proxy_skill: m.proxy.skill,
            student_skill: m.student.skill,
            pseudo_labels: None,
            initial_labels: None,
            n_initial: 0,
            n_extended: 0,
        };

        if !flags.in_burn_up {
            m.student.skill += cfg.lr * (cfg.source_skill - m.student.skill);
            m.student.skill = m.student.skill.clamp(0.0, 1.0);
            record.student_skill = m.student.skill;
            records.push(record);
            continue;
        }
        if !seen_burn_up {
            seen_burn_up = true;
            if plan.burn_in_iters > 0 {
                m.teacher.skill = m.student.skill;
            }
        }

        let live = ptc.with_tau_cls(ait.tau());
        let outcomes: Vec<SceneOutcome> = scenes
            .par_iter()
            .enumerate()
            .map(|(i, s)| scene_step(s, i, epoch, &m, &live, ptc_on, seed))
            .collect::<Result<_>>()?;

        let zero = PlQuality::from_counts(0, 0, 0);
        let quality = outcomes.iter().fold(zero, |acc, o| acc.merge(&o.quality));
        let initial = outcomes.iter().fold(zero, |acc, o| acc.merge(&o.initial_quality));

        let s = m.student.skill;
        m.student.skill = (s + cfg.lr * (quality.f1 - s) + cfg.source_lr * (cfg.source_skill - s)).clamp(0.0, 1.0);
        let p = m.proxy.skill;
        m.proxy.skill = (p + cfg.proxy_lr * (initial.f1 - p) + cfg.source_lr * (cfg.source_skill - p)).clamp(0.0, 1.0);
        if ait_on {
            let matched: Vec<f64> = outcomes.iter().flat_map(|o| o.matched.iter().copied()).collect();
            ait.step(&matched, iteration + n)?;
        }
        if n > 0 {
            m.teacher.skill = ema_skill(m.teacher.skill, m.student.skill, alpha_epoch)?.clamp(0.0, 1.0);
        }

        record.tau = ait.tau();
        record.teacher_skill = m.teacher.skill;
        record.proxy_skill = m.proxy.skill;
        record.student_skill = m.student.skill;
        record.pseudo_labels = Some(quality);
        record.initial_labels = Some(initial);
        record.n_initial = outcomes.iter().map(|o| o.n_initial).sum();
        record.n_extended = outcomes.iter().map(|o| o.n_extended).sum();
        records.push(record);
    }

    let student_dets = detect_all(&m.student, scenes, SourceTag::Student, seed);
    let gt: Vec<DetectionSet> = scenes.iter().map(|s| s.gt.clone()).collect();
    let final_eval = evaluate(&student_dets, &gt, &EvalConfig::default())?;
    Ok(LoopReport {
        epochs: records,
        ait_history: ait.history().to_vec(),
        final_models: m,
        final_eval,
    })
}
