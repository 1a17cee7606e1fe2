use rand::Rng;
use serde::{Deserialize, Serialize};

use super::stages::{
    apply_local_masks, brightness_transform, contrast_transform, gamma_transform, gaussian_blur,
    gaussian_noise_with_std, keep_region, sample_keep_rect, sample_local_masks, uniform, KeepRect,
    LocalMask, OffsetMode,
};
use super::{ImagePlanes, NightPrior};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng::Rng as StreamRng;

/// Application probability and parameter range of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub probability: f64,
    pub range: [f64; 2],
}

impl StageConfig {
    const fn new(probability: f64, lo: f64, hi: f64) -> Self {
        StageConfig {
            probability,
            range: [lo, hi],
        }
    }

    fn validate(&self, path: &str) -> Result<()> {
        check_probability(self.probability, &format!("{path}.probability"))?;
        check_range(self.range, &format!("{path}.range"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeepConfig {
    pub probability: f64,
    pub area_fraction: [f64; 2],
    pub aspect_ratio: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub probability: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GltConfig {
    /// Gaussian blur sigma.
    pub blur: StageConfig,
    /// Global gamma exponent.
    pub gamma: StageConfig,
    pub random_keep: KeepConfig,
    /// Brightness `beta`.
    pub brightness: StageConfig,
    /// Contrast `beta`.
    pub contrast: StageConfig,
    pub noise: NoiseConfig,
    /// Box-level low-light exponent.
    pub local: StageConfig,
    pub offset_mode: OffsetMode,
    pub rng_seed: u64,
}

impl Default for GltConfig {
    fn default() -> Self {
        GltConfig {
            blur: StageConfig::new(0.5, 0.1, 2.0),
            gamma: StageConfig::new(0.4, 1.25, 5.0),
            random_keep: KeepConfig {
                probability: 0.5,
                area_fraction: [0.1, 0.3],
                aspect_ratio: [0.5, 2.0],
            },
            brightness: StageConfig::new(0.55, 0.2, 0.8),
            contrast: StageConfig::new(0.55, 0.2, 0.8),
            noise: NoiseConfig {
                probability: 0.5,
                std: 0.1,
            },
            local: StageConfig::new(0.5, 1.5, 5.0),
            offset_mode: OffsetMode::Magnitude,
            rng_seed: 0,
        }
    }
}

impl GltConfig {
    /// Every stage switched off.
    pub fn disabled() -> Self {
        let mut cfg = GltConfig::default();
        cfg.blur.probability = 0.0;
        cfg.gamma.probability = 0.0;
        cfg.random_keep.probability = 0.0;
        cfg.brightness.probability = 0.0;
        cfg.contrast.probability = 0.0;
        cfg.noise.probability = 0.0;
        cfg.local.probability = 0.0;
        cfg
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        self.blur.validate(&format!("{path}.blur"))?;
        if self.blur.range[0] <= 0.0 {
            return Err(Error::invalid(format!("{path}.blur.range"), "sigma must be positive"));
        }
        self.gamma.validate(&format!("{path}.gamma"))?;
        if self.gamma.range[0] <= 0.0 {
            return Err(Error::invalid(format!("{path}.gamma.range"), "gamma must be positive"));
        }
        let k = &self.random_keep;
        check_probability(k.probability, &format!("{path}.random_keep.probability"))?;
        check_range(k.area_fraction, &format!("{path}.random_keep.area_fraction"))?;
        if k.area_fraction[0] <= 0.0 || k.area_fraction[1] > 1.0 {
            return Err(Error::invalid(
                format!("{path}.random_keep.area_fraction"),
                "must lie in (0, 1]",
            ));
        }
        check_range(k.aspect_ratio, &format!("{path}.random_keep.aspect_ratio"))?;
        if k.aspect_ratio[0] <= 0.0 {
            return Err(Error::invalid(
                format!("{path}.random_keep.aspect_ratio"),
                "must be positive",
            ));
        }
        self.brightness.validate(&format!("{path}.brightness"))?;
        self.contrast.validate(&format!("{path}.contrast"))?;
        check_probability(self.noise.probability, &format!("{path}.noise.probability"))?;
        if !(self.noise.std.is_finite() && self.noise.std >= 0.0) {
            return Err(Error::invalid(format!("{path}.noise.std"), "must be finite and >= 0"));
        }
        self.local.validate(&format!("{path}.local"))?;
        if self.local.range[0] <= 0.0 {
            return Err(Error::invalid(format!("{path}.local.range"), "exponent must be positive"));
        }
        Ok(())
    }
}

fn check_probability(p: f64, path: &str) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::invalid(path, format!("probability {p} outside [0, 1]")))
    }
}

fn check_range(r: [f64; 2], path: &str) -> Result<()> {
    if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] {
        Ok(())
    } else {
        Err(Error::invalid(path, format!("bounds {r:?} must be finite with lo <= hi")))
    }
}

/// Concrete draw of every stage: `None` means the stage is skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub blur_sigma: Option<f64>,
    pub gamma: Option<f64>,
    pub keep: Option<KeepRect>,
    pub brightness_beta: Option<f64>,
    pub contrast_beta: Option<f64>,
    /// Seed of the per-sample noise stream.
    pub noise_seed: Option<u64>,
    pub local: Option<Vec<LocalMask>>,
}

impl StagePlan {
    pub fn identity() -> Self {
        StagePlan {
            blur_sigma: None,
            gamma: None,
            keep: None,
            brightness_beta: None,
            contrast_beta: None,
            noise_seed: None,
            local: None,
        }
    }
}

/// Draws gates and parameters for all seven stages. The gate and the
/// parameters of every stage are drawn whether or not the stage fires, so
/// changing one probability never shifts the draws of another stage.
pub fn sample_plan<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    boxes: &[BBox],
    cfg: &GltConfig,
    rng: &mut R,
) -> StagePlan {
    let gate = |rng: &mut R, p: f64| rng.random::<f64>() < p;

    let blur_on = gate(rng, cfg.blur.probability);
    let sigma = uniform(rng, cfg.blur.range);
    let gamma_on = gate(rng, cfg.gamma.probability);
    let gamma = uniform(rng, cfg.gamma.range);
    let keep_on = gate(rng, cfg.random_keep.probability);
    let keep = sample_keep_rect(
        width,
        height,
        cfg.random_keep.area_fraction,
        cfg.random_keep.aspect_ratio,
        rng,
    );
    let bright_on = gate(rng, cfg.brightness.probability);
    let bright = uniform(rng, cfg.brightness.range);
    let contrast_on = gate(rng, cfg.contrast.probability);
    let contrast = uniform(rng, cfg.contrast.range);
    let noise_on = gate(rng, cfg.noise.probability);
    let noise_seed: u64 = rng.random();
    let local_on = gate(rng, cfg.local.probability);
    let masks = sample_local_masks(width, height, boxes, cfg.local.range, rng);

    StagePlan {
        blur_sigma: blur_on.then_some(sigma),
        gamma: gamma_on.then_some(gamma),
        keep: keep_on.then_some(keep),
        brightness_beta: bright_on.then_some(bright),
        contrast_beta: contrast_on.then_some(contrast),
        noise_seed: noise_on.then_some(noise_seed),
        local: local_on.then_some(masks),
    }
}

/// Runs the stages in order blur, gamma, random keep, brightness, contrast,
/// noise, local. Random keep restores its region from the pipeline input.
pub fn apply_plan(
    img: &ImagePlanes,
    prior: &NightPrior,
    plan: &StagePlan,
    cfg: &GltConfig,
) -> Result<ImagePlanes> {
    let mut cur = img.clone();
    if let Some(sigma) = plan.blur_sigma {
        cur = gaussian_blur(&cur, sigma)?;
    }
    if let Some(g) = plan.gamma {
        cur = gamma_transform(&cur, g)?;
    }
    if let Some(rect) = plan.keep {
        cur = keep_region(&cur, img, rect)?;
    }
    if let Some(beta) = plan.brightness_beta {
        cur = brightness_transform(&cur, prior, beta, cfg.offset_mode)?;
    }
    if let Some(beta) = plan.contrast_beta {
        cur = contrast_transform(&cur, prior, beta)?;
    }
    if let Some(seed) = plan.noise_seed {
        let mut noise_rng = <StreamRng as rand::SeedableRng>::seed_from_u64(seed);
        cur = gaussian_noise_with_std(&cur, cfg.noise.std, &mut noise_rng);
    }
    if let Some(masks) = &plan.local {
        cur = apply_local_masks(&cur, masks);
    }
    Ok(cur)
}

pub fn glt_pipeline<R: Rng + ?Sized>(
    img: &ImagePlanes,
    boxes: &[BBox],
    prior: &NightPrior,
    cfg: &GltConfig,
    rng: &mut R,
) -> Result<ImagePlanes> {
    let plan = sample_plan(img.width(), img.height(), boxes, cfg, rng);
    apply_plan(img, prior, &plan, cfg)
}
