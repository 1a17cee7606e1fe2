//! Global-local transformation: darkens and degrades daytime images using
//! channel statistics gathered from nighttime imagery, plus box-level low-light
//! masks.
//!
//! Every stage maps samples in `[0, 1]` to samples in `[0, 1]`. Randomness is
//! always passed in explicitly; [`pipeline::sample_plan`] draws all stage
//! parameters up front so a run can be replayed or composed by hand.

mod pipeline;
mod stages;

pub use pipeline::{
    apply_plan, glt_pipeline, sample_plan, GltConfig, KeepConfig, NoiseConfig, StageConfig,
    StagePlan,
};
pub use stages::{
    apply_local_masks, brightness_factors, brightness_transform, contrast_transform,
    gamma_transform, gaussian_blur, gaussian_kernel, gaussian_noise, gaussian_noise_with_std,
    keep_region, local_transform, random_keep, sample_keep_rect, sample_local_masks, KeepRect,
    LocalMask, OffsetMode, BLUR_TAPS, NOISE_STD,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar image with samples in `[0, 1]`, one plane per channel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlanes {
    width: usize,
    height: usize,
    planes: Vec<Vec<f64>>,
}

impl ImagePlanes {
    pub fn new(width: usize, height: usize, planes: Vec<Vec<f64>>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image", "zero-sized image"));
        }
        if planes.len() != 1 && planes.len() != 3 {
            return Err(Error::invalid(
                "image",
                format!("expected 1 or 3 channels, got {}", planes.len()),
            ));
        }
        for (c, p) in planes.iter().enumerate() {
            if p.len() != width * height {
                return Err(Error::invalid(
                    format!("image.channel[{c}]"),
                    format!("plane has {} samples, expected {}", p.len(), width * height),
                ));
            }
            if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::invalid(
                    format!("image.channel[{c}]"),
                    format!("sample {v} outside [0, 1]"),
                ));
            }
        }
        Ok(ImagePlanes {
            width,
            height,
            planes,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        ImagePlanes::new(width, height, vec![vec![value; width * height]; channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channel_count(&self) -> usize {
        self.planes.len()
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.planes[c]
    }

    pub fn planes(&self) -> &[Vec<f64>] {
        &self.planes
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.planes[c][y * self.width + x]
    }

    pub(crate) fn planes_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.planes
    }

    pub(crate) fn map_samples(&self, mut f: impl FnMut(usize, f64) -> f64) -> ImagePlanes {
        let planes = self
            .planes
            .iter()
            .enumerate()
            .map(|(c, p)| p.iter().map(|&v| f(c, v).clamp(0.0, 1.0)).collect())
            .collect();
        ImagePlanes {
            width: self.width,
            height: self.height,
            planes,
        }
    }

    pub(crate) fn same_shape(&self, other: &ImagePlanes) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.planes.len() == other.planes.len()
    }
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn channel_count(&self) -> usize {
        self.mean.len()
    }
}

pub fn compute_stats(img: &ImagePlanes) -> ChannelStats {
    let n = (img.width * img.height) as f64;
    let mut mean = Vec::with_capacity(img.channel_count());
    let mut std = Vec::with_capacity(img.channel_count());
    for p in &img.planes {
        let m = p.iter().sum::<f64>() / n;
        let var = p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean.push(m);
        std.push(var.sqrt());
    }
    ChannelStats { mean, std }
}

/// Channel statistics of a nighttime reference corpus, averaged uniformly over
/// per-image statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NightPrior {
    pub stats: ChannelStats,
    pub sample_count: usize,
}

impl NightPrior {
    pub fn from_stats(per_image: &[ChannelStats]) -> Result<Self> {
        let first = per_image
            .first()
            .ok_or_else(|| Error::invalid("night_prior", "no nighttime images to aggregate"))?;
        let channels = first.channel_count();
        let mut mean = vec![0.0; channels];
        let mut std = vec![0.0; channels];
        for (i, s) in per_image.iter().enumerate() {
            if s.channel_count() != channels {
                return Err(Error::invalid(
                    format!("night_prior.images[{i}]"),
                    format!("{} channels, expected {channels}", s.channel_count()),
                ));
            }
            for c in 0..channels {
                mean[c] += s.mean[c];
                std[c] += s.std[c];
            }
        }
        let n = per_image.len() as f64;
        mean.iter_mut().for_each(|v| *v /= n);
        std.iter_mut().for_each(|v| *v /= n);
        Ok(NightPrior {
            stats: ChannelStats { mean, std },
            sample_count: per_image.len(),
        })
    }

    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a ImagePlanes>) -> Result<Self> {
        let stats: Vec<ChannelStats> = images.into_iter().map(compute_stats).collect();
        NightPrior::from_stats(&stats)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_count < 1 {
            return Err(Error::invalid("night_prior.sample_count", "must be >= 1"));
        }
        let c = self.stats.mean.len();
        if c != 1 && c != 3 {
            return Err(Error::invalid("night_prior.stats.mean", "expected 1 or 3 channels"));
        }
        if self.stats.std.len() != c {
            return Err(Error::invalid(
                "night_prior.stats.std",
                "length differs from mean",
            ));
        }
        if self.stats.mean.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::invalid("night_prior.stats.mean", "values must lie in [0, 1]"));
        }
        if self.stats.std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid("night_prior.stats.std", "values must be finite and >= 0"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn stats_of_constant_and_two_pixel_images() {
        let s = compute_stats(&ImagePlanes::filled(4, 3, 3, 0.5).unwrap());
        assert_eq!(s.mean, vec![0.5; 3]);
        assert_eq!(s.std, vec![0.0; 3]);

        let s = compute_stats(&ImagePlanes::new(2, 1, vec![vec![0.0, 1.0]]).unwrap());
        assert_eq!(s.mean, vec![0.5]);
        assert_eq!(s.std, vec![0.5]);
    }

    #[test]
    fn stats_match_explicit_two_pass() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let planes: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..64).map(|_| rng.random::<f64>()).collect())
            .collect();
        let img = ImagePlanes::new(8, 8, planes.clone()).unwrap();
        let s = compute_stats(&img);
        for (c, p) in planes.iter().enumerate() {
            let mut sum = 0.0;
            for v in p {
                sum += v;
            }
            let mean = sum / 64.0;
            let mut sq = 0.0;
            for v in p {
                sq += (v - mean).powi(2);
            }
            assert!((s.mean[c] - mean).abs() < 1e-12);
            assert!((s.std[c] - (sq / 64.0).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn image_validation() {
        assert!(ImagePlanes::new(2, 2, vec![vec![0.0; 3]]).is_err());
        assert!(ImagePlanes::new(1, 1, vec![vec![1.5]]).is_err());
        assert!(ImagePlanes::new(1, 1, vec![vec![0.5]; 2]).is_err());
        assert!(ImagePlanes::new(0, 1, vec![vec![]]).is_err());
    }

    #[test]
    fn prior_averages_per_image_stats() {
        let a = ImagePlanes::filled(2, 2, 1, 0.2).unwrap();
        let b = ImagePlanes::new(2, 1, vec![vec![0.0, 0.4]]).unwrap();
        let p = NightPrior::from_images([&a, &b]).unwrap();
        assert_eq!(p.sample_count, 2);
        assert!((p.stats.mean[0] - 0.2).abs() < 1e-15);
        assert!((p.stats.std[0] - 0.1).abs() < 1e-15);
        assert!(NightPrior::from_stats(&[]).is_err());
    }
}
