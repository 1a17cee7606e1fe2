use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{compute_stats, ImagePlanes, NightPrior};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Blur kernel length.
pub const BLUR_TAPS: usize = 11;
/// Standard deviation of the additive sensor noise.
pub const NOISE_STD: f64 = 0.1;

const FACTOR_MIN: f64 = 0.2;
const FACTOR_MAX: f64 = 1.0;

/// How the per-channel luminance offset between night and day enters the
/// brightness factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetMode {
    /// `v_c = beta * |mu_night - mu_day|`
    #[default]
    Magnitude,
    /// `v_c = beta * (mu_night - mu_day)`; a darker night prior makes `v_c`
    /// negative and the factor pins to its lower bound.
    Signed,
}

fn check_prior(img: &ImagePlanes, prior: &NightPrior) -> Result<()> {
    if prior.stats.channel_count() != img.channel_count() {
        return Err(Error::invalid(
            "night_prior",
            format!(
                "prior has {} channels, image has {}",
                prior.stats.channel_count(),
                img.channel_count()
            ),
        ));
    }
    Ok(())
}

/// Per-channel multiplicative factors used by [`brightness_transform`].
pub fn brightness_factors(
    img: &ImagePlanes,
    prior: &NightPrior,
    beta: f64,
    mode: OffsetMode,
) -> Result<Vec<f64>> {
    check_prior(img, prior)?;
    let day = compute_stats(img);
    Ok(day
        .mean
        .iter()
        .zip(&prior.stats.mean)
        .map(|(&mu_d, &mu_n)| {
            let offset = mu_n - mu_d;
            let v = match mode {
                OffsetMode::Magnitude => beta * offset.abs(),
                OffsetMode::Signed => beta * offset,
            };
            v.clamp(FACTOR_MIN, FACTOR_MAX)
        })
        .collect())
}

/// Scales every channel by `clamp(v_c, 0.2, 1.0)` where `v_c` is `beta` times
/// the night/day luminance offset of that channel.
pub fn brightness_transform(
    img: &ImagePlanes,
    prior: &NightPrior,
    beta: f64,
    mode: OffsetMode,
) -> Result<ImagePlanes> {
    let f = brightness_factors(img, prior, beta, mode)?;
    Ok(img.map_samples(|c, v| v * f[c]))
}

/// Shrinks each channel about its mean by `clamp(beta * sigma_night / sigma_day, 0.2, 1.0)`.
/// Channels with zero spread pass through unchanged.
pub fn contrast_transform(img: &ImagePlanes, prior: &NightPrior, beta: f64) -> Result<ImagePlanes> {
    check_prior(img, prior)?;
    let day = compute_stats(img);
    let k: Vec<Option<f64>> = day
        .std
        .iter()
        .zip(&prior.stats.std)
        .map(|(&sd, &sn)| (sd > 0.0).then(|| (beta * sn / sd).clamp(FACTOR_MIN, FACTOR_MAX)))
        .collect();
    Ok(img.map_samples(|c, v| match k[c] {
        Some(k) => (v - day.mean[c]) * k + day.mean[c],
        None => v,
    }))
}

pub fn gamma_transform(img: &ImagePlanes, gamma: f64) -> Result<ImagePlanes> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::invalid("gamma", format!("must be positive, got {gamma}")));
    }
    Ok(img.map_samples(|_, v| v.powf(gamma)))
}

pub fn gaussian_noise<R: Rng + ?Sized>(img: &ImagePlanes, rng: &mut R) -> ImagePlanes {
    gaussian_noise_with_std(img, NOISE_STD, rng)
}

/// Adds i.i.d. `N(0, std)` noise to every sample and clamps to `[0, 1]`.
/// `std == 0` is the identity.
pub fn gaussian_noise_with_std<R: Rng + ?Sized>(
    img: &ImagePlanes,
    std: f64,
    rng: &mut R,
) -> ImagePlanes {
    if std == 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, std).expect("finite positive std");
    img.map_samples(|_, v| v + normal.sample(rng))
}

/// Normalized 11-tap Gaussian kernel.
pub fn gaussian_kernel(sigma: f64) -> Result<[f64; BLUR_TAPS]> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid("blur.sigma", format!("must be positive, got {sigma}")));
    }
    let r = (BLUR_TAPS / 2) as f64;
    let mut k = [0.0; BLUR_TAPS];
    for (i, w) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *w = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    Ok(k)
}

/// Separable Gaussian blur with border replication.
pub fn gaussian_blur(img: &ImagePlanes, sigma: f64) -> Result<ImagePlanes> {
    let k = gaussian_kernel(sigma)?;
    let (w, h) = (img.width(), img.height());
    let r = (BLUR_TAPS / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut out = img.clone();
    for plane in out.planes_mut() {
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * plane[y * w + clamp(x as isize + t as isize - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * tmp[clamp(y as isize + t as isize - r, h) * w + x])
                    .sum();
                plane[y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Pixel rectangle `[x, x + w) x [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeepRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl KeepRect {
    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

/// Draws a rectangle whose area fraction is uniform in `area_fraction` and whose
/// aspect ratio (w / h) is uniform in `aspect_ratio`, placed uniformly. After
/// rounding to whole pixels the side lengths are nudged so the realised area
/// fraction stays inside `area_fraction` whenever the image is large enough
/// for that to be possible.
pub fn sample_keep_rect<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    area_fraction: [f64; 2],
    aspect_ratio: [f64; 2],
    rng: &mut R,
) -> KeepRect {
    let frac = uniform(rng, area_fraction);
    let aspect = uniform(rng, aspect_ratio);
    let total = (width * height) as f64;
    let target = frac * total;

    let mut w = (target * aspect).sqrt().round().clamp(1.0, width as f64) as usize;
    let mut h = (target / w as f64).round().clamp(1.0, height as f64) as usize;
    if h == height {
        w = (target / h as f64).round().clamp(1.0, width as f64) as usize;
    }

    let lo = area_fraction[0] * total;
    let hi = area_fraction[1] * total;
    // each nudge moves the area monotonically toward the band
    for _ in 0..(width + height) {
        let a = (w * h) as f64;
        if a < lo {
            if h < height && (w >= width || h <= w) {
                h += 1;
            } else if w < width {
                w += 1;
            } else {
                break;
            }
        } else if a > hi {
            if h > 1 && (w <= 1 || h >= w) {
                h -= 1;
            } else if w > 1 {
                w -= 1;
            } else {
                break;
            }
        } else {
            break;
        }
    }

    let x = rng.random_range(0..=width - w);
    let y = rng.random_range(0..=height - h);
    KeepRect { x, y, w, h }
}

/// Copies `previous` into `enhanced` inside `rect`.
pub fn keep_region(
    enhanced: &ImagePlanes,
    previous: &ImagePlanes,
    rect: KeepRect,
) -> Result<ImagePlanes> {
    if !enhanced.same_shape(previous) {
        return Err(Error::invalid(
            "random_keep",
            format!(
                "dimension mismatch: {}x{}x{} vs {}x{}x{}",
                enhanced.width(),
                enhanced.height(),
                enhanced.channel_count(),
                previous.width(),
                previous.height(),
                previous.channel_count()
            ),
        ));
    }
    let w = enhanced.width();
    let x_end = (rect.x + rect.w).min(w);
    let y_end = (rect.y + rect.h).min(enhanced.height());
    let mut out = enhanced.clone();
    for (dst, src) in out.planes_mut().iter_mut().zip(previous.planes()) {
        for y in rect.y..y_end {
            dst[y * w + rect.x..y * w + x_end].copy_from_slice(&src[y * w + rect.x..y * w + x_end]);
        }
    }
    Ok(out)
}

/// Restores a random region of `enhanced` from `previous`, with area fraction
/// in `[0.1, 0.3]` and aspect ratio in `[0.5, 2.0]`.
pub fn random_keep<R: Rng + ?Sized>(
    enhanced: &ImagePlanes,
    previous: &ImagePlanes,
    rng: &mut R,
) -> Result<ImagePlanes> {
    let rect = sample_keep_rect(enhanced.width(), enhanced.height(), [0.1, 0.3], [0.5, 2.0], rng);
    keep_region(enhanced, previous, rect)
}

/// A low-light strip inside one box: pixels whose centres fall in
/// `[x0, x1) x [y0, y1)` are raised to `exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalMask {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub exponent: f64,
}

fn pixel_span(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let a = (lo - 0.5).ceil().clamp(0.0, n as f64) as usize;
    let b = (hi - 0.5).ceil().clamp(0.0, n as f64) as usize;
    (a, b.max(a))
}

/// One mask per box: a uniformly drawn centre inside the box, a coin flip for
/// orientation, full box extent along the chosen axis and half along the
/// other (clipped to the box), and an exponent drawn from `exponent_range`.
/// Boxes are clipped to the image; boxes entirely outside are skipped.
pub fn sample_local_masks<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    boxes: &[BBox],
    exponent_range: [f64; 2],
    rng: &mut R,
) -> Vec<LocalMask> {
    let mut masks = Vec::with_capacity(boxes.len());
    for b in boxes {
        // draw unconditionally so the stream does not depend on clipping
        let u: f64 = rng.random();
        let v: f64 = rng.random();
        let horizontal: bool = rng.random();
        let exponent = uniform(rng, exponent_range);
        let Some(b) = b.clip(width as f64, height as f64) else {
            continue;
        };
        let cx = b.x1() + u * b.width();
        let cy = b.y1() + v * b.height();
        let (x0, x1, y0, y1) = if horizontal {
            let half = b.height() / 4.0;
            (b.x1(), b.x2(), (cy - half).max(b.y1()), (cy + half).min(b.y2()))
        } else {
            let half = b.width() / 4.0;
            ((cx - half).max(b.x1()), (cx + half).min(b.x2()), b.y1(), b.y2())
        };
        let (px0, px1) = pixel_span(x0, x1, width);
        let (py0, py1) = pixel_span(y0, y1, height);
        masks.push(LocalMask {
            x0: px0,
            y0: py0,
            x1: px1,
            y1: py1,
            exponent,
        });
    }
    masks
}

pub fn apply_local_masks(img: &ImagePlanes, masks: &[LocalMask]) -> ImagePlanes {
    let w = img.width();
    let mut out = img.clone();
    for m in masks {
        for plane in out.planes_mut() {
            for y in m.y0..m.y1.min(img.height()) {
                for x in m.x0..m.x1.min(w) {
                    let p = &mut plane[y * w + x];
                    *p = p.powf(m.exponent).clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

/// Box-level low-light transform with exponents in `[1.5, 5.0]`.
pub fn local_transform<R: Rng + ?Sized>(
    img: &ImagePlanes,
    boxes: &[BBox],
    rng: &mut R,
) -> ImagePlanes {
    let masks = sample_local_masks(img.width(), img.height(), boxes, [1.5, 5.0], rng);
    apply_local_masks(img, &masks)
}

pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    let u: f64 = rng.random();
    range[0] + u * (range[1] - range[0])
}
