//! 8-bit PNG and binary PPM/PGM images to and from `[0, 1]` planes.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat};

use super::output::write_atomic;
use crate::error::{Error, Result};
use crate::glt::ImagePlanes;

fn format_for(path: &Path) -> Result<ImageFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("ppm" | "pgm" | "pnm") => Ok(ImageFormat::Pnm),
        _ => Err(Error::Image {
            path: path.to_path_buf(),
            message: "unsupported extension (expected .png, .ppm or .pgm)".into(),
        }),
    }
}

/// Grayscale images give one plane, colour images three; alpha is dropped.
pub fn read_image(path: &Path) -> Result<ImagePlanes> {
    let format = format_for(path)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planes = if img.color().has_color() {
        let rgb = img.to_rgb8();
        (0..3)
            .map(|c| rgb.pixels().map(|p| f64::from(p.0[c]) / 255.0).collect())
            .collect()
    } else {
        let gray = img.to_luma8();
        vec![gray.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect()]
    };
    ImagePlanes::new(w, h, planes)
}

fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn encode_image(img: &ImagePlanes, format: ImageFormat) -> Result<Vec<u8>> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let n = img.width() * img.height();
    let dynamic = if img.channel_count() == 3 {
        let mut buf = Vec::with_capacity(n * 3);
        for i in 0..n {
            for c in 0..3 {
                buf.push(quantize(img.plane(c)[i]));
            }
        }
        DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, buf).expect("buffer size matches"))
    } else {
        let buf = img.plane(0).iter().map(|&v| quantize(v)).collect();
        DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, buf).expect("buffer size matches"))
    };
    let mut out = Cursor::new(Vec::new());
    dynamic.write_to(&mut out, format).map_err(|e| Error::Image {
        path: PathBuf::from("<memory>"),
        message: e.to_string(),
    })?;
    Ok(out.into_inner())
}

pub fn write_image(path: &Path, img: &ImagePlanes) -> Result<()> {
    let bytes = encode_image(img, format_for(path)?)?;
    write_atomic(path, &bytes)
}

/// Supported image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && format_for(&p).is_ok() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}
