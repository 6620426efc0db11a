//! File formats: PNG images, the TOML run configuration and pair manifests.

pub mod config;
pub mod manifest;

use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::image::Image;

/// Loads an 8-bit RGB or RGBA PNG (alpha is dropped) as values `v/255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) => {}
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.into(),
                detail: format!("expected PNG, found {other:?}"),
            })
        }
    }
    let decoded = reader.decode().map_err(|e| Error::io(path, format!("corrupt PNG: {e}")))?;
    let rgb = match decoded {
        DynamicImage::ImageRgb8(img) => img,
        DynamicImage::ImageRgba8(_) => decoded.to_rgb8(),
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.into(),
                detail: format!("only 8-bit RGB/RGBA PNGs are accepted, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect();
    Image::new(h as usize, w as usize, data)
}

/// `round(v·255)` per channel, clamped to `0..=255`.
pub fn quantize(image: &Image) -> Vec<u8> {
    image
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Re-reads quantized values as an image, i.e. what a save/load cycle yields.
pub fn quantized(image: &Image) -> Image {
    let data = quantize(image).into_iter().map(|b| f64::from(b) / 255.0).collect();
    Image::new(image.height(), image.width(), data).expect("same shape")
}

/// Writes an 8-bit RGB PNG.
pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = RgbImage::from_raw(image.width() as u32, image.height() as u32, quantize(image))
        .ok_or_else(|| Error::io(path, "image buffer does not match its dimensions"))?;
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| Error::io(path, e))
}
