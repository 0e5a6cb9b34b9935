//! 8-bit RGB PNG encoding. Stored byte `u` and value `v` relate by
//! `u = round((v + 1) · 127.5)` and `v = u / 127.5 - 1`.

use std::path::Path;

use super::{ImageTensor, CHANNELS};
use crate::error::{Error, Result};

pub fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_byte(u: u8) -> f64 {
    u as f64 / 127.5 - 1.0
}

/// Round-trip an image through its 8-bit representation.
pub fn quantize(image: &ImageTensor) -> ImageTensor {
    let (h, w) = image.dims();
    let data = image.data().iter().map(|&v| from_byte(to_byte(v))).collect();
    ImageTensor::from_clamped(h, w, data).expect("same dimensions")
}

pub fn to_rgb(image: &ImageTensor) -> image::RgbImage {
    let (h, w) = image.dims();
    let bytes = image.data().iter().map(|&v| to_byte(v)).collect();
    image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer size matches")
}

pub fn from_rgb(rgb: &image::RgbImage) -> ImageTensor {
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&u| from_byte(u)).collect();
    ImageTensor::new(h as usize, w as usize, data).expect("decoded values are in range")
}

/// Encode to PNG bytes.
pub fn encode_png(image: &ImageTensor) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    to_rgb(image)
        .write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

pub fn save_png(image: &ImageTensor, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, encode_png(image)).map_err(|e| Error::io(path, e))
}

pub fn load_png(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let rgb = decoded.to_rgb8();
    debug_assert_eq!(rgb.as_raw().len() % CHANNELS, 0);
    Ok(from_rgb(&rgb))
}
