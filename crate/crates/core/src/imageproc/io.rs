//! PNG and binary PGM (P5) reading and writing.

use std::fs;
use std::path::Path;

use super::{round_half_up, GrayImage, RgbImage};
use crate::error::{Error, Result};

fn image_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Image { path: path.to_path_buf(), message: message.into() }
}

/// ITU-R BT.601 luma.
pub fn luma_bt601(r: u8, g: u8, b: u8) -> u8 {
    round_half_up(0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
}

/// Loads an 8-bit gray image from PNG (gray or color) or PGM P5 bytes.
pub fn decode_gray(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    if bytes.starts_with(b"P5") {
        return decode_pgm(bytes).map_err(|m| image_err(path, m));
    }
    let dynamic = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e.to_string()))?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let samples = match dynamic {
        image::DynamicImage::ImageLuma8(g) => g.into_raw(),
        other => other.to_rgb8().pixels().map(|p| luma_bt601(p[0], p[1], p[2])).collect(),
    };
    GrayImage::new(w, h, samples).map_err(|e| image_err(path, e.to_string()))
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| image_err(path, e.to_string()))?;
    decode_gray(&bytes, path)
}

fn decode_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    // Header: magic, width, height, maxval separated by whitespace (comments
    // allowed), then exactly one whitespace byte before the raster.
    let mut fields = Vec::new();
    let mut i = 2;
    while fields.len() < 3 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if start == i {
            return Err("malformed PGM header".into());
        }
        let text = std::str::from_utf8(&bytes[start..i]).map_err(|e| e.to_string())?;
        fields.push(text.parse::<usize>().map_err(|e| e.to_string())?);
    }
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err("malformed PGM header".into());
    }
    i += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(format!("only 8-bit PGM is supported, maxval {maxval}"));
    }
    let raster = &bytes[i..];
    if raster.len() < w * h {
        return Err(format!("PGM raster truncated: {} of {} bytes", raster.len(), w * h));
    }
    GrayImage::new(w, h, raster[..w * h].to_vec()).map_err(|e| e.to_string())
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.samples());
    out
}

pub fn save_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn save_png_gray(img: &GrayImage, path: &Path) -> Result<()> {
    image::save_buffer(path, img.samples(), img.width() as u32, img.height() as u32, image::ExtendedColorType::L8)
        .map_err(|e| image_err(path, e.to_string()))
}

pub fn save_png_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    image::save_buffer(path, &img.samples, img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| image_err(path, e.to_string()))
}

/// Writes PGM for a `.pgm` extension and PNG otherwise.
pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("pgm") => save_pgm(img, path),
        _ => save_png_gray(img, path),
    }
}
