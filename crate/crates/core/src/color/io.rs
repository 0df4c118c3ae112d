//! 8-bit PNG and binary PPM (P6) reading and writing.

use std::fs;
use std::path::Path;

use super::image::{Plane, RgbImage};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn is_ppm(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("ppm")
    )
}

#[inline]
fn quantize<T: Scalar>(v: T) -> u8 {
    // f64::round rounds half away from zero
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads an 8-bit RGB/RGBA/gray PNG or a binary PPM as `[0,1]` floats.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<RgbImage<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") || (is_ppm(path) && !bytes.starts_with(b"\x89PNG")) {
        return decode_ppm(&bytes).map_err(|msg| Error::image(path, msg));
    }
    decode_png(&bytes).map_err(|msg| Error::image(path, msg))
}

fn decode_png<T: Scalar>(bytes: &[u8]) -> std::result::Result<RgbImage<T>, String> {
    use image::{DynamicImage, ImageFormat};
    let img =
        image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| e.to_string())?;
    let rgb = match img {
        DynamicImage::ImageRgb8(i) => i,
        DynamicImage::ImageRgba8(_)
        | DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_) => img.to_rgb8(),
        other => {
            return Err(format!(
                "unsupported bit depth / color type {:?}; only 8-bit PNG is accepted",
                other.color()
            ))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let pixels = rgb
        .pixels()
        .map(|p| p.0.map(|c| T::lit(c as f64 / 255.0)))
        .collect();
    RgbImage::new(w, h, pixels).map_err(|e| e.to_string())
}

/// Parses a binary P6 file with maxval 255.
pub fn decode_ppm<T: Scalar>(bytes: &[u8]) -> std::result::Result<RgbImage<T>, String> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(format!("truncated PPM header at byte offset {pos}")),
            }
        }
        let start = pos;
        while bytes
            .get(pos)
            .is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#')
        {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(format!("truncated PPM header at byte offset {pos}"));
        }
        fields.push((
            start,
            String::from_utf8_lossy(&bytes[start..pos]).into_owned(),
        ));
    }
    if fields[0].1 != "P6" {
        return Err(format!("bad PPM magic {:?} at byte offset 0", fields[0].1));
    }
    let mut nums = [0usize; 3];
    for (i, (off, s)) in fields[1..].iter().enumerate() {
        nums[i] = s
            .parse()
            .map_err(|_| format!("invalid PPM header field {s:?} at byte offset {off}"))?;
    }
    let [w, h, maxval] = nums;
    if maxval != 255 {
        return Err(format!(
            "unsupported bit depth: maxval {maxval} at byte offset {} (only 255 is accepted)",
            fields[3].0
        ));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(format!(
            "truncated PPM raster at byte offset {}: expected {need} bytes, found {}",
            bytes.len(),
            bytes.len().saturating_sub(pos)
        ));
    }
    let pixels = bytes[pos..pos + need]
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]].map(|v| T::lit(v as f64 / 255.0)))
        .collect();
    RgbImage::new(w, h, pixels).map_err(|e| e.to_string())
}

pub fn encode_ppm<T: Scalar>(img: &RgbImage<T>) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    for p in img.pixels() {
        out.extend(p.map(quantize));
    }
    out
}

/// Writes PNG, or PPM when the extension is `.ppm`. Values are clipped to
/// `[0,1]` and rounded half away from zero.
pub fn save_image<T: Scalar>(img: &RgbImage<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_ppm(path) {
        return fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e));
    }
    let raw: Vec<u8> = img.pixels().iter().flat_map(|p| p.map(quantize)).collect();
    image::save_buffer_with_format(
        path,
        &raw,
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::image(path, e.to_string()))
}

/// Writes a single plane as an 8-bit grayscale PNG.
pub fn save_plane<T: Scalar>(plane: &Plane<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = plane.values().iter().map(|&v| quantize(v)).collect();
    image::save_buffer_with_format(
        path,
        &raw,
        plane.width() as u32,
        plane.height() as u32,
        image::ExtendedColorType::L8,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::image(path, e.to_string()))
}
