//! Chrominance fusion and HSL-driven color enhancement.

use super::convert::rgb_to_hsl_pixel;
use super::image::{Plane, RgbImage};
use crate::scalar::Scalar;
use crate::tensor::Result;

/// Fuses one chroma channel of two exposures, weighting each source by its
/// distance from the neutral value `tau`.
///
/// Pixels where both sources sit exactly at `tau` fuse to `tau`.
pub fn fuse_chrominance<T: Scalar>(c1: &Plane<T>, c2: &Plane<T>, tau: f64) -> Result<Plane<T>> {
    c1.check_same(c2, "fuse_chrominance")?;
    let values = c1
        .values()
        .iter()
        .zip(c2.values())
        .map(|(&a, &b)| T::lit(fuse_chroma_pixel(a.as_f64(), b.as_f64(), tau)))
        .collect();
    Plane::new(c1.width(), c1.height(), values)
}

#[inline]
pub fn fuse_chroma_pixel(a: f64, b: f64, tau: f64) -> f64 {
    let wa = (a - tau).abs();
    let wb = (b - tau).abs();
    let denom = wa + wb;
    if denom == 0.0 {
        tau
    } else {
        (a * wa + b * wb) / denom
    }
}

/// Saturation gain for a pixel with HSL saturation `s`.
#[inline]
pub fn enhancement_factor(s: f64, delta: f64) -> f64 {
    if s + delta > 1.0 {
        (1.0 - s) / s
    } else {
        delta / (1.0 - delta)
    }
}

/// Pushes every channel away from the HSL lightness, without clipping.
#[inline]
pub fn enhance_pixel_unclipped(rgb: [f64; 3], delta: f64) -> [f64; 3] {
    let [_, s, l] = rgb_to_hsl_pixel(rgb);
    let alpha = enhancement_factor(s, delta);
    rgb.map(|c| c + (c - l) * alpha)
}

/// Color enhancement with a final per-channel clip to `[0,1]`.
pub fn color_enhance<T: Scalar>(img: &RgbImage<T>, delta: f64) -> RgbImage<T> {
    img.map_pixels(|p| {
        let rgb = p.map(Scalar::as_f64);
        let [r, g, b] = rgb;
        if r == g && g == b {
            // channel - L is exactly zero; keep the input bits
            return p;
        }
        enhance_pixel_unclipped(rgb, delta).map(|v| T::lit(v.clamp(0.0, 1.0)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neutral_channel_ignored() {
        assert_eq!(fuse_chroma_pixel(0.5, 0.8, 0.5), 0.8);
        assert_eq!(fuse_chroma_pixel(0.3, 0.3, 0.5), 0.3);
        assert_eq!(fuse_chroma_pixel(0.5, 0.5, 0.5), 0.5);
    }

    #[test]
    fn eight_bit_hand_case() {
        let v = fuse_chroma_pixel(100.0 / 255.0, 180.0 / 255.0, 128.0 / 255.0);
        assert!((v - 152.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn size_mismatch_rejected() {
        let a = Plane::<f32>::filled(2, 2, 0.1);
        let b = Plane::<f32>::filled(3, 2, 0.1);
        assert!(fuse_chrominance(&a, &b, 0.5).is_err());
    }

    #[test]
    fn factor_branches() {
        assert!((enhancement_factor(0.5, 0.2) - 0.25).abs() < 1e-12);
        assert!((enhancement_factor(0.9, 0.2) - 0.1 / 0.9).abs() < 1e-12);
        assert_eq!(enhancement_factor(0.0, 0.2), 0.25);
    }

    #[test]
    fn achromatic_unchanged() {
        let img = RgbImage::<f32>::from_fn(4, 1, |x, _| [x as f32 / 3.0; 3]);
        assert_eq!(color_enhance(&img, 0.2), img);
    }
}
