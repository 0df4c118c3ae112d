//! BT.601 full-range YCbCr and HSL conversions on `[0,1]` data.
//!
//! Chroma planes carry a `0.5` offset so that the neutral value of Cb and Cr
//! is `0.5`. Hue is stored as a fraction of a full turn in `[0,1)`.

use super::image::{Plane, RgbImage};
use crate::scalar::Scalar;

pub const KR: f64 = 0.299;
pub const KG: f64 = 0.587;
pub const KB: f64 = 0.114;

/// Neutral chroma value on the normalized scale.
pub const CHROMA_NEUTRAL: f64 = 0.5;

#[inline]
pub fn rgb_to_ycbcr_pixel([r, g, b]: [f64; 3]) -> [f64; 3] {
    let y = KR * r + KG * g + KB * b;
    let cb = CHROMA_NEUTRAL + 0.5 * (b - y) / (1.0 - KB);
    let cr = CHROMA_NEUTRAL + 0.5 * (r - y) / (1.0 - KR);
    [y, cb, cr]
}

#[inline]
pub fn ycbcr_to_rgb_pixel([y, cb, cr]: [f64; 3]) -> [f64; 3] {
    let r = y + 2.0 * (1.0 - KR) * (cr - CHROMA_NEUTRAL);
    let b = y + 2.0 * (1.0 - KB) * (cb - CHROMA_NEUTRAL);
    let g = (y - KR * r - KB * b) / KG;
    [r, g, b]
}

/// Returns `[h, s, l]` with `h` in turns; achromatic pixels get `h = s = 0`.
#[inline]
pub fn rgb_to_hsl_pixel([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let l = 0.5 * (max + min);
    let chroma = max - min;
    if chroma <= 0.0 {
        return [0.0, 0.0, l];
    }
    let denom = 1.0 - (2.0 * l - 1.0).abs();
    let s = if denom > 0.0 {
        (chroma / denom).min(1.0)
    } else {
        0.0
    };
    let h6 = if max == r {
        ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    let h = (h6 / 6.0).rem_euclid(1.0);
    [h, s, l]
}

#[inline]
pub fn hsl_to_rgb_pixel([h, s, l]: [f64; 3]) -> [f64; 3] {
    let chroma = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let x = chroma * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let (r1, g1, b1) = match h6 as u32 {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    let m = l - 0.5 * chroma;
    [r1 + m, g1 + m, b1 + m]
}

fn split<T: Scalar>(
    img: &RgbImage<T>,
    f: impl Fn([f64; 3]) -> [f64; 3],
) -> (Plane<T>, Plane<T>, Plane<T>) {
    let n = img.pixels().len();
    let (mut a, mut b, mut c) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for p in img.pixels() {
        let q = f(p.map(Scalar::as_f64));
        a.push(T::lit(q[0]));
        b.push(T::lit(q[1]));
        c.push(T::lit(q[2]));
    }
    let (w, h) = img.dims();
    (
        Plane::new(w, h, a).expect("dims"),
        Plane::new(w, h, b).expect("dims"),
        Plane::new(w, h, c).expect("dims"),
    )
}

fn merge<T: Scalar>(
    p0: &Plane<T>,
    p1: &Plane<T>,
    p2: &Plane<T>,
    f: impl Fn([f64; 3]) -> [f64; 3],
) -> crate::tensor::Result<RgbImage<T>> {
    p0.check_same(p1, "merge_planes")?;
    p0.check_same(p2, "merge_planes")?;
    let pixels = (0..p0.len())
        .map(|i| {
            f([
                p0.values()[i].as_f64(),
                p1.values()[i].as_f64(),
                p2.values()[i].as_f64(),
            ])
            .map(T::lit)
        })
        .collect();
    RgbImage::new(p0.width(), p0.height(), pixels)
}

pub fn rgb_to_ycbcr<T: Scalar>(img: &RgbImage<T>) -> (Plane<T>, Plane<T>, Plane<T>) {
    split(img, rgb_to_ycbcr_pixel)
}

/// Inverse of [`rgb_to_ycbcr`]; values are not clipped.
pub fn ycbcr_to_rgb<T: Scalar>(
    y: &Plane<T>,
    cb: &Plane<T>,
    cr: &Plane<T>,
) -> crate::tensor::Result<RgbImage<T>> {
    merge(y, cb, cr, ycbcr_to_rgb_pixel)
}

pub fn rgb_to_hsl<T: Scalar>(img: &RgbImage<T>) -> (Plane<T>, Plane<T>, Plane<T>) {
    split(img, rgb_to_hsl_pixel)
}

pub fn hsl_to_rgb<T: Scalar>(
    h: &Plane<T>,
    s: &Plane<T>,
    l: &Plane<T>,
) -> crate::tensor::Result<RgbImage<T>> {
    merge(h, s, l, hsl_to_rgb_pixel)
}

/// Luma of every pixel.
pub fn luma<T: Scalar>(img: &RgbImage<T>) -> Plane<T> {
    let (w, h) = img.dims();
    let v = img
        .pixels()
        .iter()
        .map(|p| T::lit(KR * p[0].as_f64() + KG * p[1].as_f64() + KB * p[2].as_f64()))
        .collect();
    Plane::new(w, h, v).expect("dims")
}
