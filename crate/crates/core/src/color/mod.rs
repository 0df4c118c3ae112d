//! Images, color-space conversions, chrominance fusion and color enhancement.

mod convert;
mod enhance;
mod image;
mod io;

pub use self::convert::{
    hsl_to_rgb, hsl_to_rgb_pixel, luma, rgb_to_hsl, rgb_to_hsl_pixel, rgb_to_ycbcr,
    rgb_to_ycbcr_pixel, ycbcr_to_rgb, ycbcr_to_rgb_pixel, CHROMA_NEUTRAL,
};
pub use self::enhance::{
    color_enhance, enhance_pixel_unclipped, enhancement_factor, fuse_chroma_pixel, fuse_chrominance,
};
pub use self::image::{Plane, RgbImage};
pub use self::io::{decode_ppm, encode_ppm, load_image, save_image, save_plane};
