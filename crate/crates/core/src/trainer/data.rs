//! Exposure pairs: directory loading, a synthetic generator and paired
//! augmentation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::color::{load_image, luma, Plane, RgbImage};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One scene at two exposures; `over` is source 1 and `under` source 2.
#[derive(Clone, Debug, PartialEq)]
pub struct ExposurePair<T> {
    pub name: String,
    pub over: RgbImage<T>,
    pub under: RgbImage<T>,
}

impl<T: Scalar> ExposurePair<T> {
    pub fn lumas(&self) -> (Plane<T>, Plane<T>) {
        (luma(&self.over), luma(&self.under))
    }
}

/// Image file pair matched by stem, `<stem>_under.*` and `<stem>_over.*`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairPaths {
    pub stem: String,
    pub under: PathBuf,
    pub over: PathBuf,
}

const IMAGE_EXTS: [&str; 2] = ["png", "ppm"];

fn image_stem(path: &Path) -> Option<String> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    IMAGE_EXTS
        .contains(&ext.as_str())
        .then(|| path.file_stem()?.to_str().map(str::to_string))?
}

/// Pairs matched in `dir` plus the file names that found no partner.
pub fn scan_pairs(dir: impl AsRef<Path>) -> Result<(Vec<PairPaths>, Vec<String>)> {
    let dir = dir.as_ref();
    let mut under = BTreeMap::new();
    let mut over = BTreeMap::new();
    let mut unmatched = Vec::new();
    let read = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = read
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    paths.sort();
    for path in paths {
        let Some(stem) = image_stem(&path) else {
            continue;
        };
        if let Some(s) = stem.strip_suffix("_under") {
            under.insert(s.to_string(), path);
        } else if let Some(s) = stem.strip_suffix("_over") {
            over.insert(s.to_string(), path);
        }
    }
    let mut pairs = Vec::new();
    for (stem, u) in under {
        match over.remove(&stem) {
            Some(o) => pairs.push(PairPaths {
                stem,
                under: u,
                over: o,
            }),
            None => unmatched.push(u.display().to_string()),
        }
    }
    unmatched.extend(over.into_values().map(|p| p.display().to_string()));
    unmatched.sort();
    Ok((pairs, unmatched))
}

/// Loads every matched pair of a directory; an empty result is an error.
pub fn load_pairs<T: Scalar>(dir: impl AsRef<Path>) -> Result<Vec<ExposurePair<T>>> {
    let dir = dir.as_ref();
    let (paths, unmatched) = scan_pairs(dir)?;
    for u in &unmatched {
        log::warn!("no exposure partner for {u}; skipped");
    }
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "{}: no <stem>_under / <stem>_over image pairs found",
            dir.display()
        )));
    }
    paths
        .into_iter()
        .map(|p| {
            let over = load_image(&p.over)?;
            let under = load_image(&p.under)?;
            if over.dims() != under.dims() {
                return Err(Error::Data(format!("{}: exposures differ in size", p.stem)));
            }
            Ok(ExposurePair {
                name: p.stem,
                over,
                under,
            })
        })
        .collect()
}

pub const UNDER_SCALE: f64 = 0.25;
pub const OVER_SCALE: f64 = 4.0;
pub const DISPLAY_GAMMA: f64 = 2.2;

/// Smooth random radiance in roughly `[0.02, 1]` per channel.
pub fn synthetic_radiance<T: Scalar>(width: usize, height: usize, seed: u64) -> RgbImage<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    struct Wave {
        fx: f64,
        fy: f64,
        phase: f64,
        amp: f64,
    }
    let waves: Vec<Wave> = (0..6)
        .map(|i| {
            let scale = 1.0 + i as f64;
            Wave {
                fx: rng.gen_range(-0.6..0.6) / scale,
                fy: rng.gen_range(-0.6..0.6) / scale,
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                amp: 1.0 / scale,
            }
        })
        .collect();
    let tint: [f64; 3] = [
        rng.gen_range(0.7..1.0),
        rng.gen_range(0.7..1.0),
        rng.gen_range(0.7..1.0),
    ];
    let norm: f64 = waves.iter().map(|w| w.amp).sum();
    RgbImage::from_fn(width, height, |x, y| {
        let s: f64 = waves
            .iter()
            .map(|w| w.amp * (w.fx * x as f64 + w.fy * y as f64 + w.phase).sin())
            .sum::<f64>()
            / norm;
        // spread the dynamic range over about six stops
        let r = 2f64.powf(6.0 * (s * 0.5 + 0.5) - 6.0).max(0.02);
        tint.map(|t| T::lit((r * t).min(1.0)))
    })
}

/// Exposes a radiance image at `scale` and applies display gamma.
pub fn expose<T: Scalar>(radiance: &RgbImage<T>, scale: f64) -> RgbImage<T> {
    radiance.map_pixels(|p| {
        p.map(|c| {
            T::lit(
                (c.as_f64() * scale)
                    .clamp(0.0, 1.0)
                    .powf(1.0 / DISPLAY_GAMMA),
            )
        })
    })
}

pub fn synthetic_pair<T: Scalar>(width: usize, height: usize, seed: u64) -> ExposurePair<T> {
    let r = synthetic_radiance(width, height, seed);
    ExposurePair {
        name: format!("synthetic_{seed}"),
        over: expose(&r, OVER_SCALE),
        under: expose(&r, UNDER_SCALE),
    }
}

/// Geometric augmentation applied identically to both exposures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
    pub flip: bool,
    /// Counter-clockwise quarter turns.
    pub quarter_turns: u8,
}

impl Augment {
    pub fn sample(
        width: usize,
        height: usize,
        size: usize,
        augment: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if size > width || size > height {
            return Err(Error::Data(format!(
                "training patch {size} is larger than the {width}x{height} image"
            )));
        }
        let x0 = rng.gen_range(0..=width - size);
        let y0 = rng.gen_range(0..=height - size);
        let (flip, quarter_turns) = if augment {
            (rng.gen(), rng.gen_range(0..4))
        } else {
            (false, 0)
        };
        Ok(Self {
            x0,
            y0,
            size,
            flip,
            quarter_turns,
        })
    }

    pub fn apply<T: Scalar>(&self, p: &Plane<T>) -> Plane<T> {
        let mut out = p.crop(self.x0, self.y0, self.size, self.size);
        if self.flip {
            out = out.flip_horizontal();
        }
        for _ in 0..self.quarter_turns {
            out = out.rotate90();
        }
        out
    }
}
