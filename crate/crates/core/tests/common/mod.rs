//! Reference implementations used as test oracles. Nothing here calls the
//! library routine it checks.
#![allow(dead_code)]

pub mod suite;

use mef_core::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type GraphResult<'g> = mef_core::tensor::Result<Var<'g, f64>>;

pub fn uniform(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &uniform(n, lo, hi, seed)).unwrap()
}

/// Relative error with a small absolute floor for near-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Runs `f` on `inputs` and contracts its output with fixed weights so
/// every output element contributes to one scalar.
fn scalarize<'g>(g: &'g Graph<f64>, out: Var<'g, f64>) -> Var<'g, f64> {
    let n = out.numel();
    if n == 1 {
        return out.sum();
    }
    let w: Vec<f64> = (0..n).map(|i| 0.5 + ((i as f64) * 0.731).sin()).collect();
    let wv = g.constant(Tensor::from_f64(&out.shape(), &w).unwrap());
    out.mul(wv).unwrap().sum()
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> GraphResult<'g>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&g, &vars).unwrap();
    scalarize(&g, out).item()
}

/// Largest relative error between backprop and central differences over
/// every element of every input.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> GraphResult<'g>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars).unwrap();
    let loss = scalarize(&g, out);
    let grads = g.backward(loss).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_f64(*v).unwrap_or_else(|| vec![0.0; v.numel()]);
        for j in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            let numeric = (eval(&plus, &f) - eval(&minus, &f)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Cross-correlation of `[ci,h,w]` with `[co,ci,kh,kw]` by nested loops.
pub fn conv_naive(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.map_or(0.0, |b| b[o]);
                for c in 0..ci {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += xd[(c * h + iy as usize) * wd + ix as usize]
                                * wdat[((o * ci + c) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::from_f64(&[co, oh, ow], &out).unwrap()
}

/// One gamma step `2y - y^a` clipped to `[0,1]`.
pub fn gamma_step(y: f64, a: f64) -> f64 {
    (2.0 * y - y.powf(a)).clamp(0.0, 1.0)
}

/// Row-major `w x h` grid of region means.
fn region_means(v: &[f64], w: usize, h: usize, r: usize) -> (Vec<f64>, usize, usize) {
    let (gw, gh) = (w / r, h / r);
    let mut out = vec![0.0; gw * gh];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut s = 0.0;
            for y in 0..r {
                for x in 0..r {
                    s += v[(gy * r + y) * w + gx * r + x];
                }
            }
            out[gy * gw + gx] = s / (r * r) as f64;
        }
    }
    (out, gw, gh)
}

/// Spatial consistency by walking every region and each in-bounds
/// neighbor (left, right, up, down), averaged over the region count.
pub fn spa_oracle(y: &[f64], i: &[f64], w: usize, h: usize) -> f64 {
    let (my, gw, gh) = region_means(y, w, h, 4);
    let (mi, _, _) = region_means(i, w, h, 4);
    let mut total = 0.0;
    for gy in 0..gh as isize {
        for gx in 0..gw as isize {
            for (dx, dy) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (nx, ny) = (gx + dx, gy + dy);
                if nx < 0 || ny < 0 || nx >= gw as isize || ny >= gh as isize {
                    continue;
                }
                let a = (gy as usize) * gw + gx as usize;
                let b = (ny as usize) * gw + nx as usize;
                let d = (my[a] - my[b]).abs() - (mi[a] - mi[b]).abs();
                total += d * d;
            }
        }
    }
    total / (gw * gh) as f64
}

/// Mean `|Gx| + |Gy|` Sobel response with mirrored borders.
pub fn sobel_oracle(v: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let j = if i < 0 {
            -i
        } else if i >= n {
            2 * n - 2 - i
        } else {
            i
        };
        j as usize
    };
    let at = |x: isize, y: isize| v[mirror(y, h) * w + mirror(x, w)];
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x - 1, y)
                - at(x - 1, y + 1);
            let gy = at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x, y - 1)
                - at(x + 1, y - 1);
            out[y as usize * w + x as usize] = gx.abs() + gy.abs();
        }
    }
    out
}

/// HSL of an RGB triple from the textbook hexcone definition, hue in
/// degrees.
pub fn hsl(rgb: [f64; 3]) -> [f64; 3] {
    let mx = rgb.iter().cloned().fold(f64::MIN, f64::max);
    let mn = rgb.iter().cloned().fold(f64::MAX, f64::min);
    let l = (mx + mn) / 2.0;
    let d = mx - mn;
    if d == 0.0 {
        return [0.0, 0.0, l];
    }
    let s = if l <= 0.5 {
        d / (mx + mn)
    } else {
        d / (2.0 - mx - mn)
    };
    let [r, g, b] = rgb;
    let h = if mx == r {
        60.0 * ((g - b) / d)
    } else if mx == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    [h.rem_euclid(360.0), s, l]
}

/// Per-pixel chroma fusion: each source weighted by its distance to `tau`.
pub fn chroma_oracle(a: f64, b: f64, tau: f64) -> f64 {
    let (da, db) = ((a - tau).abs(), (b - tau).abs());
    if da + db == 0.0 {
        tau
    } else {
        (a * da + b * db) / (da + db)
    }
}

/// Entropy in bits of a histogram of counts.
pub fn entropy_bits(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.log2()
        })
        .sum()
}

/// 11-tap Gaussian SSIM (sigma 1.5, C1 1e-4, C2 9e-4) with mirrored
/// borders, direct 2-D window sums.
pub fn ssim_oracle(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let r = 5isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * 1.5 * 1.5)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let j = if i < 0 {
            -i
        } else if i >= n {
            2 * n - 2 - i
        } else {
            i
        };
        j as usize
    };
    let mut total = 0.0;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let k = taps[(dy + r) as usize] * taps[(dx + r) as usize] / (norm * norm);
                    let idx = mirror(y + dy, h) * w + mirror(x + dx, w);
                    let (va, vb) = (a[idx], b[idx]);
                    ma += k * va;
                    mb += k * vb;
                    aa += k * va * va;
                    bb += k * vb * vb;
                    ab += k * va * vb;
                }
            }
            let (c1, c2) = (1e-4, 9e-4);
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    total / (w * h) as f64
}
