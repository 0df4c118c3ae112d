//! Raw f64 kernels behind the differentiable ops.

use rayon::prelude::*;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Valid output range along one axis for a given kernel tap: the `o`
    /// with `0 <= o*stride + k - pad < len`.
    #[inline]
    fn range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // o*s + off >= 0  =>  o >= ceil(-off / s)
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // o*s + off <= len-1  =>  o <= floor((len-1-off)/s)
        let hi_num = len as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo as usize;
        let hi = (hi + 1).min(out_len as isize).max(0) as usize;
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let plane_out = g.h_out * g.w_out;
    let chunks: Vec<Vec<f64>> = (0..g.c_out)
        .into_par_iter()
        .map(|co| {
            let mut acc = vec![b.map_or(0.0, |b| b[co]); plane_out];
            for ci in 0..g.c_in {
                let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.range(ky, g.h, g.h_out);
                    for kx in 0..g.kw {
                        let wv = w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = g.range(kx, g.w, g.w_out);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row_out = &mut acc[oy * g.w_out..(oy + 1) * g.w_out];
                            let row_in = &xin[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.pad;
                                for (o, i) in row_out[ox0..ox1]
                                    .iter_mut()
                                    .zip(&row_in[ix0..ix0 + (ox1 - ox0)])
                                {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    row_out[ox] += wv * row_in[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
            acc
        })
        .collect();
    chunks.concat()
}

/// Gradient of the conv output w.r.t. its input.
pub(crate) fn conv2d_backward_input(g: &ConvGeom, w: &[f64], gout: &[f64]) -> Vec<f64> {
    let plane_out = g.h_out * g.w_out;
    let chunks: Vec<Vec<f64>> = (0..g.c_in)
        .into_par_iter()
        .map(|ci| {
            let mut gin = vec![0.0; g.h * g.w];
            for co in 0..g.c_out {
                let go = &gout[co * plane_out..(co + 1) * plane_out];
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.range(ky, g.h, g.h_out);
                    for kx in 0..g.kw {
                        let wv = w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = g.range(kx, g.w, g.w_out);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row_g = &go[oy * g.w_out..(oy + 1) * g.w_out];
                            let row_in = &mut gin[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.pad;
                                for (i, o) in row_in[ix0..ix0 + (ox1 - ox0)]
                                    .iter_mut()
                                    .zip(&row_g[ox0..ox1])
                                {
                                    *i += wv * o;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    row_in[ox * g.stride + kx - g.pad] += wv * row_g[ox];
                                }
                            }
                        }
                    }
                }
            }
            gin
        })
        .collect();
    chunks.concat()
}

/// Gradient of the conv output w.r.t. weight and bias.
pub(crate) fn conv2d_backward_params(
    g: &ConvGeom,
    x: &[f64],
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let plane_out = g.h_out * g.w_out;
    let per_out: Vec<(Vec<f64>, f64)> = (0..g.c_out)
        .into_par_iter()
        .map(|co| {
            let go = &gout[co * plane_out..(co + 1) * plane_out];
            let mut gw = vec![0.0; g.c_in * g.kh * g.kw];
            for ci in 0..g.c_in {
                let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.range(ky, g.h, g.h_out);
                    for kx in 0..g.kw {
                        let (ox0, ox1) = g.range(kx, g.w, g.w_out);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row_g = &go[oy * g.w_out..(oy + 1) * g.w_out];
                            let row_in = &xin[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.pad;
                                acc += row_g[ox0..ox1]
                                    .iter()
                                    .zip(&row_in[ix0..ix0 + (ox1 - ox0)])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                for ox in ox0..ox1 {
                                    acc += row_g[ox] * row_in[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                        gw[(ci * g.kh + ky) * g.kw + kx] = acc;
                    }
                }
            }
            (gw, go.iter().sum())
        })
        .collect();
    let mut gw = Vec::with_capacity(g.c_out * g.c_in * g.kh * g.kw);
    let mut gb = Vec::with_capacity(g.c_out);
    for (w, b) in per_out {
        gw.extend(w);
        gb.push(b);
    }
    (gw, gb)
}

/// `[n,k] x [k,m] -> [n,m]`
pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0; m];
            let ar = &a[i * k..(i + 1) * k];
            for (p, &av) in ar.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                    *o += av * bv;
                }
            }
            row
        })
        .collect();
    rows.concat()
}

pub(crate) fn transpose(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

pub(crate) fn softmax_rows(x: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &x[i * m..(i + 1) * m];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out[i * m..(i + 1) * m].iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in &mut out[i * m..(i + 1) * m] {
            *o /= sum;
        }
    }
    out
}

/// Per-row mean and reciprocal standard deviation.
pub(crate) fn row_stats(x: &[f64], n: usize, d: usize, eps: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let row = &x[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> ConvGeom {
        ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh: k,
            kw: k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        }
    }

    #[test]
    fn strided_conv_matches_direct_sum() {
        let g = geom(1, 5, 5, 1, 3, 2, 1);
        let x: Vec<f64> = (0..25).map(|v| v as f64).collect();
        let w = vec![1.0; 9];
        let out = conv2d_forward(&g, &x, &w, None);
        assert_eq!(out.len(), 9);
        // top-left output sees x[0..2]x[0..2] (padding elsewhere)
        assert_eq!(out[0], 0.0 + 1.0 + 5.0 + 6.0);
        // center output at input (2,2): full 3x3 window
        let center: f64 = [6, 7, 8, 11, 12, 13, 16, 17, 18]
            .iter()
            .map(|&v| v as f64)
            .sum();
        assert_eq!(out[4], center);
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(
            transpose(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3),
            vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]
        );
    }
}
