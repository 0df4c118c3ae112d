//! Index-remapping ops on `[C,H,W]` maps, all expressed as gathers.

use std::rc::Rc;

use super::{Result, TensorError, Var};
use crate::scalar::Scalar;

fn chw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected [C,H,W], got {shape:?}"),
        }),
    }
}

/// Mirror index without repeating the edge sample (`-1 -> 1`, `n -> n-2`).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Reflect padding of a `[C,H,W]` map by `ph` rows and `pw` columns on each side.
    pub fn reflect_pad(&self, ph: usize, pw: usize) -> Result<Var<'g, T>> {
        let (c, h, w) = chw("reflect_pad", &self.shape())?;
        if (ph > 0 && ph >= h) || (pw > 0 && pw >= w) {
            return Err(TensorError::InvalidArgument {
                op: "reflect_pad",
                msg: format!("padding ({ph},{pw}) too large for {h}x{w}"),
            });
        }
        let (hp, wp) = (h + 2 * ph, w + 2 * pw);
        let mut index = Vec::with_capacity(c * hp * wp);
        for ci in 0..c {
            for y in 0..hp {
                let sy = reflect(y as isize - ph as isize, h);
                for x in 0..wp {
                    let sx = reflect(x as isize - pw as isize, w);
                    index.push((ci * h + sy) * w + sx);
                }
            }
        }
        self.gather(index.into(), &[c, hp, wp])
    }

    /// Channels `start..start+len` of a `[C,H,W]` map.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let (c, h, w) = chw("slice_channels", &self.shape())?;
        if start + len > c || len == 0 {
            return Err(TensorError::InvalidArgument {
                op: "slice_channels",
                msg: format!("channels {start}..{} out of 0..{c}", start + len),
            });
        }
        let index: Rc<[usize]> = (start * h * w..(start + len) * h * w).collect();
        self.gather(index, &[len, h, w])
    }

    /// Columns `start..start+len` of a `[n,m]` matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let sh = self.shape();
        if sh.len() != 2 || start + len > sh[1] {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                msg: format!("columns {start}..{} of {sh:?}", start + len),
            });
        }
        let (n, m) = (sh[0], sh[1]);
        let index: Rc<[usize]> = (0..n)
            .flat_map(|i| (start..start + len).map(move |j| i * m + j))
            .collect();
        self.gather(index, &[n, len])
    }

    /// Concatenation of `[n, m_i]` matrices along columns.
    pub fn concat_cols(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let ts = parts
            .iter()
            .map(|p| p.transpose())
            .collect::<Result<Vec<_>>>()?;
        Var::concat(&ts)?.transpose()
    }

    /// Forward difference along width, zero in the last column.
    pub fn diff_x(&self) -> Result<Var<'g, T>> {
        let (c, h, w) = chw("diff_x", &self.shape())?;
        let index: Rc<[usize]> = (0..c * h * w)
            .map(|i| if i % w == w - 1 { i } else { i + 1 })
            .collect();
        self.gather(index, &[c, h, w])?.sub(*self)
    }

    /// Forward difference along height, zero in the last row.
    pub fn diff_y(&self) -> Result<Var<'g, T>> {
        let (c, h, w) = chw("diff_y", &self.shape())?;
        let index: Rc<[usize]> = (0..c * h * w)
            .map(|i| if (i / w) % h == h - 1 { i } else { i + w })
            .collect();
        self.gather(index, &[c, h, w])?.sub(*self)
    }

    /// Non-overlapping `p x p` patches of a `[C,H,W]` map as rows of a
    /// `[n_tokens, C*p*p]` matrix. Tokens run row-major over the patch grid;
    /// each token is laid out `(channel, dy, dx)`.
    pub fn patchify(&self, p: usize) -> Result<Var<'g, T>> {
        let (c, h, w) = chw("patchify", &self.shape())?;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(TensorError::InvalidArgument {
                op: "patchify",
                msg: format!("{h}x{w} is not divisible by patch size {p}"),
            });
        }
        let index = patch_index(c, h, w, p);
        self.gather(index.into(), &[(h / p) * (w / p), c * p * p])
    }

    /// Inverse of [`Var::patchify`].
    pub fn unpatchify(&self, c: usize, h: usize, w: usize, p: usize) -> Result<Var<'g, T>> {
        let sh = self.shape();
        if p == 0
            || !h.is_multiple_of(p)
            || !w.is_multiple_of(p)
            || sh != [(h / p) * (w / p), c * p * p]
        {
            return Err(TensorError::InvalidArgument {
                op: "unpatchify",
                msg: format!("{sh:?} does not fold into [{c},{h},{w}] with patch {p}"),
            });
        }
        let fwd = patch_index(c, h, w, p);
        let mut inv = vec![0usize; fwd.len()];
        for (token_pos, &pix) in fwd.iter().enumerate() {
            inv[pix] = token_pos;
        }
        self.gather(inv.into(), &[c, h, w])
    }
}

fn patch_index(c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut index = Vec::with_capacity(c * h * w);
    for ty in 0..gh {
        for tx in 0..gw {
            for ci in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        index.push((ci * h + ty * p + dy) * w + tx * p + dx);
                    }
                }
            }
        }
    }
    index
}
