//! Multi-head attention with a learnable additive bias, and the
//! patch-token transformer block built on it.

use std::rc::Rc;

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::{BoundParams, ModelParams, Result, TensorError, Var};

use super::NetDims;

/// Output of one attention call.
pub struct AttentionOut<'g, T: Scalar> {
    pub output: Var<'g, T>,
    /// Row-stochastic weights, one `[n,n]` matrix per head.
    pub weights: Vec<Var<'g, T>>,
}

pub(crate) fn init_attention<T: Scalar>(
    params: &mut ModelParams<T>,
    prefix: &str,
    dims: &NetDims,
    rng: &mut impl Rng,
) -> Result<()> {
    let d = dims.token_dim;
    for w in ["wq", "wk", "wv"] {
        params.add_uniform(format!("{prefix}.{w}"), &[d, d], d, rng)?;
    }
    let g2 = dims.bias_grid * dims.bias_grid;
    params.add_zeros(format!("{prefix}.bias"), &[dims.heads, g2, g2])?;
    Ok(())
}

/// Maps each token of a `gh x gw` grid onto the stored `g x g` bias grid.
fn bias_index(head: usize, g: usize, gh: usize, gw: usize) -> Rc<[usize]> {
    let g2 = g * g;
    let cell: Vec<usize> = (0..gh * gw)
        .map(|i| {
            let (r, c) = (i / gw, i % gw);
            (r * g / gh) * g + c * g / gw
        })
        .collect();
    let n = cell.len();
    let mut idx = Vec::with_capacity(n * n);
    for &ci in &cell {
        for &cj in &cell {
            idx.push(head * g2 * g2 + ci * g2 + cj);
        }
    }
    idx.into()
}

/// `softmax(Q K^T / sqrt(d_k) + B) V` per head, with `Q` projected from
/// `q_src` and `K`, `V` from `kv_src`. Both are `[n,d]` token matrices laid
/// out on a `grid = (rows, cols)` patch grid.
pub fn attention<'g, T: Scalar>(
    p: &BoundParams<'g, T>,
    prefix: &str,
    q_src: Var<'g, T>,
    kv_src: Var<'g, T>,
    heads: usize,
    grid: (usize, usize),
) -> Result<AttentionOut<'g, T>> {
    let (qs, ks) = (q_src.shape(), kv_src.shape());
    if qs != ks || qs.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            left: qs,
            right: ks,
        });
    }
    let (n, d) = (qs[0], qs[1]);
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::InvalidArgument {
            op: "attention",
            msg: format!("token dim {d} not divisible by {heads} heads"),
        });
    }
    if grid.0 * grid.1 != n {
        return Err(TensorError::InvalidArgument {
            op: "attention",
            msg: format!("{n} tokens do not form a {}x{} grid", grid.0, grid.1),
        });
    }
    let dk = d / heads;
    let q = q_src.matmul(p.get(&format!("{prefix}.wq"))?)?;
    let k = kv_src.matmul(p.get(&format!("{prefix}.wk"))?)?;
    let v = kv_src.matmul(p.get(&format!("{prefix}.wv"))?)?;
    let bias = p.get(&format!("{prefix}.bias"))?;
    let bshape = bias.shape();
    let g = bshape
        .get(1)
        .map_or(0, |&n| (n as f64).sqrt().round() as usize);
    if bshape.len() != 3
        || bshape[0] != heads
        || g == 0
        || g * g != bshape[1]
        || bshape[2] != bshape[1]
    {
        return Err(TensorError::InvalidArgument {
            op: "attention",
            msg: format!("bias shape {bshape:?} does not match {heads} heads on a square grid"),
        });
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dk, dk)?;
        let kh = k.slice_cols(h * dk, dk)?;
        let vh = v.slice_cols(h * dk, dk)?;
        let bh = bias.gather(bias_index(h, g, grid.0, grid.1), &[n, n])?;
        let scores = qh.matmul(kh.transpose()?)?.scale(scale).add(bh)?;
        let a = scores.softmax_rows()?;
        outs.push(a.matmul(vh)?);
        weights.push(a);
    }
    let output = if heads == 1 {
        outs[0]
    } else {
        Var::concat_cols(&outs)?
    };
    Ok(AttentionOut { output, weights })
}

pub(crate) fn init_transformer<T: Scalar>(
    params: &mut ModelParams<T>,
    prefix: &str,
    dims: &NetDims,
    rng: &mut impl Rng,
) -> Result<()> {
    let d = dims.token_dim;
    let pd = dims.patch_dim();
    params.add_uniform(format!("{prefix}.in.weight"), &[pd, d], pd, rng)?;
    params.add_zeros(format!("{prefix}.in.bias"), &[d])?;
    params.add_full(format!("{prefix}.ln1.gamma"), &[d], 1.0)?;
    params.add_zeros(format!("{prefix}.ln1.beta"), &[d])?;
    init_attention(params, &format!("{prefix}.attn"), dims, rng)?;
    params.add_full(format!("{prefix}.ln2.gamma"), &[d], 1.0)?;
    params.add_zeros(format!("{prefix}.ln2.beta"), &[d])?;
    params.add_uniform(format!("{prefix}.mlp1.weight"), &[d, 2 * d], d, rng)?;
    params.add_zeros(format!("{prefix}.mlp1.bias"), &[2 * d])?;
    params.add_uniform(format!("{prefix}.mlp2.weight"), &[2 * d, d], 2 * d, rng)?;
    params.add_zeros(format!("{prefix}.mlp2.bias"), &[d])?;
    params.add_uniform(format!("{prefix}.out.weight"), &[d, pd], d, rng)?;
    params.add_zeros(format!("{prefix}.out.bias"), &[pd])?;
    Ok(())
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Linear map of token rows.
pub(crate) fn linear<'g, T: Scalar>(
    p: &BoundParams<'g, T>,
    prefix: &str,
    x: Var<'g, T>,
) -> Result<Var<'g, T>> {
    x.matmul(p.get(&format!("{prefix}.weight"))?)?
        .add_row_bias(p.get(&format!("{prefix}.bias"))?)
}

/// Self-attention sublayer on already normalized tokens.
pub fn self_attention<'g, T: Scalar>(
    p: &BoundParams<'g, T>,
    prefix: &str,
    tokens: Var<'g, T>,
    heads: usize,
    grid: (usize, usize),
) -> Result<AttentionOut<'g, T>> {
    attention(p, prefix, tokens, tokens, heads, grid)
}

/// Transformer block over non-overlapping `p x p` patches of a `[C,H,W]`
/// map. Patches are projected to `d`-dim tokens, passed through pre-norm
/// self-attention and a GELU MLP (each with a residual), projected back and
/// added onto the input map.
pub fn transformer_block<'g, T: Scalar>(
    p: &BoundParams<'g, T>,
    prefix: &str,
    f: Var<'g, T>,
    dims: &NetDims,
) -> Result<Var<'g, T>> {
    let sh = f.shape();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let grid = (h / dims.patch, w / dims.patch);
    let t = linear(p, &format!("{prefix}.in"), f.patchify(dims.patch)?)?;
    let n1 = t.layer_norm(
        p.get(&format!("{prefix}.ln1.gamma"))?,
        p.get(&format!("{prefix}.ln1.beta"))?,
        LN_EPS,
    )?;
    let att = self_attention(p, &format!("{prefix}.attn"), n1, dims.heads, grid)?;
    let t = t.add(att.output)?;
    let n2 = t.layer_norm(
        p.get(&format!("{prefix}.ln2.gamma"))?,
        p.get(&format!("{prefix}.ln2.beta"))?,
        LN_EPS,
    )?;
    let m = linear(p, &format!("{prefix}.mlp1"), n2)?.gelu();
    let m = linear(p, &format!("{prefix}.mlp2"), m)?;
    let t = t.add(m)?;
    let back = linear(p, &format!("{prefix}.out"), t)?.unpatchify(c, h, w, dims.patch)?;
    f.add(back)
}
