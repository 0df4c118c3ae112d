//! Shadow encoder, texture enhancement (cross-attention detail completion
//! plus sigmoid attention maps), fusion layer and decoder.

mod attention;

pub use attention::{attention, self_attention, transformer_block, AttentionOut};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{BoundParams, ModelParams, Result, Tensor, TensorError, Var};

use attention::{init_transformer, linear};

/// Architecture sizes shared by every fusion-network component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetDims {
    /// Feature channels `C`.
    pub channels: usize,
    /// Patch side `p` used for tokenization.
    pub patch: usize,
    /// Token width `d` after the patch projection.
    pub token_dim: usize,
    pub heads: usize,
    /// Side of the token grid the attention bias is stored for.
    pub bias_grid: usize,
}

impl NetDims {
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            Err(TensorError::InvalidArgument {
                op: "net_dims",
                msg,
            })
        };
        if self.channels < 2 || !self.channels.is_multiple_of(2) {
            return bad(format!(
                "channels must be even and >= 2, got {}",
                self.channels
            ));
        }
        if self.patch == 0 || self.bias_grid == 0 {
            return bad("patch size and bias grid must be positive".into());
        }
        if self.heads == 0 || !self.token_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "token dim {} not divisible by {} heads",
                self.token_dim, self.heads
            ));
        }
        Ok(())
    }
}

/// Which feature a [`FeatureMap`] carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureTag {
    F1,
    F2,
    F1Hat,
    F2Hat,
    Cal1,
    Cal2,
    Fused,
}

/// A `[C,H,W]` feature tensor tagged with its role.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap<'g, T: Scalar> {
    pub var: Var<'g, T>,
    pub tag: FeatureTag,
}

impl<'g, T: Scalar> FeatureMap<'g, T> {
    pub fn new(var: Var<'g, T>, tag: FeatureTag) -> Self {
        Self { var, tag }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.var.shape();
        (s[0], s[1], s[2])
    }
}

/// Texture-enhancement wiring variants used for structural ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TemVariant {
    #[default]
    Full,
    /// I: cross-attention skipped, source features pass through.
    NoCrossAttention,
    /// II: attention output replaces the source features.
    NoResidual,
    /// III: queries from the enhanced features, keys/values from the source.
    SwapRoles,
    /// IV: enhanced features added directly, no attention.
    DirectAdd,
    /// V: attention maps replaced by a constant one half.
    NoAttentionMaps,
}

impl TemVariant {
    pub const ALL: [TemVariant; 6] = [
        TemVariant::Full,
        TemVariant::NoCrossAttention,
        TemVariant::NoResidual,
        TemVariant::SwapRoles,
        TemVariant::DirectAdd,
        TemVariant::NoAttentionMaps,
    ];
}

impl fmt::Display for TemVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemVariant::Full => "full",
            TemVariant::NoCrossAttention => "I",
            TemVariant::NoResidual => "II",
            TemVariant::SwapRoles => "III",
            TemVariant::DirectAdd => "IV",
            TemVariant::NoAttentionMaps => "V",
        })
    }
}

impl FromStr for TemVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "full" => TemVariant::Full,
            "I" | "no-cross-attention" => TemVariant::NoCrossAttention,
            "II" | "no-residual" => TemVariant::NoResidual,
            "III" | "swap-qkv-roles" => TemVariant::SwapRoles,
            "IV" | "direct-add" => TemVariant::DirectAdd,
            "V" | "no-attention-maps" => TemVariant::NoAttentionMaps,
            _ => {
                return Err(format!(
                    "unknown TEM variant {s:?} (expected full, I, II, III, IV or V)"
                ))
            }
        })
    }
}

impl TryFrom<String> for TemVariant {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<TemVariant> for String {
    fn from(v: TemVariant) -> String {
        v.to_string()
    }
}

fn add_conv<T: Scalar>(
    params: &mut ModelParams<T>,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    params.add_uniform(
        format!("{name}.weight"),
        &[cout, cin, k, k],
        cin * k * k,
        rng,
    )?;
    params.add_zeros(format!("{name}.bias"), &[cout])
}

fn conv<'g, T: Scalar>(p: &BoundParams<'g, T>, name: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let w = p.get(&format!("{name}.weight"))?;
    let pad = w.shape()[2] / 2;
    x.conv2d(w, Some(p.get(&format!("{name}.bias"))?), 1, pad)
}

/// Prefix of the encoder used for input slot `slot` (0..4, ordered
/// `Ŷ1, Y1, Y2, Ŷ2`).
pub fn encoder_prefix(shared: bool, slot: usize) -> String {
    if shared {
        "enc".to_string()
    } else {
        format!("enc{slot}")
    }
}

/// Registers every fusion-network parameter.
pub fn init_fusenet_params<T: Scalar>(
    params: &mut ModelParams<T>,
    dims: &NetDims,
    shared_encoder: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    dims.validate()?;
    let c = dims.channels;
    let encoders = if shared_encoder { 1 } else { 4 };
    for slot in 0..encoders {
        let pre = encoder_prefix(shared_encoder, slot);
        add_conv(params, &format!("{pre}.conv1"), c, 1, 3, rng)?;
        add_conv(params, &format!("{pre}.conv2"), c, c, 3, rng)?;
        init_transformer(params, &format!("{pre}.tb"), dims, rng)?;
    }
    for side in ["tem1", "tem2"] {
        let (d, pd) = (dims.token_dim, dims.patch_dim());
        params.add_uniform(format!("{side}.in.weight"), &[pd, d], pd, rng)?;
        params.add_zeros(format!("{side}.in.bias"), &[d])?;
        attention::init_attention(params, &format!("{side}.attn"), dims, rng)?;
        params.add_uniform(format!("{side}.out.weight"), &[d, pd], d, rng)?;
        params.add_zeros(format!("{side}.out.bias"), &[pd])?;
    }
    add_conv(params, "fuse", c, 2 * c, 1, rng)?;
    init_transformer(params, "dec.tb", dims, rng)?;
    add_conv(params, "dec.conv1", c, c, 3, rng)?;
    add_conv(params, "dec.conv2", 1, c, 3, rng)?;
    for side in ["head1", "head2"] {
        add_conv(params, &format!("{side}.conv1"), c / 2, c, 3, rng)?;
        add_conv(params, &format!("{side}.conv2"), 1, c / 2, 3, rng)?;
    }
    Ok(())
}

fn check_divisible(op: &'static str, h: usize, w: usize, p: usize) -> Result<()> {
    if h.is_multiple_of(p) && w.is_multiple_of(p) {
        return Ok(());
    }
    let pad_h = (p - h % p) % p;
    let pad_w = (p - w % p) % p;
    Err(TensorError::InvalidArgument {
        op,
        msg: format!(
            "{w}x{h} is not divisible by patch size {p}; pad by {pad_w} columns and {pad_h} rows"
        ),
    })
}

/// Shadow encoder: two convolutions followed by a transformer block.
pub fn encode<'g, T: Scalar>(
    p: &BoundParams<'g, T>,
    prefix: &str,
    y: Var<'g, T>,
    dims: &NetDims,
) -> Result<Var<'g, T>> {
    let sh = y.shape();
    if sh.len() != 3 || sh[0] != 1 {
        return Err(TensorError::InvalidArgument {
            op: "encode",
            msg: format!("expected a [1,H,W] plane, got {sh:?}"),
        });
    }
    check_divisible("encode", sh[1], sh[2], dims.patch)?;
    let h = conv(p, &format!("{prefix}.conv1"), y)?.relu();
    let h = conv(p, &format!("{prefix}.conv2"), h)?;
    transformer_block(p, &format!("{prefix}.tb"), h, dims)
}

/// Projects a feature map into TEM tokens.
fn tem_tokens<'g, T: Scalar>(
    p: &BoundParams<'g, T>,
    prefix: &str,
    f: Var<'g, T>,
    dims: &NetDims,
) -> Result<Var<'g, T>> {
    linear(p, &format!("{prefix}.in"), f.patchify(dims.patch)?)
}

/// Cross-attention detail completion: queries from `f`, keys and values
/// from the enhanced features `fhat`, result added back onto `f`.
pub fn tem_cross_attention<'g, T: Scalar>(
    p: &BoundParams<'g, T>,
    prefix: &str,
    f: Var<'g, T>,
    fhat: Var<'g, T>,
    dims: &NetDims,
    variant: TemVariant,
) -> Result<Var<'g, T>> {
    let (fs, hs) = (f.shape(), fhat.shape());
    if fs != hs || fs.len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "tem_cross_attention",
            left: fs,
            right: hs,
        });
    }
    let (c, h, w) = (fs[0], fs[1], fs[2]);
    check_divisible("tem_cross_attention", h, w, dims.patch)?;
    let grid = (h / dims.patch, w / dims.patch);
    match variant {
        TemVariant::NoCrossAttention => return Ok(f),
        TemVariant::DirectAdd => return f.add(fhat),
        _ => {}
    }
    let tf = tem_tokens(p, prefix, f, dims)?;
    let th = tem_tokens(p, prefix, fhat, dims)?;
    let (q, kv) = if variant == TemVariant::SwapRoles {
        (th, tf)
    } else {
        (tf, th)
    };
    let att = attention(p, &format!("{prefix}.attn"), q, kv, dims.heads, grid)?;
    let back = linear(p, &format!("{prefix}.out"), att.output)?.unpatchify(c, h, w, dims.patch)?;
    if variant == TemVariant::NoResidual {
        Ok(back)
    } else {
        f.add(back)
    }
}

/// Sigmoid attention map from one side's calibrated features.
pub fn attention_map<'g, T: Scalar>(
    p: &BoundParams<'g, T>,
    side: &str,
    cal: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let h = conv(p, &format!("{side}.conv1"), cal)?.relu();
    Ok(conv(p, &format!("{side}.conv2"), h)?.sigmoid())
}

/// Decoder: transformer block and two convolutions down to one channel.
pub fn decode<'g, T: Scalar>(
    p: &BoundParams<'g, T>,
    ft: Var<'g, T>,
    dims: &NetDims,
) -> Result<Var<'g, T>> {
    let h = transformer_block(p, "dec.tb", ft, dims)?;
    let h = conv(p, "dec.conv1", h)?.relu();
    conv(p, "dec.conv2", h)
}

/// Result of the fusion head.
pub struct FusedLuma<'g, T: Scalar> {
    pub fused: Var<'g, T>,
    pub decoded: Var<'g, T>,
    pub map1: Var<'g, T>,
    pub map2: Var<'g, T>,
}

/// Fusion layer, decoder and attention-map composition:
/// `clamp(M1*Ŷ1 + decoder(F_T) + M2*Ŷ2, 0, 1)`.
pub fn fuse_and_decode<'g, T: Scalar>(
    p: &BoundParams<'g, T>,
    cal1: Var<'g, T>,
    cal2: Var<'g, T>,
    yhat1: Var<'g, T>,
    yhat2: Var<'g, T>,
    dims: &NetDims,
    variant: TemVariant,
) -> Result<FusedLuma<'g, T>> {
    let (s1, s2) = (cal1.shape(), cal2.shape());
    if s1 != s2 {
        return Err(TensorError::ShapeMismatch {
            op: "fuse_and_decode",
            left: s1,
            right: s2,
        });
    }
    let plane = vec![1, s1[1], s1[2]];
    for y in [yhat1, yhat2] {
        if y.shape() != plane {
            return Err(TensorError::ShapeMismatch {
                op: "fuse_and_decode",
                left: plane,
                right: y.shape(),
            });
        }
    }
    let ft = conv(p, "fuse", Var::concat(&[cal1, cal2])?)?;
    let decoded = decode(p, ft, dims)?;
    let (map1, map2) = if variant == TemVariant::NoAttentionMaps {
        let half = || cal1.graph().constant(Tensor::full(&plane, T::lit(0.5)));
        (half(), half())
    } else {
        (
            attention_map(p, "head1", cal1)?,
            attention_map(p, "head2", cal2)?,
        )
    };
    let fused = map1
        .mul(yhat1)?
        .add(decoded)?
        .add(map2.mul(yhat2)?)?
        .clamp(0.0, 1.0);
    Ok(FusedLuma {
        fused,
        decoded,
        map1,
        map2,
    })
}

/// Exchanges every per-side parameter set (`tem1`/`tem2`, `head1`/`head2`,
/// and the two input halves of the fusion layer).
pub fn swap_sides<T: Scalar>(params: &ModelParams<T>) -> Result<ModelParams<T>> {
    let mut out = ModelParams::new();
    for (name, _) in params.iter() {
        let partner = if let Some(rest) = name.strip_prefix("tem1.") {
            format!("tem2.{rest}")
        } else if let Some(rest) = name.strip_prefix("tem2.") {
            format!("tem1.{rest}")
        } else if let Some(rest) = name.strip_prefix("head1.") {
            format!("head2.{rest}")
        } else if let Some(rest) = name.strip_prefix("head2.") {
            format!("head1.{rest}")
        } else {
            name.to_string()
        };
        let mut v = params
            .get(&partner)
            .ok_or_else(|| TensorError::UnknownParam(partner.clone()))?
            .clone();
        if name == "fuse.weight" {
            let s = v.shape().to_vec();
            let (cout, cin2) = (s[0], s[1]);
            let half = cin2 / 2;
            let k = s[2] * s[3];
            let src = v.data().to_vec();
            let dst = v.data_mut();
            for o in 0..cout {
                for i in 0..cin2 {
                    let j = (i + half) % cin2;
                    dst[(o * cin2 + i) * k..(o * cin2 + i + 1) * k]
                        .copy_from_slice(&src[(o * cin2 + j) * k..(o * cin2 + j + 1) * k]);
                }
            }
        }
        out.insert(name, v)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> NetDims {
        NetDims {
            channels: 4,
            patch: 2,
            token_dim: 8,
            heads: 2,
            bias_grid: 2,
        }
    }

    fn plane(g: &Graph<f64>, h: usize, w: usize, off: f64) -> Var<'_, f64> {
        let data = (0..h * w)
            .map(|i| ((i as f64 * 0.37 + off).sin() + 1.0) / 2.0)
            .collect();
        g.constant(Tensor::new(&[1, h, w], data).unwrap())
    }

    fn params(shared: bool) -> ModelParams<f64> {
        let mut p = ModelParams::new();
        init_fusenet_params(&mut p, &dims(), shared, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        p
    }

    #[test]
    fn variant_names_round_trip() {
        for v in TemVariant::ALL {
            assert_eq!(v.to_string().parse::<TemVariant>().unwrap(), v);
        }
        assert!("VI".parse::<TemVariant>().is_err());
    }

    #[test]
    fn encoder_shapes_and_patch_check() {
        let p = params(true);
        let g = Graph::new();
        let b = p.bind(&g, false);
        let f = encode(&b, "enc", plane(&g, 6, 4, 0.0), &dims()).unwrap();
        assert_eq!(f.shape(), vec![4, 6, 4]);
        let err = encode(&b, "enc", plane(&g, 5, 4, 0.0), &dims())
            .unwrap_err()
            .to_string();
        assert!(err.contains("patch size 2"), "{err}");
    }

    #[test]
    fn unshared_encoders_are_distinct() {
        let p = params(false);
        assert!(p.contains("enc0.conv1.weight") && p.contains("enc3.tb.out.bias"));
        assert!(!p.contains("enc.conv1.weight"));
    }

    #[test]
    fn zero_attention_maps_and_decoder_give_zero() {
        let mut p = params(true);
        p.zero_all();
        let g = Graph::new();
        let b = p.bind(&g, false);
        let f = g.constant(Tensor::zeros(&[4, 4, 4]));
        let (y1, y2) = (plane(&g, 4, 4, 0.0), plane(&g, 4, 4, 1.0));
        let out = fuse_and_decode(&b, f, f, y1, y2, &dims(), TemVariant::Full).unwrap();
        let (a, b1, b2) = (out.fused.value(), y1.value(), y2.value());
        for i in 0..16 {
            let expect = 0.5 * b1.data()[i] + 0.5 * b2.data()[i];
            assert!((a.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn tem_variants_wire_differently() {
        let p = params(true);
        let g = Graph::new();
        let b = p.bind(&g, false);
        let d = dims();
        let f = encode(&b, "enc", plane(&g, 4, 4, 0.0), &d).unwrap();
        let fh = encode(&b, "enc", plane(&g, 4, 4, 2.0), &d).unwrap();
        let run = |v| {
            tem_cross_attention(&b, "tem1", f, fh, &d, v)
                .unwrap()
                .value()
                .clone()
        };
        assert_eq!(run(TemVariant::NoCrossAttention), *f.value());
        let direct = run(TemVariant::DirectAdd);
        let sum = f.add(fh).unwrap();
        assert_eq!(direct, *sum.value());
        let full = run(TemVariant::Full);
        let nores = run(TemVariant::NoResidual);
        for i in 0..full.numel() {
            assert!((full.data()[i] - f.value().data()[i] - nores.data()[i]).abs() < 1e-12);
        }
        assert_ne!(run(TemVariant::SwapRoles), full);
    }

    #[test]
    fn swap_sides_mirrors_fusion() {
        let p = params(true);
        let s = swap_sides(&p).unwrap();
        assert_eq!(s.get("tem1.attn.wq"), p.get("tem2.attn.wq"));
        assert_eq!(s.get("head2.conv1.weight"), p.get("head1.conv1.weight"));
        let run = |params: &ModelParams<f64>, first: f64, second: f64| {
            let g = Graph::new();
            let b = params.bind(&g, false);
            let c1 = encode(&b, "enc", plane(&g, 4, 4, first), &dims()).unwrap();
            let c2 = encode(&b, "enc", plane(&g, 4, 4, second), &dims()).unwrap();
            let y1 = plane(&g, 4, 4, first);
            let y2 = plane(&g, 4, 4, second);
            let out = fuse_and_decode(&b, c1, c2, y1, y2, &dims(), TemVariant::Full).unwrap();
            let v = out.fused.value().clone();
            v
        };
        let a = run(&p, 0.0, 1.5);
        let b = run(&s, 1.5, 0.0);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
