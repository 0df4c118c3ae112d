use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::color::Plane;
use crate::scalar::Scalar;
use crate::tensor::{BoundParams, Graph, ModelParams, Result, Tensor, TensorError, Var};

pub const DENOISER_WIDTH: usize = 16;

/// Denoising stage applied to the gamma-corrected luma.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DenoiserKind {
    Identity,
    /// Separable Gaussian blur with reflect padding.
    Gaussian {
        sigma: f64,
    },
    /// Three-layer conv net predicting a noise residual; trained jointly.
    ResidualCnn,
}

impl fmt::Display for DenoiserKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenoiserKind::Identity => f.write_str("identity"),
            DenoiserKind::Gaussian { sigma } => write!(f, "gaussian:{sigma}"),
            DenoiserKind::ResidualCnn => f.write_str("residual-cnn"),
        }
    }
}

impl FromStr for DenoiserKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "identity" => Ok(DenoiserKind::Identity),
            "residual-cnn" => Ok(DenoiserKind::ResidualCnn),
            "gaussian" => Ok(DenoiserKind::Gaussian { sigma: 1.0 }),
            _ => {
                if let Some(sigma) = s.strip_prefix("gaussian:") {
                    let sigma: f64 = sigma
                        .parse()
                        .map_err(|_| format!("invalid gaussian sigma in {s:?}"))?;
                    if !(sigma > 0.0 && sigma.is_finite()) {
                        return Err(format!("gaussian sigma must be positive, got {sigma}"));
                    }
                    Ok(DenoiserKind::Gaussian { sigma })
                } else {
                    Err(format!(
                        "unknown denoiser {s:?} (expected identity, gaussian[:sigma] or residual-cnn)"
                    ))
                }
            }
        }
    }
}

impl TryFrom<String> for DenoiserKind {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<DenoiserKind> for String {
    fn from(k: DenoiserKind) -> String {
        k.to_string()
    }
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Registers the residual denoiser under `den.conv{1..3}`.
pub fn init_denoiser_params<T: Scalar>(
    params: &mut ModelParams<T>,
    rng: &mut impl Rng,
) -> Result<()> {
    let chans = [
        (1, DENOISER_WIDTH),
        (DENOISER_WIDTH, DENOISER_WIDTH),
        (DENOISER_WIDTH, 1),
    ];
    for (i, (cin, cout)) in chans.into_iter().enumerate() {
        params.add_uniform(
            format!("den.conv{}.weight", i + 1),
            &[cout, cin, 3, 3],
            cin * 9,
            rng,
        )?;
        params.add_zeros(format!("den.conv{}.bias", i + 1), &[cout])?;
    }
    Ok(())
}

fn gaussian_var<'g, T: Scalar>(y: Var<'g, T>, sigma: f64) -> Result<Var<'g, T>> {
    let k = gaussian_kernel(sigma);
    let r = k.len() / 2;
    let g = y.graph();
    let kx = g.constant(Tensor::from_f64(&[1, 1, 1, k.len()], &k)?);
    let ky = g.constant(Tensor::from_f64(&[1, 1, k.len(), 1], &k)?);
    let sh = y.shape();
    if sh[1] <= r || sh[2] <= r {
        return Err(TensorError::InvalidArgument {
            op: "denoise",
            msg: format!("plane {}x{} smaller than gaussian radius {r}", sh[2], sh[1]),
        });
    }
    let h = y.reflect_pad(0, r)?.conv2d(kx, None, 1, 0)?;
    h.reflect_pad(r, 0)?.conv2d(ky, None, 1, 0)
}

/// Differentiable denoising of a `[1,H,W]` plane.
pub fn denoise_var<'g, T: Scalar>(
    p: &BoundParams<'g, T>,
    y: Var<'g, T>,
    kind: DenoiserKind,
) -> Result<Var<'g, T>> {
    match kind {
        DenoiserKind::Identity => Ok(y),
        DenoiserKind::Gaussian { sigma } => gaussian_var(y, sigma),
        DenoiserKind::ResidualCnn => {
            let mut h = y;
            for i in 1..=3 {
                let w = p.get(&format!("den.conv{i}.weight"))?;
                let b = p.get(&format!("den.conv{i}.bias"))?;
                h = h.conv2d(w, Some(b), 1, 1)?;
                if i < 3 {
                    h = h.relu();
                }
            }
            Ok(y.sub(h)?.clamp(0.0, 1.0))
        }
    }
}

pub fn denoise<T: Scalar>(
    y: &Plane<T>,
    kind: DenoiserKind,
    params: &ModelParams<T>,
) -> Result<Plane<T>> {
    let g = Graph::new();
    let p = params.bind(&g, false);
    let out = denoise_var(&p, g.constant(y.to_tensor()), kind)?;
    let v = out.value();
    Plane::from_tensor(&v)
}
