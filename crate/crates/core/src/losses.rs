//! Training objective: exposure-correction losses for the curve estimator
//! and intensity / gradient / SSIM losses for the fused luma.
//!
//! Every loss is built on graph [`Var`]s so it can be differentiated; the
//! `*_value` helpers evaluate the same code on plain planes.

use serde::{Deserialize, Serialize};

use crate::color::Plane;
use crate::gcm::gaussian_kernel;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

pub const SPA_REGION: usize = 4;
pub const EXP_REGION: usize = 16;
pub const EXP_TARGET: f64 = 0.5;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Scalar weights of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub spa: f64,
    pub exp: f64,
    pub is: f64,
    pub int: f64,
    pub grad: f64,
    pub ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            spa: 1.0,
            exp: 2.0,
            is: 200.0,
            int: 10.0,
            grad: 3.0,
            ssim: 2.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            spa: 0.0,
            exp: 0.0,
            is: 0.0,
            int: 0.0,
            grad: 0.0,
            ssim: 0.0,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let all = [self.spa, self.exp, self.is, self.int, self.grad, self.ssim];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(format!(
                "loss weights must be finite and nonnegative, got {all:?}"
            ))
        }
    }
}

/// Per-source weights over `(Ŷ1, Y1, Y2, Ŷ2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightPreset {
    /// Only the original exposures.
    #[default]
    Metrics,
    /// Equal weight on all four planes.
    Visual,
}

impl WeightPreset {
    pub fn weights(self) -> [f64; 4] {
        match self {
            WeightPreset::Metrics => [0.0, 0.5, 0.5, 0.0],
            WeightPreset::Visual => [0.25; 4],
        }
    }
}

fn plane_dims(op: &'static str, v: &Var<'_, impl Scalar>) -> Result<(usize, usize)> {
    let s = v.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected a [1,H,W] plane, got {s:?}"),
        });
    }
    Ok((s[1], s[2]))
}

fn same_dims<'g, T: Scalar>(op: &'static str, a: Var<'g, T>, b: Var<'g, T>) -> Result<()> {
    plane_dims(op, &a)?;
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Spatial consistency between an enhanced plane `y` and its source `i`
/// over 4x4 region means and their in-bounds four-neighborhoods.
pub fn loss_spa<'g, T: Scalar>(y: Var<'g, T>, i: Var<'g, T>) -> Result<Var<'g, T>> {
    same_dims("loss_spa", y, i)?;
    let (py, pi) = (y.avg_pool(SPA_REGION)?, i.avg_pool(SPA_REGION)?);
    let k = py.numel() as f64;
    let term = |dy: Var<'g, T>, di: Var<'g, T>| -> Result<Var<'g, T>> {
        Ok(dy.abs().sub(di.abs())?.square().sum())
    };
    let horiz = term(py.diff_x()?, pi.diff_x()?)?;
    let vert = term(py.diff_y()?, pi.diff_y()?)?;
    // each adjacent pair is visited from both sides
    Ok(horiz.add(vert)?.scale(2.0 / k))
}

/// Mean distance of 16x16 region means from the exposure target.
pub fn loss_exp<'g, T: Scalar>(y: Var<'g, T>) -> Result<Var<'g, T>> {
    plane_dims("loss_exp", &y)?;
    Ok(y.avg_pool(EXP_REGION)?.add_scalar(-EXP_TARGET).abs().mean())
}

/// Illumination smoothness of a `[N,H,W]` curve stack.
pub fn loss_is<'g, T: Scalar>(curves: Var<'g, T>) -> Result<Var<'g, T>> {
    let n = curves.shape()[0] as f64;
    let g = curves.diff_x()?.abs().add(curves.diff_y()?.abs())?;
    Ok(g.square().sum().scale(1.0 / n))
}

/// Weighted mean absolute intensity difference to each source.
pub fn loss_int<'g, T: Scalar>(
    fused: Var<'g, T>,
    sources: &[Var<'g, T>; 4],
    w: [f64; 4],
) -> Result<Var<'g, T>> {
    let mut acc: Option<Var<'g, T>> = None;
    for (s, wi) in sources.iter().zip(w) {
        same_dims("loss_int", fused, *s)?;
        let t = fused.sub(*s)?.abs().mean().scale(wi);
        acc = Some(match acc {
            Some(a) => a.add(t)?,
            None => t,
        });
    }
    Ok(acc.expect("four sources"))
}

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// `|Gx| + |Gy|` Sobel magnitude with reflect padding.
pub fn sobel_magnitude<'g, T: Scalar>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    plane_dims("sobel", &x)?;
    let mut k = SOBEL_X.to_vec();
    k.extend(SOBEL_Y);
    let kernel = x.graph().constant(Tensor::from_f64(&[2, 1, 3, 3], &k)?);
    let g = x.reflect_pad(1, 1)?.conv2d(kernel, None, 1, 0)?.abs();
    g.slice_channels(0, 1)?.add(g.slice_channels(1, 1)?)
}

/// L1 distance between the fused gradient magnitude and the per-pixel
/// maximum over the sources.
pub fn loss_grad<'g, T: Scalar>(
    fused: Var<'g, T>,
    sources: &[Var<'g, T>; 4],
) -> Result<Var<'g, T>> {
    let mut best: Option<Var<'g, T>> = None;
    for s in sources {
        same_dims("loss_grad", fused, *s)?;
        let m = sobel_magnitude(*s)?;
        best = Some(match best {
            Some(b) => b.maximum(m)?,
            None => m,
        });
    }
    Ok(sobel_magnitude(fused)?
        .sub(best.expect("four sources"))?
        .abs()
        .mean())
}

fn gaussian_blur<'g, T: Scalar>(x: Var<'g, T>, taps: &[f64]) -> Result<Var<'g, T>> {
    let r = taps.len() / 2;
    let g = x.graph();
    let kx = g.constant(Tensor::from_f64(&[1, 1, 1, taps.len()], taps)?);
    let ky = g.constant(Tensor::from_f64(&[1, 1, taps.len(), 1], taps)?);
    let h = x.reflect_pad(0, r)?.conv2d(kx, None, 1, 0)?;
    h.reflect_pad(r, 0)?.conv2d(ky, None, 1, 0)
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5).
pub fn ssim<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    same_dims("ssim", a, b)?;
    let taps = gaussian_kernel(SSIM_SIGMA);
    let (h, w) = plane_dims("ssim", &a)?;
    if h <= taps.len() / 2 || w <= taps.len() / 2 {
        return Err(TensorError::InvalidArgument {
            op: "ssim",
            msg: format!("{w}x{h} plane is smaller than the SSIM window"),
        });
    }
    let mu_a = gaussian_blur(a, &taps)?;
    let mu_b = gaussian_blur(b, &taps)?;
    let mu_aa = mu_a.square();
    let mu_bb = mu_b.square();
    let mu_ab = mu_a.mul(mu_b)?;
    let var_a = gaussian_blur(a.square(), &taps)?.sub(mu_aa)?;
    let var_b = gaussian_blur(b.square(), &taps)?.sub(mu_bb)?;
    let cov = gaussian_blur(a.mul(b)?, &taps)?.sub(mu_ab)?;
    let num = mu_ab
        .scale(2.0)
        .add_scalar(SSIM_C1)
        .mul(cov.scale(2.0).add_scalar(SSIM_C2))?;
    let den = mu_aa
        .add(mu_bb)?
        .add_scalar(SSIM_C1)
        .mul(var_a.add(var_b)?.add_scalar(SSIM_C2))?;
    Ok(num.div(den)?.mean())
}

/// `Σ w_i (1 - SSIM(fused, source_i))`; zero-weight sources are skipped.
pub fn loss_ssim<'g, T: Scalar>(
    fused: Var<'g, T>,
    sources: &[Var<'g, T>; 4],
    w: [f64; 4],
) -> Result<Var<'g, T>> {
    let mut acc = fused.graph().constant(Tensor::scalar(T::zero()));
    for (s, wi) in sources.iter().zip(w) {
        if wi == 0.0 {
            same_dims("loss_ssim", fused, *s)?;
            continue;
        }
        acc = acc.add(ssim(fused, *s)?.neg().add_scalar(1.0).scale(wi))?;
    }
    Ok(acc)
}

/// The six loss components as graph nodes.
#[derive(Clone, Copy)]
pub struct LossTerms<'g, T: Scalar> {
    pub spa: Var<'g, T>,
    pub exp: Var<'g, T>,
    pub is: Var<'g, T>,
    pub int: Var<'g, T>,
    pub grad: Var<'g, T>,
    pub ssim: Var<'g, T>,
}

impl<'g, T: Scalar> LossTerms<'g, T> {
    /// `W_spa L_spa + W_exp L_exp + W_is L_is + W_int L_int + W_grad L_grad + W_ssim L_ssim`.
    pub fn total(&self, w: &LossWeights) -> Result<Var<'g, T>> {
        let gc = self
            .spa
            .scale(w.spa)
            .add(self.exp.scale(w.exp))?
            .add(self.is.scale(w.is))?;
        let ef = self
            .int
            .scale(w.int)
            .add(self.grad.scale(w.grad))?
            .add(self.ssim.scale(w.ssim))?;
        gc.add(ef)
    }

    pub fn values(&self, w: &LossWeights) -> Result<LossBreakdown> {
        let mut b = LossBreakdown {
            spa: self.spa.item().as_f64(),
            exp: self.exp.item().as_f64(),
            is: self.is.item().as_f64(),
            int: self.int.item().as_f64(),
            grad: self.grad.item().as_f64(),
            ssim: self.ssim.item().as_f64(),
            total: 0.0,
        };
        b.total = b.combine(w);
        Ok(b)
    }
}

/// Numeric loss components of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub spa: f64,
    pub exp: f64,
    pub is: f64,
    pub int: f64,
    pub grad: f64,
    pub ssim: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(&self, w: &LossWeights) -> f64 {
        w.spa * self.spa
            + w.exp * self.exp
            + w.is * self.is
            + w.int * self.int
            + w.grad * self.grad
            + w.ssim * self.ssim
    }

    /// Component-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.spa += b.spa / n;
            m.exp += b.exp / n;
            m.is += b.is / n;
            m.int += b.int / n;
            m.grad += b.grad / n;
            m.ssim += b.ssim / n;
            m.total += b.total / n;
        }
        m
    }
}

fn eval_scalar<T: Scalar>(
    f: impl for<'g> FnOnce(&'g Graph<T>) -> Result<Var<'g, T>>,
) -> Result<f64> {
    let g = Graph::new();
    let v = f(&g)?;
    let out = v.item().as_f64();
    Ok(out)
}

pub fn loss_spa_value<T: Scalar>(y: &Plane<T>, i: &Plane<T>) -> Result<f64> {
    eval_scalar(|g| loss_spa(g.constant(y.to_tensor()), g.constant(i.to_tensor())))
}

pub fn loss_exp_value<T: Scalar>(y: &Plane<T>) -> Result<f64> {
    eval_scalar(|g| loss_exp(g.constant(y.to_tensor())))
}

pub fn loss_is_value<T: Scalar>(curves: &Tensor<T>) -> Result<f64> {
    eval_scalar(|g| loss_is(g.constant(curves.clone())))
}

fn source_vars<'g, T: Scalar>(g: &'g Graph<T>, s: [&Plane<T>; 4]) -> [Var<'g, T>; 4] {
    s.map(|p| g.constant(p.to_tensor()))
}

pub fn loss_int_value<T: Scalar>(
    fused: &Plane<T>,
    sources: [&Plane<T>; 4],
    w: [f64; 4],
) -> Result<f64> {
    eval_scalar(|g| loss_int(g.constant(fused.to_tensor()), &source_vars(g, sources), w))
}

pub fn loss_grad_value<T: Scalar>(fused: &Plane<T>, sources: [&Plane<T>; 4]) -> Result<f64> {
    eval_scalar(|g| loss_grad(g.constant(fused.to_tensor()), &source_vars(g, sources)))
}

pub fn loss_ssim_value<T: Scalar>(
    fused: &Plane<T>,
    sources: [&Plane<T>; 4],
    w: [f64; 4],
) -> Result<f64> {
    eval_scalar(|g| loss_ssim(g.constant(fused.to_tensor()), &source_vars(g, sources), w))
}

pub fn ssim_value<T: Scalar>(a: &Plane<T>, b: &Plane<T>) -> Result<f64> {
    eval_scalar(|g| ssim(g.constant(a.to_tensor()), g.constant(b.to_tensor())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Plane<f64> {
        Plane::from_fn(w, h, |x, y| ((x * 13 + y * 7) % 17) as f64 / 16.0)
    }

    #[test]
    fn fixed_points() {
        let p = ramp(16, 16);
        assert_eq!(loss_spa_value(&p, &p).unwrap(), 0.0);
        assert_eq!(
            loss_exp_value(&Plane::<f64>::filled(32, 16, 0.5)).unwrap(),
            0.0
        );
        assert!((loss_exp_value(&Plane::<f64>::filled(16, 16, 1.0)).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(
            loss_is_value(&Tensor::<f64>::full(&[3, 8, 8], 1.2)).unwrap(),
            0.0
        );
        let s = [&p; 4];
        assert_eq!(loss_int_value(&p, s, [0.25; 4]).unwrap(), 0.0);
        assert_eq!(loss_grad_value(&p, s).unwrap(), 0.0);
        assert!(loss_ssim_value(&p, s, [0.25; 4]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn spa_ignores_inversion_and_offset() {
        let p = ramp(16, 8);
        let inv = p.map(|v| 1.0 - v);
        assert!(loss_spa_value(&inv, &p).unwrap().abs() < 1e-12);
        let a = p.map(|v| v * 0.5);
        let b = ramp(16, 8).map(|v| v * 0.3);
        let shift = |q: &Plane<f64>| q.map(|v| v + 0.2);
        let d = loss_spa_value(&a, &b).unwrap() - loss_spa_value(&shift(&a), &shift(&b)).unwrap();
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn is_step_and_homogeneity() {
        // one map with a vertical step of height 0.3 between columns 3 and 4
        let mut t = Tensor::<f64>::full(&[2, 6, 8], 1.0);
        for y in 0..6 {
            for x in 4..8 {
                t.data_mut()[y * 8 + x] = 1.3;
            }
        }
        let v = loss_is_value(&t).unwrap();
        assert!((v - 6.0 * 0.09 / 2.0).abs() < 1e-12, "{v}");
        let t2 = t.map(|a| 1.0 + 2.0 * (a - 1.0));
        assert!((loss_is_value(&t2).unwrap() - 4.0 * v).abs() < 1e-12);
    }

    #[test]
    fn int_hand_case() {
        let y1 = Plane::<f64>::filled(4, 4, 0.0);
        let y2 = Plane::<f64>::filled(4, 4, 1.0);
        let f = Plane::<f64>::filled(4, 4, 0.5);
        let v = loss_int_value(&f, [&y1, &y1, &y2, &y2], WeightPreset::Metrics.weights()).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = ramp(16, 16);
        let b = Plane::from_fn(16, 16, |x, y| ((x * 3 + y * 11) % 9) as f64 / 8.0);
        let ab = ssim_value(&a, &b).unwrap();
        let ba = ssim_value(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab < 1.0);
    }

    #[test]
    fn combine_default_weights() {
        let b = LossBreakdown {
            spa: 1.0,
            exp: 1.0,
            is: 1.0,
            int: 1.0,
            grad: 1.0,
            ssim: 1.0,
            total: 0.0,
        };
        assert_eq!(b.combine(&LossWeights::default()), 218.0);
        assert_eq!(
            LossBreakdown::default().combine(&LossWeights::default()),
            0.0
        );
    }

    #[test]
    fn size_checks() {
        let a = Plane::<f64>::filled(8, 8, 0.5);
        let b = Plane::<f64>::filled(8, 4, 0.5);
        assert!(loss_spa_value(&a, &b).is_err());
        assert!(loss_exp_value(&a).is_err());
    }
}
