//! End-to-end fusion: luma enhancement and fusion on the graph, chroma
//! fusion and color enhancement on plain images.

use std::time::{Duration, Instant};

use rand::Rng;

use crate::color::{
    color_enhance, fuse_chrominance, rgb_to_ycbcr, ycbcr_to_rgb, Plane, RgbImage, CHROMA_NEUTRAL,
};
use crate::config::{FusionConfig, GcmMode};
use crate::error::{Error, Result, StageExt};
use crate::fusenet::{
    encode, encoder_prefix, fuse_and_decode, init_fusenet_params, tem_cross_attention, FusedLuma,
};
use crate::gcm::{
    curves_var, denoise_var, gamma_var, init_denoiser_params, init_gcm_params, DenoiserKind,
};
use crate::losses::{loss_exp, loss_grad, loss_int, loss_is, loss_spa, loss_ssim, LossTerms};
use crate::scalar::Scalar;
use crate::tensor::{BoundParams, Graph, ModelParams, Tensor, Var};

/// Registers every parameter the configuration needs.
pub fn init_model<T: Scalar>(cfg: &FusionConfig, rng: &mut impl Rng) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut p = ModelParams::new();
    let n = cfg.effective_iterations();
    if n > 0 {
        init_gcm_params(&mut p, n, rng)?;
    }
    if cfg.effective_denoiser() == DenoiserKind::ResidualCnn {
        init_denoiser_params(&mut p, rng)?;
    }
    init_fusenet_params(&mut p, &cfg.net_dims(), cfg.shared_encoder, rng)?;
    Ok(p)
}

/// Every intermediate of the luma branch for one pair.
pub struct LumaForward<'g, T: Scalar> {
    pub y: [Var<'g, T>; 2],
    /// Curve stacks (absent with the curve estimator ablated).
    pub curves: [Option<Var<'g, T>>; 2],
    /// Gamma-corrected planes before denoising.
    pub enhanced: [Var<'g, T>; 2],
    /// Per-iteration gamma results.
    pub steps: [Vec<Var<'g, T>>; 2],
    pub yhat: [Var<'g, T>; 2],
    pub fused: FusedLuma<'g, T>,
}

impl<'g, T: Scalar> LumaForward<'g, T> {
    /// The encoder input set `(Ŷ1, Y1, Y2, Ŷ2)`.
    pub fn sources(&self) -> [Var<'g, T>; 4] {
        [self.yhat[0], self.y[0], self.y[1], self.yhat[1]]
    }
}

/// Graph-level luma pipeline for `[1,H,W]` planes `y1`, `y2`.
pub fn luma_forward<'g, T: Scalar>(
    p: &BoundParams<'g, T>,
    y1: Var<'g, T>,
    y2: Var<'g, T>,
    cfg: &FusionConfig,
) -> Result<LumaForward<'g, T>> {
    let gcm_on = cfg.ablation.gcm != GcmMode::Off;
    let kind = cfg.effective_denoiser();
    let mut curves = [None, None];
    let mut enhanced = [y1, y2];
    let mut steps = [Vec::new(), Vec::new()];
    let mut yhat = [y1, y2];
    for (i, y) in [y1, y2].into_iter().enumerate() {
        if gcm_on {
            let c = curves_var(p, y).stage("gcm")?;
            let (out, s) = gamma_var(y, c).stage("gcm")?;
            curves[i] = Some(c);
            enhanced[i] = out;
            steps[i] = s;
        }
        yhat[i] = denoise_var(p, enhanced[i], kind).stage("denoise")?;
    }
    let dims = cfg.net_dims();
    let inputs = [yhat[0], y1, y2, yhat[1]];
    let mut feats = Vec::with_capacity(4);
    for (slot, x) in inputs.into_iter().enumerate() {
        feats
            .push(encode(p, &encoder_prefix(cfg.shared_encoder, slot), x, &dims).stage("encoder")?);
    }
    let v = cfg.ablation.tem_variant;
    let cal1 = tem_cross_attention(p, "tem1", feats[1], feats[0], &dims, v).stage("tem")?;
    let cal2 = tem_cross_attention(p, "tem2", feats[2], feats[3], &dims, v).stage("tem")?;
    let fused = fuse_and_decode(p, cal1, cal2, yhat[0], yhat[1], &dims, v).stage("decoder")?;
    Ok(LumaForward {
        y: [y1, y2],
        curves,
        enhanced,
        steps,
        yhat,
        fused,
    })
}

/// All loss components for one forward pass. The curve-estimator terms
/// are summed over both sources and are zero when it is ablated.
pub fn training_losses<'g, T: Scalar>(
    fwd: &LumaForward<'g, T>,
    cfg: &FusionConfig,
) -> Result<LossTerms<'g, T>> {
    let g = fwd.y[0].graph();
    let zero = || g.constant(Tensor::scalar(T::zero()));
    let (mut spa, mut exp, mut is) = (zero(), zero(), zero());
    for i in 0..2 {
        if let Some(c) = fwd.curves[i] {
            spa = spa.add(loss_spa(fwd.enhanced[i], fwd.y[i])?)?;
            exp = exp.add(loss_exp(fwd.enhanced[i])?)?;
            is = is.add(loss_is(c)?)?;
        }
    }
    let src = fwd.sources();
    let w = cfg.weight_preset.weights();
    let f = fwd.fused.fused;
    Ok(LossTerms {
        spa,
        exp,
        is,
        int: loss_int(f, &src, w)?,
        grad: loss_grad(f, &src)?,
        ssim: loss_ssim(f, &src, w)?,
    })
}

/// Result of [`forward_pipeline`].
pub struct PipelineOutput<T> {
    pub image: RgbImage<T>,
    pub fused_y: Plane<T>,
    /// Denoised enhanced planes `Ŷ1`, `Ŷ2`.
    pub yhat: [Plane<T>; 2],
    pub maps: [Plane<T>; 2],
    pub timings: Vec<(&'static str, Duration)>,
}

fn pad_to_multiple<T: Scalar>(img: &RgbImage<T>, p: usize) -> RgbImage<T> {
    let (w, h) = img.dims();
    let (pw, ph) = (w.div_ceil(p) * p, h.div_ceil(p) * p);
    if (pw, ph) == (w, h) {
        return img.clone();
    }
    let planes: Vec<Plane<T>> = (0..3)
        .map(|c| img.channel(c).pad_reflect_to(pw, ph))
        .collect();
    RgbImage::from_planes(&planes[0], &planes[1], &planes[2]).expect("same dims")
}

/// Fuses an over-exposed image `i1` and an under-exposed image `i2`.
/// Inputs are reflect-padded to a multiple of the token patch and the
/// result is cropped back.
pub fn forward_pipeline<T: Scalar>(
    i1: &RgbImage<T>,
    i2: &RgbImage<T>,
    params: &ModelParams<T>,
    cfg: &FusionConfig,
) -> Result<PipelineOutput<T>> {
    if i1.dims() != i2.dims() {
        return Err(Error::Data(format!(
            "source images differ in size: {}x{} vs {}x{}",
            i1.width(),
            i1.height(),
            i2.width(),
            i2.height()
        )));
    }
    let (w, h) = i1.dims();
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &'static str, timings: &mut Vec<(&'static str, Duration)>| {
        let now = Instant::now();
        timings.push((name, now - clock));
        clock = now;
    };

    let a = pad_to_multiple(i1, cfg.patch);
    let b = pad_to_multiple(i2, cfg.patch);
    let (y1, cb1, cr1) = rgb_to_ycbcr(&a);
    let (y2, cb2, cr2) = rgb_to_ycbcr(&b);
    lap("color split", &mut timings);

    let (fused_y, yhat, maps) = {
        let g = Graph::new();
        let p = params.bind(&g, false);
        let fwd = luma_forward(
            &p,
            g.constant(y1.to_tensor()),
            g.constant(y2.to_tensor()),
            cfg,
        )?;
        let plane = |v: Var<'_, T>| Plane::from_tensor(&v.value()).map(|q| q.crop(0, 0, w, h));
        (
            plane(fwd.fused.fused)?,
            [plane(fwd.yhat[0])?, plane(fwd.yhat[1])?],
            [plane(fwd.fused.map1)?, plane(fwd.fused.map2)?],
        )
    };
    lap("luma fusion", &mut timings);

    let crop = |q: &Plane<T>| q.crop(0, 0, w, h);
    let cb = fuse_chrominance(&crop(&cb1), &crop(&cb2), CHROMA_NEUTRAL).stage("chroma")?;
    let cr = fuse_chrominance(&crop(&cr1), &crop(&cr2), CHROMA_NEUTRAL).stage("chroma")?;
    let rgb = ycbcr_to_rgb(&fused_y, &cb, &cr).stage("chroma")?;
    lap("chroma fusion", &mut timings);

    let image = if cfg.ablation.ce.is_on() {
        color_enhance(&rgb, cfg.delta)
    } else {
        rgb.clamped()
    };
    lap("color enhancement", &mut timings);
    Ok(PipelineOutput {
        image,
        fused_y,
        yhat,
        maps,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Ablation, Switch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> FusionConfig {
        FusionConfig {
            channels: 4,
            token_dim: 8,
            heads: 2,
            patch: 4,
            bias_grid: 2,
            gcm_iterations: 3,
            ..FusionConfig::default()
        }
    }

    fn image(w: usize, h: usize, k: f64) -> RgbImage<f64> {
        RgbImage::from_fn(w, h, |x, y| {
            let t = ((x * 7 + y * 3) as f64 * k).sin() * 0.4 + 0.5;
            [t, (t * 0.8 + 0.1).min(1.0), (1.0 - t) * 0.9]
        })
    }

    #[test]
    fn equal_inputs_zero_net_reproduce_input() {
        let cfg = small_cfg().with_ablation(Ablation {
            gcm: GcmMode::Off,
            ce: Switch::Off,
            denoise: Switch::Off,
            ..Ablation::default()
        });
        let mut params = init_model::<f64>(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        params.zero_all();
        let img = image(10, 7, 0.3);
        let out = forward_pipeline(&img, &img, &params, &cfg).unwrap();
        assert_eq!(out.image.dims(), (10, 7));
        assert!(out.image.max_abs_diff(&img) < 1e-12);
        for m in &out.maps {
            assert!(m.values().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let cfg = small_cfg();
        let params = init_model::<f64>(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let err = forward_pipeline(&image(8, 8, 0.1), &image(8, 4, 0.1), &params, &cfg)
            .err()
            .unwrap();
        assert!(err.to_string().contains("differ in size"));
    }

    #[test]
    fn missing_params_name_the_stage() {
        let cfg = small_cfg();
        let err = forward_pipeline(
            &image(8, 8, 0.1),
            &image(8, 8, 0.2),
            &ModelParams::new(),
            &cfg,
        )
        .err()
        .unwrap();
        assert!(err.to_string().starts_with("gcm:"), "{err}");
    }

    #[test]
    fn random_net_is_deterministic_and_bounded() {
        let cfg = small_cfg();
        let params = init_model::<f32>(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (a, b) = (image(12, 8, 0.2).cast(), image(12, 8, 0.5).cast());
        let o1 = forward_pipeline(&a, &b, &params, &cfg).unwrap();
        let o2 = forward_pipeline(&a, &b, &params, &cfg).unwrap();
        assert_eq!(o1.image, o2.image);
        assert!(o1
            .fused_y
            .values()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }
}
