//! Learned per-pixel gamma curves and the iterative exposure operator.
//!
//! A five-layer convolutional estimator maps a luma plane to `N` exponent
//! maps in `[0.8, 1.4]`. Each iteration applies
//! `y <- y + (y - y^a)` pixel-wise and clamps back to `[0,1]`: exponents
//! below one darken, above one brighten, and `0` and `1` are fixed points.

mod denoise;

pub use denoise::{denoise, denoise_var, gaussian_kernel, init_denoiser_params, DenoiserKind};

use rand::Rng;

use crate::color::Plane;
use crate::scalar::Scalar;
use crate::tensor::{BoundParams, Graph, ModelParams, Result, Tensor, TensorError, Var};

pub const CURVE_MIN: f64 = 0.8;
pub const CURVE_MAX: f64 = 1.4;

/// Hidden width of the curve estimator.
pub const GCM_WIDTH: usize = 16;
pub const GCM_LAYERS: usize = 5;

/// Per-pixel exponent maps, one per iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveStack<T> {
    maps: Tensor<T>,
}

impl<T: Scalar> CurveStack<T> {
    pub fn new(maps: Tensor<T>) -> Result<Self> {
        if maps.shape().len() != 3 || maps.shape()[0] == 0 {
            return Err(TensorError::InvalidArgument {
                op: "curve_stack",
                msg: format!("expected [N,H,W] with N >= 1, got {:?}", maps.shape()),
            });
        }
        Ok(Self { maps })
    }

    /// `n` maps filled with a single exponent.
    pub fn constant(n: usize, width: usize, height: usize, a: f64) -> Self {
        Self {
            maps: Tensor::full(&[n, height, width], T::lit(a)),
        }
    }

    pub fn iterations(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.maps
    }

    pub fn map(&self, n: usize) -> Plane<T> {
        let [_, h, w] = [
            self.maps.shape()[0],
            self.maps.shape()[1],
            self.maps.shape()[2],
        ];
        Plane::new(w, h, self.maps.data()[n * h * w..(n + 1) * h * w].to_vec()).expect("dims")
    }
}

fn layer_channels(n_curves: usize) -> [(usize, usize); GCM_LAYERS] {
    [
        (1, GCM_WIDTH),
        (GCM_WIDTH, GCM_WIDTH),
        (GCM_WIDTH, GCM_WIDTH),
        (GCM_WIDTH, GCM_WIDTH),
        (GCM_WIDTH, n_curves),
    ]
}

/// Registers the curve estimator under `gcm.conv{1..5}`.
pub fn init_gcm_params<T: Scalar>(
    params: &mut ModelParams<T>,
    n_curves: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    for (i, (cin, cout)) in layer_channels(n_curves).into_iter().enumerate() {
        params.add_uniform(
            format!("gcm.conv{}.weight", i + 1),
            &[cout, cin, 3, 3],
            cin * 9,
            rng,
        )?;
        params.add_zeros(format!("gcm.conv{}.bias", i + 1), &[cout])?;
    }
    Ok(())
}

/// Number of curves the registered estimator produces.
pub fn gcm_curve_count<T: Scalar>(params: &ModelParams<T>) -> Option<usize> {
    params
        .get(&format!("gcm.conv{GCM_LAYERS}.weight"))
        .map(|w| w.shape()[0])
}

/// Differentiable curve estimation: `[1,H,W]` luma to `[N,H,W]` exponents.
pub fn curves_var<'g, T: Scalar>(p: &BoundParams<'g, T>, y: Var<'g, T>) -> Result<Var<'g, T>> {
    let mut h = y;
    for i in 1..=GCM_LAYERS {
        let w = p.get(&format!("gcm.conv{i}.weight"))?;
        let b = p.get(&format!("gcm.conv{i}.bias"))?;
        h = h.conv2d(w, Some(b), 1, 1)?;
        if i < GCM_LAYERS {
            h = h.relu();
        }
    }
    Ok(h.sigmoid()
        .scale(CURVE_MAX - CURVE_MIN)
        .add_scalar(CURVE_MIN))
}

/// Differentiable gamma iterations. Returns the final plane and every
/// intermediate result (the last entry equals the final plane).
pub fn gamma_var<'g, T: Scalar>(
    y: Var<'g, T>,
    curves: Var<'g, T>,
) -> Result<(Var<'g, T>, Vec<Var<'g, T>>)> {
    let shape = y.shape();
    let cs = curves.shape();
    if shape.len() != 3 || shape[0] != 1 || cs.len() != 3 || cs[1..] != shape[1..] {
        return Err(TensorError::ShapeMismatch {
            op: "apply_gamma",
            left: shape,
            right: cs,
        });
    }
    let mut cur = y;
    let mut steps = Vec::with_capacity(cs[0]);
    for n in 0..cs[0] {
        let a = curves.slice_channels(n, 1)?;
        let beta = cur.sub(cur.pow(a)?)?;
        cur = cur.add(beta)?.clamp(0.0, 1.0);
        steps.push(cur);
    }
    Ok((cur, steps))
}

/// Runs the curve estimator on a luma plane.
pub fn estimate_curves<T: Scalar>(y: &Plane<T>, params: &ModelParams<T>) -> Result<CurveStack<T>> {
    let g = Graph::new();
    let p = params.bind(&g, false);
    let yv = g.constant(y.to_tensor());
    let c = curves_var(&p, yv)?;
    let maps = c.value().clone();
    CurveStack::new(maps)
}

/// Applies every curve in order and returns the final plane.
pub fn apply_gamma<T: Scalar>(y: &Plane<T>, curves: &CurveStack<T>) -> Result<Plane<T>> {
    Ok(gamma_iterations(y, curves)?
        .pop()
        .expect("at least one curve"))
}

/// Result of every gamma iteration, in order.
pub fn gamma_iterations<T: Scalar>(y: &Plane<T>, curves: &CurveStack<T>) -> Result<Vec<Plane<T>>> {
    let g = Graph::new();
    let yv = g.constant(y.to_tensor());
    let cv = g.constant(curves.tensor().clone());
    let (_, steps) = gamma_var(yv, cv)?;
    steps
        .iter()
        .map(|s| Plane::from_tensor(&s.value()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_step(y: f64, a: f64) -> f64 {
        let p = Plane::<f64>::filled(1, 1, y);
        apply_gamma(&p, &CurveStack::constant(1, 1, 1, a))
            .unwrap()
            .get(0, 0)
    }

    #[test]
    fn scalar_steps() {
        assert!((one_step(0.25, 0.8) - 0.17013).abs() < 1e-5);
        // 0.25^1.4 = 0.143587
        assert!((one_step(0.25, 1.4) - 0.356413).abs() < 1e-5);
    }

    #[test]
    fn identity_and_fixed_points() {
        let p = Plane::<f64>::from_fn(5, 4, |x, y| (x + 5 * y) as f64 / 19.0);
        for n in [1, 3, 8] {
            assert_eq!(
                apply_gamma(&p, &CurveStack::constant(n, 5, 4, 1.0)).unwrap(),
                p
            );
        }
        for a in [0.8, 1.1, 1.4] {
            assert_eq!(one_step(0.0, a), 0.0);
            assert_eq!(one_step(1.0, a), 1.0);
        }
    }

    #[test]
    fn zero_network_gives_midpoint_curves() {
        let mut params = ModelParams::<f64>::new();
        init_gcm_params(&mut params, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        params.zero_all();
        let y = Plane::from_fn(6, 3, |x, _| x as f64 / 5.0);
        let c = estimate_curves(&y, &params).unwrap();
        assert_eq!(c.tensor().shape(), &[8, 3, 6]);
        assert!(c.tensor().data().iter().all(|&a| (a - 1.1).abs() < 1e-12));
    }

    #[test]
    fn intermediate_count_matches_curves() {
        let y = Plane::<f32>::filled(4, 4, 0.3);
        let steps = gamma_iterations(&y, &CurveStack::constant(5, 4, 4, 1.2)).unwrap();
        assert_eq!(steps.len(), 5);
        for w in steps.windows(2) {
            assert!(w[1].get(0, 0) > w[0].get(0, 0));
        }
    }
}
