//! Finite-difference gradient suite shared by the gradient tests and the
//! acceptance run.

use std::rc::Rc;

use mef_core::config::FusionConfig;
use mef_core::fusenet::{attention, init_fusenet_params, transformer_block, NetDims};
use mef_core::gcm::{
    curves_var, denoise_var, gamma_var, init_denoiser_params, init_gcm_params, DenoiserKind,
};
use mef_core::losses::{
    loss_exp, loss_grad, loss_int, loss_is, loss_spa, loss_ssim, sobel_magnitude, ssim, LossWeights,
};
use mef_core::pipeline::init_model;
use mef_core::tensor::{ModelParams, Tensor, Var};
use mef_core::trainer::{example_gradients, example_losses, synthetic_pair, LumaPair};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{grad_check, tensor, uniform};

pub const OP_TOL: f64 = 1e-4;
pub const TOTAL_TOL: f64 = 1e-3;

pub type Report = Vec<(&'static str, f64)>;

/// Every per-op group in order.
pub fn all_ops() -> Report {
    [
        elementwise_ops(),
        shape_ops(),
        matrix_ops(),
        conv_ops(),
        loss_ops(),
        module_ops(),
    ]
    .concat()
}

/// Four distinct sources built from two inputs.
fn four<'g>(v: &[Var<'g, f64>]) -> [Var<'g, f64>; 4] {
    [v[1], v[2], v[1].scale(0.5), v[2].square()]
}

pub fn elementwise_ops() -> Report {
    let mut r = Report::new();
    let a = tensor(&[2, 3, 4], 0.2, 0.9, 1);
    let b = tensor(&[2, 3, 4], 1.1, 1.8, 2);
    // signed input kept away from zero so abs/relu/clamp are smooth
    let s = Tensor::from_f64(&[6], &[-0.8, -0.3, 0.4, 0.7, -0.55, 0.25]).unwrap();
    r.push((
        "add",
        grad_check(&[a.clone(), b.clone()], |_, v| v[0].add(v[1])),
    ));
    r.push((
        "sub",
        grad_check(&[a.clone(), b.clone()], |_, v| v[0].sub(v[1])),
    ));
    r.push((
        "mul",
        grad_check(&[a.clone(), b.clone()], |_, v| v[0].mul(v[1])),
    ));
    r.push((
        "div",
        grad_check(&[a.clone(), b.clone()], |_, v| v[0].div(v[1])),
    ));
    r.push((
        "maximum",
        grad_check(&[a.clone(), b.clone()], |_, v| {
            v[0].add_scalar(0.6).maximum(v[1])
        }),
    ));
    r.push((
        "pow",
        grad_check(&[a.clone(), b.clone()], |_, v| v[0].pow(v[1])),
    ));
    r.push((
        "scale",
        grad_check(std::slice::from_ref(&a), |_, v| Ok(v[0].scale(-2.5))),
    ));
    r.push((
        "neg",
        grad_check(std::slice::from_ref(&a), |_, v| Ok(v[0].neg())),
    ));
    r.push((
        "add_scalar",
        grad_check(std::slice::from_ref(&a), |_, v| Ok(v[0].add_scalar(0.3))),
    ));
    r.push((
        "square",
        grad_check(std::slice::from_ref(&s), |_, v| Ok(v[0].square())),
    ));
    r.push((
        "abs",
        grad_check(std::slice::from_ref(&s), |_, v| Ok(v[0].abs())),
    ));
    r.push((
        "relu",
        grad_check(std::slice::from_ref(&s), |_, v| Ok(v[0].relu())),
    ));
    r.push((
        "sigmoid",
        grad_check(std::slice::from_ref(&s), |_, v| Ok(v[0].sigmoid())),
    ));
    r.push((
        "gelu",
        grad_check(std::slice::from_ref(&s), |_, v| Ok(v[0].gelu())),
    ));
    r.push((
        "clamp",
        grad_check(std::slice::from_ref(&s), |_, v| Ok(v[0].clamp(-0.5, 0.5))),
    ));
    r.push((
        "sum",
        grad_check(std::slice::from_ref(&a), |_, v| Ok(v[0].sum())),
    ));
    r.push((
        "mean",
        grad_check(std::slice::from_ref(&a), |_, v| Ok(v[0].mean())),
    ));
    r
}

pub fn shape_ops() -> Report {
    let mut r = Report::new();
    let a = tensor(&[2, 4, 6], -1.0, 1.0, 3);
    let m = tensor(&[3, 5], -1.0, 1.0, 4);
    let idx: Rc<[usize]> = vec![0usize, 7, 7, 3, 47, 12].into();
    r.push((
        "reshape",
        grad_check(std::slice::from_ref(&a), |_, v| v[0].reshape(&[8, 6])),
    ));
    r.push((
        "gather",
        grad_check(std::slice::from_ref(&a), |_, v| {
            v[0].gather(idx.clone(), &[2, 3])
        }),
    ));
    r.push((
        "concat",
        grad_check(&[a.clone(), a.clone()], |_, v| {
            Var::concat(&[v[0], v[1].scale(2.0)])
        }),
    ));
    r.push((
        "transpose",
        grad_check(std::slice::from_ref(&m), |_, v| v[0].transpose()),
    ));
    r.push((
        "slice_channels",
        grad_check(std::slice::from_ref(&a), |_, v| v[0].slice_channels(1, 1)),
    ));
    r.push((
        "slice_cols",
        grad_check(std::slice::from_ref(&m), |_, v| v[0].slice_cols(1, 3)),
    ));
    r.push((
        "concat_cols",
        grad_check(&[m.clone(), m.clone()], |_, v| {
            Var::concat_cols(&[v[0], v[1].square()])
        }),
    ));
    r.push((
        "reflect_pad",
        grad_check(std::slice::from_ref(&a), |_, v| v[0].reflect_pad(2, 3)),
    ));
    r.push((
        "diff_x",
        grad_check(std::slice::from_ref(&a), |_, v| v[0].diff_x()),
    ));
    r.push((
        "diff_y",
        grad_check(std::slice::from_ref(&a), |_, v| v[0].diff_y()),
    ));
    r.push((
        "avg_pool",
        grad_check(std::slice::from_ref(&a), |_, v| v[0].avg_pool(2)),
    ));
    r.push((
        "patchify",
        grad_check(std::slice::from_ref(&a), |_, v| v[0].patchify(2)),
    ));
    let tokens = tensor(&[6, 8], -1.0, 1.0, 5);
    r.push((
        "unpatchify",
        grad_check(&[tokens], |_, v| v[0].unpatchify(2, 4, 6, 2)),
    ));
    r
}

pub fn matrix_ops() -> Report {
    let mut r = Report::new();
    let a = tensor(&[3, 4], -1.0, 1.0, 6);
    let b = tensor(&[4, 5], -1.0, 1.0, 7);
    let bias = tensor(&[5], -1.0, 1.0, 8);
    let gamma = tensor(&[4], 0.5, 1.5, 9);
    let beta = tensor(&[4], -0.5, 0.5, 10);
    r.push((
        "matmul",
        grad_check(&[a.clone(), b.clone()], |_, v| v[0].matmul(v[1])),
    ));
    r.push((
        "add_row_bias",
        grad_check(&[b.clone(), bias], |_, v| v[0].add_row_bias(v[1])),
    ));
    r.push((
        "softmax_rows",
        grad_check(std::slice::from_ref(&a), |_, v| {
            v[0].scale(3.0).softmax_rows()
        }),
    ));
    r.push((
        "layer_norm",
        grad_check(&[a.clone(), gamma, beta], |_, v| {
            v[0].layer_norm(v[1], v[2], 1e-5)
        }),
    ));
    r
}

pub fn conv_ops() -> Report {
    let mut r = Report::new();
    let x = tensor(&[2, 6, 7], -1.0, 1.0, 11);
    let w3 = tensor(&[3, 2, 3, 3], -0.5, 0.5, 12);
    let w1 = tensor(&[2, 2, 1, 1], -0.5, 0.5, 13);
    let b = tensor(&[3], -0.2, 0.2, 14);
    r.push((
        "conv3x3 pad1",
        grad_check(&[x.clone(), w3.clone(), b.clone()], |_, v| {
            v[0].conv2d(v[1], Some(v[2]), 1, 1)
        }),
    ));
    r.push((
        "conv3x3 stride2",
        grad_check(&[x.clone(), w3.clone()], |_, v| {
            v[0].conv2d(v[1], None, 2, 1)
        }),
    ));
    r.push((
        "conv3x3 valid",
        grad_check(&[x.clone(), w3], |_, v| v[0].conv2d(v[1], None, 1, 0)),
    ));
    r.push((
        "conv1x1",
        grad_check(&[x, w1], |_, v| v[0].conv2d(v[1], None, 1, 0)),
    ));
    r
}

pub fn loss_ops() -> Report {
    let mut r = Report::new();
    let y = tensor(&[1, 16, 16], 0.05, 0.95, 30);
    let i = tensor(&[1, 16, 16], 0.05, 0.95, 31);
    let f = tensor(&[1, 16, 16], 0.05, 0.95, 32);
    let curves = tensor(&[3, 8, 8], 0.8, 1.4, 33);
    let w = [0.1, 0.2, 0.3, 0.4];
    r.push((
        "loss_spa",
        grad_check(&[y.clone(), i.clone()], |_, v| loss_spa(v[0], v[1])),
    ));
    r.push((
        "loss_exp",
        grad_check(std::slice::from_ref(&y), |_, v| loss_exp(v[0])),
    ));
    r.push(("loss_is", grad_check(&[curves], |_, v| loss_is(v[0]))));
    r.push((
        "loss_int",
        grad_check(&[f.clone(), y.clone(), i.clone()], |_, v| {
            loss_int(v[0], &four(v), w)
        }),
    ));
    r.push((
        "sobel",
        grad_check(std::slice::from_ref(&y), |_, v| sobel_magnitude(v[0])),
    ));
    r.push((
        "loss_grad",
        grad_check(&[f.clone(), y.clone(), i.clone()], |_, v| {
            loss_grad(v[0], &four(v))
        }),
    ));
    r.push((
        "ssim",
        grad_check(&[f.clone(), y.clone()], |_, v| ssim(v[0], v[1])),
    ));
    r.push((
        "loss_ssim",
        grad_check(&[f, y, i], |_, v| loss_ssim(v[0], &four(v), w)),
    ));
    r
}

fn dims() -> NetDims {
    NetDims {
        channels: 4,
        patch: 4,
        token_dim: 8,
        heads: 2,
        bias_grid: 2,
    }
}

/// Random non-zero values for every parameter, including zero-initialized ones.
fn randomized(p: &ModelParams<f64>, seed: u64) -> ModelParams<f64> {
    let mut out = p.clone();
    for (k, (_, t)) in out.iter_mut().enumerate() {
        let n = t.numel();
        let shape = t.shape().to_vec();
        let scale = if shape.len() == 1 { 0.2 } else { 0.4 };
        let v: Vec<f64> = uniform(n, -scale, scale, seed + k as u64);
        *t = Tensor::from_f64(&shape, &v).unwrap();
    }
    out
}

pub fn module_ops() -> Report {
    let mut r = Report::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ModelParams::<f64>::new();
    init_gcm_params(&mut params, 3, &mut rng).unwrap();
    init_denoiser_params(&mut params, &mut rng).unwrap();
    init_fusenet_params(&mut params, &dims(), true, &mut rng).unwrap();
    let params = randomized(&params, 100);
    let y = tensor(&[1, 8, 8], 0.1, 0.9, 40);
    let curves = tensor(&[3, 8, 8], 0.8, 1.4, 41);
    r.push((
        "gamma",
        grad_check(&[y.clone(), curves], |_, v| Ok(gamma_var(v[0], v[1])?.0)),
    ));
    r.push((
        "curve estimator",
        grad_check(std::slice::from_ref(&y), |g, v| {
            curves_var(&params.bind(g, false), v[0])
        }),
    ));
    r.push((
        "denoiser",
        grad_check(std::slice::from_ref(&y), |g, v| {
            denoise_var(&params.bind(g, false), v[0], DenoiserKind::ResidualCnn)
        }),
    ));
    let q = tensor(&[4, 8], -1.0, 1.0, 42);
    let kv = tensor(&[4, 8], -1.0, 1.0, 43);
    r.push((
        "attention",
        grad_check(&[q, kv], |g, v| {
            Ok(attention(&params.bind(g, false), "tem1.attn", v[0], v[1], 2, (2, 2))?.output)
        }),
    ));
    let fmap = tensor(&[4, 8, 8], -1.0, 1.0, 44);
    r.push((
        "transformer",
        grad_check(&[fmap], |g, v| {
            transformer_block(&params.bind(g, false), "enc.tb", v[0], &dims())
        }),
    ));
    r
}

fn e2e_config() -> FusionConfig {
    FusionConfig {
        gcm_iterations: 3,
        channels: 4,
        patch: 4,
        token_dim: 8,
        heads: 2,
        bias_grid: 2,
        ..FusionConfig::default()
    }
}

/// Worst relative error of the end-to-end total loss over sampled entries
/// of every parameter tensor.
pub struct EndToEnd {
    pub total: f64,
    pub checked: usize,
    pub worst: f64,
    pub worst_at: String,
}

pub fn end_to_end_total_loss() -> EndToEnd {
    let cfg = e2e_config();
    let params = init_model::<f64>(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let params = randomized(&params, 500);
    let pair = LumaPair::from(&synthetic_pair::<f64>(16, 16, 9));
    let (_, grads) =
        example_gradients(&params, &pair.y1, &pair.y2, &cfg, &LossWeights::default()).unwrap();
    let total = |p: &ModelParams<f64>| example_losses(p, &pair.y1, &pair.y2, &cfg).unwrap().total;
    // The total is O(10^3), so central differences carry about 1e-7 of
    // cancellation noise; gradients below 1e-4 are therefore compared with
    // that floor in the denominator (an absolute 1e-7 check).
    let h = 1e-5;
    let mut out = EndToEnd {
        total: total(&params),
        checked: 0,
        worst: 0.0,
        worst_at: String::new(),
    };
    for (name, g) in &grads {
        let n = g.len();
        // a few spread-out entries of every tensor
        for j in [0, n / 3, n / 2, n - 1] {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= h;
            let numeric = (total(&plus) - total(&minus)) / (2.0 * h);
            let e = (g[j] - numeric).abs() / g[j].abs().max(numeric.abs()).max(1e-4);
            if e > out.worst {
                out.worst = e;
                out.worst_at = format!("{name}[{j}]");
            }
            out.checked += 1;
        }
    }
    out
}
