use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Lower bound applied to the base inside the gradients of `pow`.
pub const POW_GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Maximum(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Abs(usize),
    Relu(usize),
    Sigmoid(usize),
    Gelu(usize),
    Pow(usize, usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Gather(usize, Rc<[usize]>),
    Concat(Vec<usize>),
    MatMul(usize, usize),
    AddRowBias(usize, usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    AvgPool(usize, usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// A graph is single-threaded; node ids are assigned in creation order, so
/// the tape is already topologically sorted.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
fn pow_fwd(x: f64, a: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x.powf(a)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes[..], id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let shapes = nodes[..=loss.id]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let leaf = nodes[..=loss.id]
            .iter()
            .map(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            leaf,
            _marker: std::marker::PhantomData,
        })
    }
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[impl NodeInfo],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].needs_grad() {
        return;
    }
    let n = nodes[id].numel();
    let slot = grads[id].get_or_insert_with(|| vec![0.0; n]);
    f(slot);
}

trait NodeInfo {
    fn needs_grad(&self) -> bool;
    fn numel(&self) -> usize;
}

impl<T: Scalar> NodeInfo for Node<T> {
    fn needs_grad(&self) -> bool {
        self.requires_grad
    }
    fn numel(&self) -> usize {
        self.value.numel()
    }
}

fn vals<T: Scalar>(nodes: &[Node<T>], id: usize) -> Vec<f64> {
    nodes[id].value.to_f64()
}

fn propagate<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            accumulate(grads, nodes, a, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
            });
            accumulate(grads, nodes, b, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
            });
        }
        &Op::Sub(a, b) => {
            accumulate(grads, nodes, a, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
            });
            accumulate(grads, nodes, b, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s -= g)
            });
        }
        &Op::Mul(a, b) => {
            let av = vals(nodes, a);
            let bv = vals(nodes, b);
            accumulate(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * bv[i];
                }
            });
            accumulate(grads, nodes, b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * av[i];
                }
            });
        }
        &Op::Div(a, b) => {
            let av = vals(nodes, a);
            let bv = vals(nodes, b);
            accumulate(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] / bv[i];
                }
            });
            accumulate(grads, nodes, b, |s| {
                for i in 0..s.len() {
                    s[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            });
        }
        &Op::Maximum(a, b) => {
            // ties route the gradient to the first argument
            let av = vals(nodes, a);
            let bv = vals(nodes, b);
            accumulate(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    if av[i] >= bv[i] {
                        s[i] += g[i];
                    }
                }
            });
            accumulate(grads, nodes, b, |s| {
                for i in 0..s.len() {
                    if av[i] < bv[i] {
                        s[i] += g[i];
                    }
                }
            });
        }
        &Op::Scale(a, c) => {
            accumulate(grads, nodes, a, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)
            });
        }
        &Op::Shift(a) => {
            accumulate(grads, nodes, a, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
            });
        }
        &Op::Abs(a) => {
            let av = vals(nodes, a);
            accumulate(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    let sign = if av[i] > 0.0 {
                        1.0
                    } else if av[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    s[i] += sign * g[i];
                }
            });
        }
        &Op::Relu(a) => {
            let av = vals(nodes, a);
            accumulate(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    if av[i] > 0.0 {
                        s[i] += g[i];
                    }
                }
            });
        }
        &Op::Sigmoid(a) => {
            let y = node.value.to_f64();
            accumulate(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        &Op::Gelu(a) => {
            let av = vals(nodes, a);
            accumulate(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * gelu_grad(av[i]);
                }
            });
        }
        &Op::Pow(x, e) => {
            let xv = vals(nodes, x);
            let ev = vals(nodes, e);
            accumulate(grads, nodes, x, |s| {
                for i in 0..s.len() {
                    let base = xv[i].max(POW_GRAD_FLOOR);
                    s[i] += g[i] * ev[i] * base.powf(ev[i] - 1.0);
                }
            });
            accumulate(grads, nodes, e, |s| {
                for i in 0..s.len() {
                    let y = pow_fwd(xv[i], ev[i]);
                    s[i] += g[i] * y * xv[i].max(POW_GRAD_FLOOR).ln();
                }
            });
        }
        &Op::Clamp(a, lo, hi) => {
            let av = vals(nodes, a);
            accumulate(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    if av[i] >= lo && av[i] <= hi {
                        s[i] += g[i];
                    }
                }
            });
        }
        &Op::Sum(a) => {
            accumulate(grads, nodes, a, |s| s.iter_mut().for_each(|s| *s += g[0]));
        }
        &Op::Mean(a) => {
            let n = nodes[a].value.numel() as f64;
            accumulate(grads, nodes, a, |s| {
                s.iter_mut().for_each(|s| *s += g[0] / n)
            });
        }
        &Op::Reshape(a) => {
            accumulate(grads, nodes, a, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
            });
        }
        Op::Gather(a, index) => {
            accumulate(grads, nodes, *a, |s| {
                for (o, &src) in index.iter().enumerate() {
                    s[src] += g[o];
                }
            });
        }
        Op::Concat(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p].value.numel();
                accumulate(grads, nodes, p, |s| {
                    s.iter_mut()
                        .zip(&g[off..off + n])
                        .for_each(|(s, g)| *s += g)
                });
                off += n;
            }
        }
        &Op::MatMul(a, b) => {
            let (n, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
            let m = nodes[b].value.shape()[1];
            if nodes[a].requires_grad {
                let bt = kernels::transpose(&vals(nodes, b), k, m);
                let ga = kernels::matmul(g, &bt, n, m, k);
                accumulate(grads, nodes, a, |s| {
                    s.iter_mut().zip(&ga).for_each(|(s, g)| *s += g)
                });
            }
            if nodes[b].requires_grad {
                let at = kernels::transpose(&vals(nodes, a), n, k);
                let gb = kernels::matmul(&at, g, k, n, m);
                accumulate(grads, nodes, b, |s| {
                    s.iter_mut().zip(&gb).for_each(|(s, g)| *s += g)
                });
            }
        }
        &Op::AddRowBias(a, b) => {
            let m = nodes[b].value.numel();
            accumulate(grads, nodes, a, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
            });
            accumulate(grads, nodes, b, |s| {
                for row in g.chunks(m) {
                    s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                }
            });
        }
        &Op::Softmax(a) => {
            let y = node.value.to_f64();
            let m = node.value.shape()[1];
            accumulate(grads, nodes, a, |s| {
                for (r, (yr, gr)) in y.chunks(m).zip(g.chunks(m)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..m {
                        s[r * m + j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        &Op::LayerNorm {
            x,
            gamma,
            beta,
            eps,
        } => {
            let (n, d) = (nodes[x].value.shape()[0], nodes[x].value.shape()[1]);
            let xv = vals(nodes, x);
            let gv = vals(nodes, gamma);
            let stats = kernels::row_stats(&xv, n, d, eps);
            let xhat: Vec<f64> = (0..n * d)
                .map(|i| {
                    let (mu, rs) = stats[i / d];
                    (xv[i] - mu) * rs
                })
                .collect();
            accumulate(grads, nodes, gamma, |s| {
                for i in 0..n * d {
                    s[i % d] += g[i] * xhat[i];
                }
            });
            accumulate(grads, nodes, beta, |s| {
                for i in 0..n * d {
                    s[i % d] += g[i];
                }
            });
            accumulate(grads, nodes, x, |s| {
                for r in 0..n {
                    let rs = stats[r].1;
                    let row = r * d..(r + 1) * d;
                    let dxhat: Vec<f64> = row.clone().map(|i| g[i] * gv[i % d]).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx = dxhat
                        .iter()
                        .zip(&xhat[row.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / d as f64;
                    for (j, i) in row.enumerate() {
                        s[i] += rs * (dxhat[j] - mean_d - xhat[i] * mean_dx);
                    }
                }
            });
        }
        &Op::Conv2d { x, w, b, geom } => {
            if nodes[x].requires_grad {
                let gx = kernels::conv2d_backward_input(&geom, &vals(nodes, w), g);
                accumulate(grads, nodes, x, |s| {
                    s.iter_mut().zip(&gx).for_each(|(s, g)| *s += g)
                });
            }
            let wants_w = nodes[w].requires_grad || b.is_some_and(|b| nodes[b].requires_grad);
            if wants_w {
                let (gw, gb) = kernels::conv2d_backward_params(&geom, &vals(nodes, x), g);
                accumulate(grads, nodes, w, |s| {
                    s.iter_mut().zip(&gw).for_each(|(s, g)| *s += g)
                });
                if let Some(b) = b {
                    accumulate(grads, nodes, b, |s| {
                        s.iter_mut().zip(&gb).for_each(|(s, g)| *s += g)
                    });
                }
            }
        }
        &Op::AvgPool(a, k) => {
            let sh = nodes[a].value.shape();
            let (c, h, w) = (sh[0], sh[1], sh[2]);
            let (ho, wo) = (h / k, w / k);
            let inv = 1.0 / (k * k) as f64;
            accumulate(grads, nodes, a, |s| {
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            s[(ci * h + y) * w + x] += g[(ci * ho + y / k) * wo + x / k] * inv;
                        }
                    }
                }
            });
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    leaf: Vec<bool>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` is unreachable from
    /// the loss, `None` when `v` does not require gradients.
    pub fn get(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        if !v.requires_grad() {
            return None;
        }
        let shape = v.shape();
        match self.grads.get(v.id).and_then(|g| g.as_ref()) {
            Some(g) => Some(Tensor::new(&shape, g.iter().map(|&x| T::lit(x)).collect()).unwrap()),
            None => Some(Tensor::zeros(&shape)),
        }
    }

    /// Same as [`Gradients::get`] without rounding to the storage type.
    pub fn get_f64(&self, v: Var<'_, T>) -> Option<Vec<f64>> {
        if !v.requires_grad() {
            return None;
        }
        let n = v.numel();
        Some(
            self.grads
                .get(v.id)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| vec![0.0; n]),
        )
    }

    /// Number of trainable leaves that received a gradient.
    pub fn leaf_count(&self) -> usize {
        self.leaf
            .iter()
            .zip(&self.grads)
            .filter(|(l, g)| **l && g.is_some())
            .count()
    }

    pub fn shape_of(&self, v: Var<'_, T>) -> &[usize] {
        &self.shapes[v.id]
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'g, Tensor<T>> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Single value of a one-element node.
    pub fn item(&self) -> T {
        self.value().item()
    }

    fn same_graph(&self, other: &Var<'g, T>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars belong to different graphs"
        );
    }

    fn unary(&self, op: Op, f: impl Fn(T) -> T) -> Var<'g, T> {
        let out = self.value().map(f);
        let rg = self.requires_grad();
        self.graph.push(out, op, rg)
    }

    fn binary(
        &self,
        other: Var<'g, T>,
        name: &'static str,
        op: Op,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'g, T>> {
        self.same_graph(&other);
        let out = {
            let a = self.value();
            let b = other.value();
            if a.shape() != b.shape() {
                return Err(mismatch(name, a.shape(), b.shape()));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(a.shape(), data)?
        };
        let rg = self.graph.rg(&[self.id, other.id]);
        Ok(self.graph.push(out, op, rg))
    }

    /// Copy of this value cut off from the gradient flow.
    pub fn detach(&self) -> Var<'g, T> {
        let v = self.value().clone();
        self.graph.constant(v)
    }

    pub fn add(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    /// Element-wise maximum.
    pub fn maximum(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "maximum", Op::Maximum(self.id, other.id), |a, b| {
            if a >= b {
                a
            } else {
                b
            }
        })
    }

    /// `x^a` element-wise with `0^a = 0`.
    pub fn pow(&self, exponent: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(exponent, "pow", Op::Pow(self.id, exponent.id), |x, a| {
            T::lit(pow_fwd(x.as_f64(), a.as_f64()))
        })
    }

    pub fn scale(&self, c: f64) -> Var<'g, T> {
        let ct = T::lit(c);
        self.unary(Op::Scale(self.id, c), |x| x * ct)
    }

    pub fn neg(&self) -> Var<'g, T> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g, T> {
        let ct = T::lit(c);
        self.unary(Op::Shift(self.id), |x| x + ct)
    }

    pub fn abs(&self) -> Var<'g, T> {
        self.unary(Op::Abs(self.id), |x| x.abs())
    }

    pub fn relu(&self) -> Var<'g, T> {
        self.unary(
            Op::Relu(self.id),
            |x| if x > T::zero() { x } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        self.unary(Op::Sigmoid(self.id), |x| T::lit(sigmoid(x.as_f64())))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Var<'g, T> {
        self.unary(Op::Gelu(self.id), |x| T::lit(gelu(x.as_f64())))
    }

    pub fn square(&self) -> Var<'g, T> {
        self.mul(*self).expect("same shape")
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'g, T> {
        let (l, h) = (T::lit(lo), T::lit(hi));
        self.unary(Op::Clamp(self.id, lo, hi), |x| {
            if x < l {
                l
            } else if x > h {
                h
            } else {
                x
            }
        })
    }

    pub fn sum(&self) -> Var<'g, T> {
        let s: f64 = self.value().data().iter().map(|v| v.as_f64()).sum();
        let rg = self.requires_grad();
        self.graph
            .push(Tensor::scalar(T::lit(s)), Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Var<'g, T> {
        let v = self.value();
        let s: f64 = v.data().iter().map(|v| v.as_f64()).sum::<f64>() / v.numel() as f64;
        drop(v);
        let rg = self.requires_grad();
        self.graph
            .push(Tensor::scalar(T::lit(s)), Op::Mean(self.id), rg)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let out = self.value().clone().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.graph.push(out, Op::Reshape(self.id), rg))
    }

    /// `out[i] = self.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, index: Rc<[usize]>, shape: &[usize]) -> Result<Var<'g, T>> {
        let out = {
            let v = self.value();
            let n = v.numel();
            if let Some(&bad) = index.iter().find(|&&i| i >= n) {
                return Err(invalid(
                    "gather",
                    format!("index {bad} out of range for {n} elements"),
                ));
            }
            let data = index.iter().map(|&i| v.data()[i]).collect();
            Tensor::new(shape, data)?
        };
        let rg = self.requires_grad();
        Ok(self.graph.push(out, Op::Gather(self.id, index), rg))
    }

    /// Concatenation along the leading axis.
    pub fn concat(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let graph = first.graph;
        let tail = first.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            first.same_graph(p);
            let v = p.value();
            if v.shape().is_empty() || v.shape()[1..] != tail[..] {
                return Err(mismatch("concat", &first.shape(), v.shape()));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = graph.rg(&ids);
        Ok(graph.push(Tensor::new(&shape, data)?, Op::Concat(ids), rg))
    }

    /// `[n,k] x [k,m] -> [n,m]`
    pub fn matmul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other);
        let out = {
            let a = self.value();
            let b = other.value();
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(mismatch("matmul", sa, sb));
            }
            let r = kernels::matmul(&a.to_f64(), &b.to_f64(), sa[0], sa[1], sb[1]);
            Tensor::new(&[sa[0], sb[1]], r.into_iter().map(T::lit).collect())?
        };
        let rg = self.graph.rg(&[self.id, other.id]);
        Ok(self.graph.push(out, Op::MatMul(self.id, other.id), rg))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Var<'g, T>> {
        let sh = self.shape();
        if sh.len() != 2 {
            return Err(invalid(
                "transpose",
                format!("expected 2-D input, got {sh:?}"),
            ));
        }
        let (n, m) = (sh[0], sh[1]);
        let index: Rc<[usize]> = (0..m)
            .flat_map(|j| (0..n).map(move |i| i * m + j))
            .collect();
        self.gather(index, &[m, n])
    }

    /// `[n,m] + bias[m]` broadcast over rows.
    pub fn add_row_bias(&self, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&bias);
        let out = {
            let a = self.value();
            let b = bias.value();
            if a.shape().len() != 2 || b.numel() != a.shape()[1] {
                return Err(mismatch("add_row_bias", a.shape(), b.shape()));
            }
            let m = b.numel();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + b.data()[i % m])
                .collect();
            Tensor::new(a.shape(), data)?
        };
        let rg = self.graph.rg(&[self.id, bias.id]);
        Ok(self.graph.push(out, Op::AddRowBias(self.id, bias.id), rg))
    }

    /// Row-wise softmax of a 2-D tensor, max-subtracted.
    pub fn softmax_rows(&self) -> Result<Var<'g, T>> {
        let out = {
            let a = self.value();
            if a.shape().len() != 2 {
                return Err(invalid(
                    "softmax_rows",
                    format!("expected 2-D input, got {:?}", a.shape()),
                ));
            }
            if !a.all_finite() {
                return Err(TensorError::NonFinite { op: "softmax_rows" });
            }
            let (n, m) = (a.shape()[0], a.shape()[1]);
            let r = kernels::softmax_rows(&a.to_f64(), n, m);
            Tensor::new(a.shape(), r.into_iter().map(T::lit).collect())?
        };
        let rg = self.requires_grad();
        Ok(self.graph.push(out, Op::Softmax(self.id), rg))
    }

    /// Layer normalization over the last axis of a `[n,d]` tensor.
    pub fn layer_norm(&self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        self.same_graph(&gamma);
        self.same_graph(&beta);
        let out = {
            let x = self.value();
            let (gv, bv) = (gamma.value(), beta.value());
            if x.shape().len() != 2 || gv.numel() != x.shape()[1] || bv.numel() != x.shape()[1] {
                return Err(mismatch("layer_norm", x.shape(), gv.shape()));
            }
            let (n, d) = (x.shape()[0], x.shape()[1]);
            let xf = x.to_f64();
            let stats = kernels::row_stats(&xf, n, d, eps);
            let data = (0..n * d)
                .map(|i| {
                    let (mu, rs) = stats[i / d];
                    T::lit(
                        (xf[i] - mu) * rs * gv.data()[i % d].as_f64() + bv.data()[i % d].as_f64(),
                    )
                })
                .collect();
            Tensor::new(x.shape(), data)?
        };
        let rg = self.graph.rg(&[self.id, gamma.id, beta.id]);
        Ok(self.graph.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
            rg,
        ))
    }

    /// Cross-correlation of a `[C_in,H,W]` input with `[C_out,C_in,kh,kw]`
    /// weights and zero padding.
    pub fn conv2d(
        &self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'g, T>> {
        self.same_graph(&weight);
        let (geom, out) = {
            let x = self.value();
            let w = weight.value();
            let (xs, ws) = (x.shape(), w.shape());
            if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
                return Err(mismatch("conv2d", xs, ws));
            }
            if stride == 0 {
                return Err(invalid("conv2d", "stride must be positive"));
            }
            if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
                return Err(invalid(
                    "conv2d",
                    format!("kernel {}x{} must be odd", ws[2], ws[3]),
                ));
            }
            if xs[1] + 2 * padding < ws[2] || xs[2] + 2 * padding < ws[3] {
                return Err(mismatch("conv2d", xs, ws));
            }
            let bias_vals = match bias {
                Some(b) => {
                    self.same_graph(&b);
                    let bv = b.value();
                    if bv.numel() != ws[0] {
                        return Err(mismatch("conv2d bias", ws, bv.shape()));
                    }
                    Some(bv.to_f64())
                }
                None => None,
            };
            let geom = ConvGeom {
                c_in: xs[0],
                h: xs[1],
                w: xs[2],
                c_out: ws[0],
                kh: ws[2],
                kw: ws[3],
                stride,
                pad: padding,
                h_out: (xs[1] + 2 * padding - ws[2]) / stride + 1,
                w_out: (xs[2] + 2 * padding - ws[3]) / stride + 1,
            };
            let r = kernels::conv2d_forward(&geom, &x.to_f64(), &w.to_f64(), bias_vals.as_deref());
            let out = Tensor::new(
                &[geom.c_out, geom.h_out, geom.w_out],
                r.into_iter().map(T::lit).collect(),
            )?;
            (geom, out)
        };
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        let rg = self.graph.rg(&ids);
        Ok(self.graph.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
            },
            rg,
        ))
    }

    /// Non-overlapping `k x k` average pooling of a `[C,H,W]` tensor.
    pub fn avg_pool(&self, k: usize) -> Result<Var<'g, T>> {
        let out = {
            let v = self.value();
            let sh = v.shape();
            if sh.len() != 3 || k == 0 || !sh[1].is_multiple_of(k) || !sh[2].is_multiple_of(k) {
                return Err(invalid(
                    "avg_pool",
                    format!("{sh:?} is not divisible into {k}x{k} regions"),
                ));
            }
            let (c, h, w) = (sh[0], sh[1], sh[2]);
            let (ho, wo) = (h / k, w / k);
            let mut acc = vec![0.0f64; c * ho * wo];
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        acc[(ci * ho + y / k) * wo + x / k] +=
                            v.data()[(ci * h + y) * w + x].as_f64();
                    }
                }
            }
            let inv = 1.0 / (k * k) as f64;
            Tensor::new(
                &[c, ho, wo],
                acc.into_iter().map(|s| T::lit(s * inv)).collect(),
            )?
        };
        let rg = self.requires_grad();
        Ok(self.graph.push(out, Op::AvgPool(self.id, k), rg))
    }
}
