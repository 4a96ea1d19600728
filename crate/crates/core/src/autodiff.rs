//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order. [`Graph::backward`] walks the tape once in reverse and
//! accumulates gradients additively, so fan-out is handled without special
//! cases and results are deterministic for a given tape.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    /// Negative-side slope 0.2.
    LeakyRelu,
    Tanh,
    Abs,
}

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, f: Var, b: Var, geom: ConvGeom },
    Deconv { x: Var, f: Var, b: Var, geom: ConvGeom },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Unary { x: Var, kind: Unary },
    Binary { a: Var, b: Var, kind: Binary },
    Concat { parts: Vec<Var> },
    SliceLast { x: Var, start: usize },
    Reshape { x: Var },
    InstanceNorm { x: Var, inv_std: Vec<f64> },
    Sum { x: Var },
    Mean { x: Var },
    Affine { x: Var, scale: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not require gradients or the
    /// loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// Gradient for `v` as a tensor, zero-filled when no gradient reached it.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradients are finite"),
            None => Tensor::zeros(shape).expect("node shapes are valid"),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn finish(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, what: &str) -> Result<Var> {
        let value = Tensor::new(shape, data).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{what}: {m}")),
            other => other,
        })?;
        let deps = op_inputs(&op);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, op, rg))
    }

    /// Cross-correlation of an `[h, w, c_in]` image with `[k0, k1, c_in, c_out]`
    /// filters plus a per-channel bias.
    pub fn conv2d(&mut self, x: Var, f: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::conv(
            self.value(x).shape(),
            self.value(f).shape(),
            self.value(b).shape(),
            stride,
            pad,
        )?;
        let y = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(f).data(),
            self.value(b).data(),
        );
        self.finish(vec![geom.oh, geom.ow, geom.c_out], y, Op::Conv { x, f, b, geom }, "conv2d")
    }

    /// Transposed convolution. Filters are `[k0, k1, c_in, c_out]` where `c_in`
    /// matches the input image and `c_out` is the produced channel count.
    pub fn deconv2d(&mut self, x: Var, f: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::deconv(
            self.value(x).shape(),
            self.value(f).shape(),
            self.value(b).shape(),
            stride,
            pad,
        )?;
        let y = kernels::deconv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(f).data(),
            self.value(b).data(),
        );
        self.finish(vec![geom.oh, geom.ow, geom.c_out], y, Op::Deconv { x, f, b, geom }, "deconv2d")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let y = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.finish(vec![m, n], y, Op::MatMul { a, b, m, k, n }, "matmul")
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let xs = self.value(x);
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |v| if v > 0.0 { v } else { 0.0 },
            Unary::LeakyRelu => |v| if v > 0.0 { v } else { LEAKY_SLOPE * v },
            Unary::Tanh => f64::tanh,
            Unary::Abs => f64::abs,
        };
        let y = xs.data().iter().map(|&v| f(v)).collect();
        let shape = xs.shape().to_vec();
        self.finish(shape, y, Op::Unary { x, kind }, "unary")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::LeakyRelu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!("{kind:?} of {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
        };
        let y = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        self.finish(shape, y, Op::Binary { a, b, kind }, "binary")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let xs = self.value(x);
        let y = xs.data().iter().map(|&v| scale * v + shift).collect();
        let shape = xs.shape().to_vec();
        self.finish(shape, y, Op::Affine { x, scale }, "affine")
    }

    /// Concatenates along the last axis. All other extents must agree.
    pub fn concat_last_axis(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of an empty list"))?;
        let lead = {
            let s = self.value(*first).shape();
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(format!("cannot concat {s:?} with leading extents {lead:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut y = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &wd) in parts.iter().zip(&widths) {
                y.extend_from_slice(&self.value(p).data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.finish(shape, y, Op::Concat { parts: parts.to_vec() }, "concat")
    }

    /// Takes `len` entries of the last axis starting at `start`.
    pub fn slice_last_axis(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x);
        let width = xs.last_extent();
        if len == 0 || start + len > width {
            return Err(Error::shape(format!("slice {start}..{} of width {width}", start + len)));
        }
        let y: Vec<f64> = xs
            .data()
            .chunks_exact(width)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        self.finish(shape, y, Op::SliceLast { x, start }, "slice")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Per-channel normalization over the spatial axes of an `[h, w, c]` image,
    /// without learned affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xs = self.value(x);
        let s = xs.shape();
        if s.len() != 3 {
            return Err(Error::shape(format!("instance_norm needs [h, w, c], got {s:?}")));
        }
        let c = s[2];
        let n = (s[0] * s[1]) as f64;
        let mut mean = vec![0.0; c];
        for px in xs.data().chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(px) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for px in xs.data().chunks_exact(c) {
            for ((vv, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
                *vv += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / n + eps).sqrt()).collect();
        let mut y = Vec::with_capacity(xs.numel());
        for px in xs.data().chunks_exact(c) {
            for ch in 0..c {
                y.push((px[ch] - mean[ch]) * inv_std[ch]);
            }
        }
        let shape = s.to_vec();
        self.finish(shape, y, Op::InstanceNorm { x, inv_std }, "instance_norm")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.finish(vec![1], vec![total], Op::Sum { x }, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        let m = xs.data().iter().sum::<f64>() / xs.numel() as f64;
        self.finish(vec![1], vec![m], Op::Mean { x }, "mean")
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.value(loss);
        if ls.numel() != 1 {
            return Err(Error::NonScalarLoss(ls.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes[..=loss.0].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, f, b, geom } => {
                if rg(*x) {
                    accumulate(grads, *x, kernels::conv2d_backward_input(geom, g, val(*f)));
                }
                if rg(*f) {
                    accumulate(grads, *f, kernels::conv2d_backward_filter(geom, g, val(*x)));
                }
                if rg(*b) {
                    accumulate(grads, *b, kernels::bias_backward(g, geom.c_out));
                }
            }
            Op::Deconv { x, f, b, geom } => {
                if rg(*x) {
                    accumulate(grads, *x, kernels::deconv2d_backward_input(geom, g, val(*f)));
                }
                if rg(*f) {
                    accumulate(grads, *f, kernels::deconv2d_backward_filter(geom, g, val(*x)));
                }
                if rg(*b) {
                    accumulate(grads, *b, kernels::bias_backward(g, geom.c_out));
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                if rg(*a) {
                    accumulate(grads, *a, kernels::matmul_grad_a(g, val(*b), *m, *k, *n));
                }
                if rg(*b) {
                    accumulate(grads, *b, kernels::matmul_grad_b(val(*a), g, *m, *k, *n));
                }
            }
            Op::Unary { x, kind } => {
                let xv = val(*x);
                let out = node.value.data();
                let gx = match kind {
                    Unary::Relu => zip_map(g, xv, |g, x| if x > 0.0 { g } else { 0.0 }),
                    Unary::LeakyRelu => {
                        zip_map(g, xv, |g, x| if x > 0.0 { g } else { LEAKY_SLOPE * g })
                    }
                    Unary::Tanh => zip_map(g, out, |g, y| g * (1.0 - y * y)),
                    Unary::Abs => zip_map(g, xv, |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }),
                };
                accumulate(grads, *x, gx);
            }
            Op::Binary { a, b, kind } => match kind {
                Binary::Add => {
                    if rg(*a) {
                        accumulate(grads, *a, g.to_vec());
                    }
                    if rg(*b) {
                        accumulate(grads, *b, g.to_vec());
                    }
                }
                Binary::Sub => {
                    if rg(*a) {
                        accumulate(grads, *a, g.to_vec());
                    }
                    if rg(*b) {
                        accumulate(grads, *b, g.iter().map(|v| -v).collect());
                    }
                }
                Binary::Mul => {
                    if rg(*a) {
                        accumulate(grads, *a, zip_map(g, val(*b), |g, y| g * y));
                    }
                    if rg(*b) {
                        accumulate(grads, *b, zip_map(g, val(*a), |g, x| g * x));
                    }
                }
            },
            Op::Concat { parts } => {
                let total = node.value.last_extent();
                let mut offset = 0;
                for &p in parts {
                    let wd = self.nodes[p.0].value.last_extent();
                    if rg(p) {
                        let gp = g
                            .chunks_exact(total)
                            .flat_map(|row| row[offset..offset + wd].iter().copied())
                            .collect();
                        accumulate(grads, p, gp);
                    }
                    offset += wd;
                }
            }
            Op::SliceLast { x, start } => {
                let width = self.nodes[x.0].value.last_extent();
                let len = node.value.last_extent();
                let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                for (row, grow) in gx.chunks_exact_mut(width).zip(g.chunks_exact(len)) {
                    row[*start..start + len].copy_from_slice(grow);
                }
                accumulate(grads, *x, gx);
            }
            Op::Reshape { x } => accumulate(grads, *x, g.to_vec()),
            Op::InstanceNorm { x, inv_std } => {
                let c = inv_std.len();
                let y = node.value.data();
                let n = (y.len() / c) as f64;
                let mut mean_g = vec![0.0; c];
                let mut mean_gy = vec![0.0; c];
                for (gp, yp) in g.chunks_exact(c).zip(y.chunks_exact(c)) {
                    for ch in 0..c {
                        mean_g[ch] += gp[ch];
                        mean_gy[ch] += gp[ch] * yp[ch];
                    }
                }
                mean_g.iter_mut().chain(mean_gy.iter_mut()).for_each(|v| *v /= n);
                let mut gx = Vec::with_capacity(y.len());
                for (gp, yp) in g.chunks_exact(c).zip(y.chunks_exact(c)) {
                    for ch in 0..c {
                        gx.push(inv_std[ch] * (gp[ch] - mean_g[ch] - yp[ch] * mean_gy[ch]));
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Sum { x } => {
                let n = self.nodes[x.0].value.numel();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].value.numel();
                accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Affine { x, scale } => {
                accumulate(grads, *x, g.iter().map(|v| v * scale).collect());
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Conv { x, f, b, .. } | Op::Deconv { x, f, b, .. } => vec![*x, *f, *b],
        Op::MatMul { a, b, .. } | Op::Binary { a, b, .. } => vec![*a, *b],
        Op::Concat { parts } => parts.clone(),
        Op::Unary { x, .. }
        | Op::SliceLast { x, .. }
        | Op::Reshape { x }
        | Op::InstanceNorm { x, .. }
        | Op::Sum { x }
        | Op::Mean { x }
        | Op::Affine { x, .. } => vec![*x],
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}
