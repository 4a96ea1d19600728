//! Central finite-difference checks of every differentiable graph operation.
//!
//! Each check reduces the op's output to a scalar through a fixed random
//! weighting, so every output element contributes. The error for one
//! parameter is `|analytic - numeric|₂ / max(|analytic|₂, |numeric|₂)`; when
//! both norms are below `ZERO_FLOOR` (a gradient that is identically zero,
//! such as a bias feeding instance norm) the absolute difference is used.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::INSTANCE_NORM_EPS;
use crate::piggyback::compose_in_graph;
use crate::rng::{rng_stream, Purpose, Stream};
use crate::tensor::Tensor;
use crate::trainer::{d_loss_graph, g_loss_graph};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
pub const DEFAULT_INSTANCES: usize = 20;
pub const ZERO_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub op: &'static str,
    pub instances: usize,
    pub worst: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst <= TOLERANCE
    }
}

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

fn forward(inputs: &[Tensor], weights: &Tensor, build: &Build<'_>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = build(&mut g, &vars)?;
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    let s = g.sum(p)?;
    Ok(g.value(s).data()[0])
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(n).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut n.iter().copied()));
    if scale < ZERO_FLOOR {
        diff
    } else {
        diff / scale
    }
}

/// Worst relative error over `inputs` of `build`'s output, all of which are
/// treated as trainable.
pub fn check(inputs: &[Tensor], weight_seed: &mut Stream, build: &Build<'_>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&mut g, &vars)?;
    let weights = Tensor::from_fn(g.value(y).shape(), |_| weight_seed.uniform_range(-1.0, 1.0))?;
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    let s = g.sum(p)?;
    let grads = g.backward(s)?;

    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.tensor(*v).to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].numel() {
            let mut probe = inputs.to_vec();
            let mut shifted = |delta: f64| -> Result<f64> {
                let mut d = inputs[i].to_vec();
                d[j] += delta;
                probe[i] = Tensor::new(inputs[i].shape().to_vec(), d)?;
                forward(&probe, &weights, build)
            };
            let hi = shifted(STEP)?;
            let lo = shifted(-STEP)?;
            numeric.push((hi - lo) / (2.0 * STEP));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

fn normal(s: &mut Stream, shape: &[usize]) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| s.normal())
}

/// Values bounded away from zero so a ±`STEP` probe never crosses a kink.
fn away_from_zero(s: &mut Stream, shape: &[usize]) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| {
        let m = s.uniform_range(0.05, 1.0);
        if s.uniform() < 0.5 {
            -m
        } else {
            m
        }
    })
}

struct Case {
    op: &'static str,
    run: fn(&mut Stream, &mut Stream) -> Result<f64>,
}

fn conv_case(s: &mut Stream, w: &mut Stream) -> Result<f64> {
    let stride = 1 + s.int_inclusive(0, 1) as usize;
    let k = 2 + s.int_inclusive(0, 1) as usize;
    let (c_in, c_out) = (1 + s.int_inclusive(0, 2) as usize, 1 + s.int_inclusive(0, 2) as usize);
    // Pick an input extent that makes the output integral.
    let pad = s.int_inclusive(0, 1) as usize;
    let out = 2 + s.int_inclusive(0, 2) as usize;
    let h = (out - 1) * stride + k - 2 * pad;
    let inputs = [normal(s, &[h, h, c_in])?, normal(s, &[k, k, c_in, c_out])?, normal(s, &[c_out])?];
    check(&inputs, w, &move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad))
}

fn deconv_case(s: &mut Stream, w: &mut Stream) -> Result<f64> {
    let stride = 1 + s.int_inclusive(0, 1) as usize;
    let k = 2 + s.int_inclusive(0, 2) as usize;
    let pad = s.int_inclusive(0, 1).min((k - 1) as u64) as usize;
    let (c_in, c_out) = (1 + s.int_inclusive(0, 2) as usize, 1 + s.int_inclusive(0, 2) as usize);
    let h = 2 + s.int_inclusive(0, 2) as usize;
    let inputs = [normal(s, &[h, h, c_in])?, normal(s, &[k, k, c_in, c_out])?, normal(s, &[c_out])?];
    check(&inputs, w, &move |g, v| g.deconv2d(v[0], v[1], v[2], stride, pad))
}

fn matmul_case(s: &mut Stream, w: &mut Stream) -> Result<f64> {
    let (m, k, n) = (
        1 + s.int_inclusive(0, 4) as usize,
        1 + s.int_inclusive(0, 4) as usize,
        1 + s.int_inclusive(0, 4) as usize,
    );
    check(&[normal(s, &[m, k])?, normal(s, &[k, n])?], w, &|g, v| g.matmul(v[0], v[1]))
}

fn shape3(s: &mut Stream) -> Vec<usize> {
    vec![1 + s.int_inclusive(0, 3) as usize, 1 + s.int_inclusive(0, 3) as usize, 1 + s.int_inclusive(0, 2) as usize]
}

fn relu_case(s: &mut Stream, w: &mut Stream) -> Result<f64> {
    let sh = shape3(s);
    check(&[away_from_zero(s, &sh)?], w, &|g, v| g.relu(v[0]))
}

fn leaky_case(s: &mut Stream, w: &mut Stream) -> Result<f64> {
    let sh = shape3(s);
    check(&[away_from_zero(s, &sh)?], w, &|g, v| g.leaky_relu(v[0]))
}

fn tanh_case(s: &mut Stream, w: &mut Stream) -> Result<f64> {
    let sh = shape3(s);
    check(&[normal(s, &sh)?], w, &|g, v| g.tanh(v[0]))
}

fn abs_case(s: &mut Stream, w: &mut Stream) -> Result<f64> {
    let sh = shape3(s);
    check(&[away_from_zero(s, &sh)?], w, &|g, v| g.abs(v[0]))
}

fn add_case(s: &mut Stream, w: &mut Stream) -> Result<f64> {
    let sh = shape3(s);
    check(&[normal(s, &sh)?, normal(s, &sh)?], w, &|g, v| g.add(v[0], v[1]))
}

fn sub_case(s: &mut Stream, w: &mut Stream) -> Result<f64> {
    let sh = shape3(s);
    check(&[normal(s, &sh)?, normal(s, &sh)?], w, &|g, v| g.sub(v[0], v[1]))
}

fn mul_case(s: &mut Stream, w: &mut Stream) -> Result<f64> {
    let sh = shape3(s);
    check(&[normal(s, &sh)?, normal(s, &sh)?], w, &|g, v| g.mul(v[0], v[1]))
}

fn affine_case(s: &mut Stream, w: &mut Stream) -> Result<f64> {
    let sh = shape3(s);
    let (a, b) = (s.uniform_range(-2.0, 2.0), s.uniform_range(-2.0, 2.0));
    check(&[normal(s, &sh)?], w, &move |g, v| g.affine(v[0], a, b))
}

fn concat_case(s: &mut Stream, w: &mut Stream) -> Result<f64> {
    let mut a = shape3(s);
    let mut b = a.clone();
    a[2] = 1 + s.int_inclusive(0, 2) as usize;
    b[2] = 1 + s.int_inclusive(0, 2) as usize;
    check(&[normal(s, &a)?, normal(s, &b)?], w, &|g, v| g.concat_last_axis(&[v[0], v[1]]))
}

fn slice_case(s: &mut Stream, w: &mut Stream) -> Result<f64> {
    let mut sh = shape3(s);
    sh[2] = 2 + s.int_inclusive(0, 3) as usize;
    let start = s.int_inclusive(0, sh[2] as u64 - 1) as usize;
    let len = 1 + s.int_inclusive(0, (sh[2] - start - 1) as u64) as usize;
    check(&[normal(s, &sh)?], w, &move |g, v| g.slice_last_axis(v[0], start, len))
}

fn reshape_case(s: &mut Stream, w: &mut Stream) -> Result<f64> {
    let sh = shape3(s);
    let n: usize = sh.iter().product();
    check(&[normal(s, &sh)?], w, &move |g, v| g.reshape(v[0], &[n]))
}

fn instance_norm_case(s: &mut Stream, w: &mut Stream) -> Result<f64> {
    let sh = vec![2 + s.int_inclusive(0, 2) as usize, 2 + s.int_inclusive(0, 2) as usize, 1 + s.int_inclusive(0, 2) as usize];
    check(&[normal(s, &sh)?], w, &|g, v| g.instance_norm(v[0], INSTANCE_NORM_EPS))
}

fn sum_case(s: &mut Stream, w: &mut Stream) -> Result<f64> {
    let sh = shape3(s);
    check(&[normal(s, &sh)?], w, &|g, v| g.sum(v[0]))
}

fn mean_case(s: &mut Stream, w: &mut Stream) -> Result<f64> {
    let sh = shape3(s);
    check(&[normal(s, &sh)?], w, &|g, v| g.mean(v[0]))
}

/// Composed filters, differentiated with respect to the unconstrained block
/// and the mixing matrix. The bank enters as a constant and must receive no
/// gradient.
fn compose_case(s: &mut Stream, w: &mut Stream) -> Result<f64> {
    let (kw, kh, c_in) = (1 + s.int_inclusive(0, 2) as usize, 1 + s.int_inclusive(0, 2) as usize, 1 + s.int_inclusive(0, 2) as usize);
    let (width, n_u, n_p) = (1 + s.int_inclusive(0, 5) as usize, 1 + s.int_inclusive(0, 2) as usize, 1 + s.int_inclusive(0, 3) as usize);
    let bank = normal(s, &[kw * kh * c_in, width])?;

    let mut g = Graph::new();
    let b = g.constant(bank.clone());
    let u = g.param(normal(s, &[kw, kh, c_in, n_u])?);
    let m = g.param(normal(s, &[width, n_p])?);
    let out = compose_in_graph(&mut g, (kw, kh, c_in), Some(b), Some(u), Some(m))?;
    let s_out = g.sum(out)?;
    if g.backward(s_out)?.get(b).is_some() {
        return Err(Error::FreezeViolation("gradient reached a bank block".into()));
    }

    let inputs = [g.value(u).clone(), g.value(m).clone()];
    check(&inputs, w, &move |g, v| {
        let b = g.constant(bank.clone());
        compose_in_graph(g, (kw, kh, c_in), Some(b), Some(v[0]), Some(v[1]))
    })
}

fn d_loss_case(s: &mut Stream, w: &mut Stream) -> Result<f64> {
    let sh = shape3(s);
    check(&[normal(s, &sh)?, normal(s, &sh)?], w, &|g, v| d_loss_graph(g, v[0], v[1]))
}

fn g_loss_case(s: &mut Stream, w: &mut Stream) -> Result<f64> {
    let sh = shape3(s);
    let img = shape3(s);
    let fake = normal(s, &img)?;
    // Keep |fake - target| away from the kink of the L1 term.
    let gap = away_from_zero(s, &img)?;
    let target = Tensor::new(img.clone(), fake.data().iter().zip(gap.data()).map(|(f, d)| f + d).collect())?;
    let l1_weight = s.uniform_range(0.0, 10.0);
    check(&[normal(s, &sh)?, fake, target], w, &move |g, v| g_loss_graph(g, v[0], v[1], v[2], l1_weight))
}

/// Conv, instance norm and leaky relu chained as in an encoder block.
fn encoder_block_case(s: &mut Stream, w: &mut Stream) -> Result<f64> {
    let c_in = 1 + s.int_inclusive(0, 1) as usize;
    let c_out = 1 + s.int_inclusive(0, 2) as usize;
    let inputs = [normal(s, &[6, 6, c_in])?, normal(s, &[4, 4, c_in, c_out])?, normal(s, &[c_out])?];
    check(&inputs, w, &|g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
        let y = g.instance_norm(y, INSTANCE_NORM_EPS)?;
        g.tanh(y)
    })
}

const CASES: &[Case] = &[
    Case { op: "conv2d", run: conv_case },
    Case { op: "deconv2d", run: deconv_case },
    Case { op: "matmul", run: matmul_case },
    Case { op: "relu", run: relu_case },
    Case { op: "leaky_relu", run: leaky_case },
    Case { op: "tanh", run: tanh_case },
    Case { op: "abs", run: abs_case },
    Case { op: "add", run: add_case },
    Case { op: "sub", run: sub_case },
    Case { op: "mul", run: mul_case },
    Case { op: "affine", run: affine_case },
    Case { op: "concat", run: concat_case },
    Case { op: "slice", run: slice_case },
    Case { op: "reshape", run: reshape_case },
    Case { op: "instance_norm", run: instance_norm_case },
    Case { op: "sum", run: sum_case },
    Case { op: "mean", run: mean_case },
    Case { op: "compose_filters", run: compose_case },
    Case { op: "d_loss", run: d_loss_case },
    Case { op: "g_loss", run: g_loss_case },
    Case { op: "encoder_block", run: encoder_block_case },
];

/// Runs every case on `instances` random draws.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    CASES
        .iter()
        .enumerate()
        .map(|(ci, case)| {
            let mut worst = 0.0f64;
            for i in 0..instances {
                let mut s = rng_stream(seed, Purpose::Test, &[ci as u64, i as u64, 0]);
                let mut w = rng_stream(seed, Purpose::Test, &[ci as u64, i as u64, 1]);
                worst = worst.max((case.run)(&mut s, &mut w)?);
            }
            Ok(CheckResult { op: case.op, instances, worst })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let a = [1.0, 2.0, 3.0];
        let n = [1.0, 2.0, 3.3];
        assert!(rel_err(&a, &n) > TOLERANCE);
        assert_eq!(rel_err(&a, &a), 0.0);
    }

    #[test]
    fn quick_suite_passes() {
        for r in run_suite(1, 2).unwrap() {
            assert!(r.passed(), "{} worst {}", r.op, r.worst);
        }
    }
}
