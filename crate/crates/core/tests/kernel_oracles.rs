//! Convolution, transposed convolution and matmul against direct loop
//! implementations, plus the conv/deconv adjoint identity.

use pbgan::autodiff::Graph;
use pbgan::rng::{rng_stream, Purpose};
use pbgan::Tensor;
use proptest::prelude::*;

fn random(seed: u64, tag: u64, shape: &[usize]) -> Tensor {
    let mut s = rng_stream(seed, Purpose::Test, &[tag]);
    Tensor::from_fn(shape, |_| s.normal()).unwrap()
}

fn fidx(k1: usize, ci: usize, co: usize, i: usize, j: usize, c: usize, o: usize) -> usize {
    ((i * k1 + j) * ci + c) * co + o
}

/// Gather form: every output pixel sums its receptive field.
fn conv_oracle(x: &Tensor, f: &Tensor, b: &[f64], s: usize, p: usize) -> Vec<f64> {
    let (h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k0, k1, co) = (f.shape()[0], f.shape()[1], f.shape()[3]);
    let oh = (h + 2 * p - k0) / s + 1;
    let ow = (w + 2 * p - k1) / s + 1;
    let mut y = vec![0.0; oh * ow * co];
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..co {
                let mut acc = b[o];
                for i in 0..k0 {
                    for j in 0..k1 {
                        let iy = (oy * s + i) as i64 - p as i64;
                        let ix = (ox * s + j) as i64 - p as i64;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                            continue;
                        }
                        for c in 0..ci {
                            acc += x.data()[(iy as usize * w + ix as usize) * ci + c]
                                * f.data()[fidx(k1, ci, co, i, j, c, o)];
                        }
                    }
                }
                y[(oy * ow + ox) * co + o] = acc;
            }
        }
    }
    y
}

/// Scatter form: every input pixel stamps the kernel onto the output grid.
fn deconv_oracle(x: &Tensor, f: &Tensor, b: &[f64], s: usize, p: usize) -> (Vec<usize>, Vec<f64>) {
    let (h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k0, k1, co) = (f.shape()[0], f.shape()[1], f.shape()[3]);
    let oh = (h - 1) * s + k0 - 2 * p;
    let ow = (w - 1) * s + k1 - 2 * p;
    let mut y = vec![0.0; oh * ow * co];
    for (n, v) in y.iter_mut().enumerate() {
        *v = b[n % co];
    }
    for iy in 0..h {
        for ix in 0..w {
            for i in 0..k0 {
                for j in 0..k1 {
                    let oy = (iy * s + i) as i64 - p as i64;
                    let ox = (ix * s + j) as i64 - p as i64;
                    if oy < 0 || ox < 0 || oy >= oh as i64 || ox >= ow as i64 {
                        continue;
                    }
                    for c in 0..ci {
                        for o in 0..co {
                            y[(oy as usize * ow + ox as usize) * co + o] +=
                                x.data()[(iy * w + ix) * ci + c] * f.data()[fidx(k1, ci, co, i, j, c, o)];
                        }
                    }
                }
            }
        }
    }
    (vec![oh, ow, co], y)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Filters with the two channel axes exchanged.
fn swap_channels(f: &Tensor) -> Tensor {
    let [k0, k1, ci, co] = [f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]];
    let mut out = vec![0.0; f.numel()];
    for i in 0..k0 {
        for j in 0..k1 {
            for c in 0..ci {
                for o in 0..co {
                    out[fidx(k1, co, ci, i, j, o, c)] = f.data()[fidx(k1, ci, co, i, j, c, o)];
                }
            }
        }
    }
    Tensor::new(vec![k0, k1, co, ci], out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_loop_oracle(
        out in 1usize..5, k in 1usize..5, s in 1usize..4, p in 0usize..3,
        ci in 1usize..4, co in 1usize..4, seed in any::<u64>()
    ) {
        let h = (out - 1) * s + k;
        prop_assume!(h > 2 * p);
        let h = h - 2 * p;
        let x = random(seed, 0, &[h, h, ci]);
        let f = random(seed, 1, &[k, k, ci, co]);
        let b = random(seed, 2, &[co]);
        let mut g = Graph::new();
        let (xv, fv, bv) = (g.constant(x.clone()), g.constant(f.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, fv, bv, s, p).unwrap();
        let want = conv_oracle(&x, &f, b.data(), s, p);
        prop_assert!(max_diff(g.value(y).data(), &want) <= 1e-12);
    }

    #[test]
    fn deconv_matches_scatter_oracle(
        h in 1usize..5, w in 1usize..5, k in 1usize..5, s in 1usize..4, p in 0usize..2,
        ci in 1usize..4, co in 1usize..4, seed in any::<u64>()
    ) {
        prop_assume!(2 * p < k + (h.min(w) - 1) * s);
        let x = random(seed, 0, &[h, w, ci]);
        let f = random(seed, 1, &[k, k, ci, co]);
        let b = random(seed, 2, &[co]);
        let mut g = Graph::new();
        let (xv, fv, bv) = (g.constant(x.clone()), g.constant(f.clone()), g.constant(b.clone()));
        let y = g.deconv2d(xv, fv, bv, s, p).unwrap();
        let (shape, want) = deconv_oracle(&x, &f, b.data(), s, p);
        prop_assert_eq!(g.value(y).shape(), &shape[..]);
        prop_assert!(max_diff(g.value(y).data(), &want) <= 1e-12);
    }

    #[test]
    fn deconv_is_adjoint_of_conv(
        h in 1usize..6, k in 1usize..5, s in 1usize..4, p in 0usize..2,
        ci in 1usize..4, co in 1usize..4, seed in any::<u64>()
    ) {
        prop_assume!(2 * p < k + (h - 1) * s);
        let x = random(seed, 0, &[h, h, ci]);
        let f = random(seed, 1, &[k, k, ci, co]);
        let oh = (h - 1) * s + k - 2 * p;
        let yv = random(seed, 3, &[oh, oh, co]);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let fnode = g.constant(f.clone());
        let zero_co = g.constant(Tensor::zeros(&[co]).unwrap());
        let up = g.deconv2d(xn, fnode, zero_co, s, p).unwrap();
        let yn = g.constant(yv.clone());
        let ft = g.constant(swap_channels(&f));
        let zero_ci = g.constant(Tensor::zeros(&[ci]).unwrap());
        let down = g.conv2d(yn, ft, zero_ci, s, p).unwrap();
        let lhs = dot(g.value(up).data(), yv.data());
        let rhs = dot(x.data(), g.value(down).data());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn matmul_matches_loop_oracle(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let a = random(seed, 0, &[m, k]);
        let b = random(seed, 1, &[k, n]);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = g.matmul(av, bv).unwrap();
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    want[i * n + j] += a.data()[i * k + t] * b.data()[t * n + j];
                }
            }
        }
        prop_assert!(max_diff(g.value(y).data(), &want) <= 1e-12);
    }

    #[test]
    fn concat_then_complementary_slices_is_identity(
        h in 1usize..4, w in 1usize..4, c1 in 1usize..4, c2 in 1usize..4, seed in any::<u64>()
    ) {
        let a = random(seed, 0, &[h, w, c1]);
        let b = random(seed, 1, &[h, w, c2]);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let cat = g.concat_last_axis(&[av, bv]).unwrap();
        let a2 = g.slice_last_axis(cat, 0, c1).unwrap();
        let b2 = g.slice_last_axis(cat, c1, c2).unwrap();
        prop_assert!(g.value(a2).bit_eq(&a));
        prop_assert!(g.value(b2).bit_eq(&b));
    }
}

#[test]
fn backward_twice_is_bitwise_identical() {
    let x = random(4, 0, &[8, 8, 3]);
    let f = random(4, 1, &[4, 4, 3, 5]);
    let b = random(4, 2, &[5]);
    let mut g = Graph::new();
    let (xv, fv, bv) = (g.param(x), g.param(f), g.param(b));
    let y = g.conv2d(xv, fv, bv, 2, 1).unwrap();
    let y = g.instance_norm(y, 1e-5).unwrap();
    let y = g.tanh(y).unwrap();
    let l = g.sum(y).unwrap();
    let g1 = g.backward(l).unwrap();
    let g2 = g.backward(l).unwrap();
    for v in [xv, fv, bv] {
        assert!(g1.tensor(v).bit_eq(&g2.tensor(v)));
    }
}
