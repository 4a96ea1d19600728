//! Raw slice kernels behind the differentiable ops.
//!
//! Images are `[h, w, c]`, filters are `[k0, k1, c_in, c_out]` with the output
//! channel axis last for both conv and deconv. Filter axis 0 pairs with image
//! axis 0. Accumulation order is fixed so results are bitwise reproducible.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub k0: usize,
    pub k1: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

fn conv_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        return Err(Error::NonIntegralExtent(format!(
            "input extent {n} with pad {pad} is smaller than kernel {k}"
        )));
    }
    if !(padded - k).is_multiple_of(stride) {
        return Err(Error::NonIntegralExtent(format!(
            "({n} + 2*{pad} - {k}) / {stride} is not an integer"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn deconv_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let full = (n - 1) * stride + k;
    if full <= 2 * pad {
        return Err(Error::NonIntegralExtent(format!(
            "({n} - 1)*{stride} - 2*{pad} + {k} is not positive"
        )));
    }
    Ok(full - 2 * pad)
}

impl ConvGeom {
    fn validate(x: &[usize], f: &[usize], bias: &[usize], stride: usize) -> Result<[usize; 7]> {
        if x.len() != 3 || f.len() != 4 {
            return Err(Error::shape(format!("conv input {x:?} / filters {f:?} need rank 3 / 4")));
        }
        if x[2] != f[2] {
            return Err(Error::shape(format!(
                "input has {} channels but filters expect {}",
                x[2], f[2]
            )));
        }
        if bias != [f[3]] {
            return Err(Error::shape(format!("bias {bias:?} does not match {} output channels", f[3])));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".into()));
        }
        Ok([x[0], x[1], x[2], f[0], f[1], f[3], stride])
    }

    pub fn conv(x: &[usize], f: &[usize], bias: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [h, w, c_in, k0, k1, c_out, stride] = Self::validate(x, f, bias, stride)?;
        let oh = conv_extent(h, k0, stride, pad)?;
        let ow = conv_extent(w, k1, stride, pad)?;
        Ok(Self { h, w, c_in, k0, k1, c_out, stride, pad, oh, ow })
    }

    pub fn deconv(x: &[usize], f: &[usize], bias: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [h, w, c_in, k0, k1, c_out, stride] = Self::validate(x, f, bias, stride)?;
        let oh = deconv_extent(h, k0, stride, pad)?;
        let ow = deconv_extent(w, k1, stride, pad)?;
        Ok(Self { h, w, c_in, k0, k1, c_out, stride, pad, oh, ow })
    }

    /// Maps a kernel tap to the strided grid: `base * stride + tap - pad`.
    #[inline]
    fn tap(base: usize, tap: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (base * stride + tap).checked_sub(pad)?;
        (pos < limit).then_some(pos)
    }
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], f: &[f64], bias: &[f64]) -> Vec<f64> {
    let (ci, co) = (g.c_in, g.c_out);
    let mut y = vec![0.0; g.oh * g.ow * co];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let out = &mut y[(oy * g.ow + ox) * co..][..co];
            out.copy_from_slice(bias);
            for i in 0..g.k0 {
                let Some(iy) = ConvGeom::tap(oy, i, g.stride, g.pad, g.h) else { continue };
                for j in 0..g.k1 {
                    let Some(ix) = ConvGeom::tap(ox, j, g.stride, g.pad, g.w) else { continue };
                    let xin = &x[(iy * g.w + ix) * ci..][..ci];
                    let fblk = &f[(i * g.k1 + j) * ci * co..][..ci * co];
                    for (c, &a) in xin.iter().enumerate() {
                        for (o, &fv) in out.iter_mut().zip(&fblk[c * co..(c + 1) * co]) {
                            *o += a * fv;
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn conv2d_backward_input(g: &ConvGeom, gy: &[f64], f: &[f64]) -> Vec<f64> {
    let (ci, co) = (g.c_in, g.c_out);
    let mut gx = vec![0.0; g.h * g.w * ci];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let gout = &gy[(oy * g.ow + ox) * co..][..co];
            for i in 0..g.k0 {
                let Some(iy) = ConvGeom::tap(oy, i, g.stride, g.pad, g.h) else { continue };
                for j in 0..g.k1 {
                    let Some(ix) = ConvGeom::tap(ox, j, g.stride, g.pad, g.w) else { continue };
                    let gin = &mut gx[(iy * g.w + ix) * ci..][..ci];
                    let fblk = &f[(i * g.k1 + j) * ci * co..][..ci * co];
                    for (c, gv) in gin.iter_mut().enumerate() {
                        *gv += dot(gout, &fblk[c * co..(c + 1) * co]);
                    }
                }
            }
        }
    }
    gx
}

pub fn conv2d_backward_filter(g: &ConvGeom, gy: &[f64], x: &[f64]) -> Vec<f64> {
    let (ci, co) = (g.c_in, g.c_out);
    let mut gf = vec![0.0; g.k0 * g.k1 * ci * co];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let gout = &gy[(oy * g.ow + ox) * co..][..co];
            for i in 0..g.k0 {
                let Some(iy) = ConvGeom::tap(oy, i, g.stride, g.pad, g.h) else { continue };
                for j in 0..g.k1 {
                    let Some(ix) = ConvGeom::tap(ox, j, g.stride, g.pad, g.w) else { continue };
                    let xin = &x[(iy * g.w + ix) * ci..][..ci];
                    let gblk = &mut gf[(i * g.k1 + j) * ci * co..][..ci * co];
                    for (c, &a) in xin.iter().enumerate() {
                        axpy(a, gout, &mut gblk[c * co..(c + 1) * co]);
                    }
                }
            }
        }
    }
    gf
}

/// Sums the output gradient over spatial positions, one value per channel.
pub fn bias_backward(gy: &[f64], channels: usize) -> Vec<f64> {
    let mut gb = vec![0.0; channels];
    for px in gy.chunks_exact(channels) {
        for (b, &v) in gb.iter_mut().zip(px) {
            *b += v;
        }
    }
    gb
}

pub fn deconv2d_forward(g: &ConvGeom, x: &[f64], f: &[f64], bias: &[f64]) -> Vec<f64> {
    let (ci, co) = (g.c_in, g.c_out);
    let mut y = Vec::with_capacity(g.oh * g.ow * co);
    for _ in 0..g.oh * g.ow {
        y.extend_from_slice(bias);
    }
    for iy in 0..g.h {
        for ix in 0..g.w {
            let xin = &x[(iy * g.w + ix) * ci..][..ci];
            for i in 0..g.k0 {
                let Some(oy) = ConvGeom::tap(iy, i, g.stride, g.pad, g.oh) else { continue };
                for j in 0..g.k1 {
                    let Some(ox) = ConvGeom::tap(ix, j, g.stride, g.pad, g.ow) else { continue };
                    let out = &mut y[(oy * g.ow + ox) * co..][..co];
                    let fblk = &f[(i * g.k1 + j) * ci * co..][..ci * co];
                    for (c, &a) in xin.iter().enumerate() {
                        axpy(a, &fblk[c * co..(c + 1) * co], out);
                    }
                }
            }
        }
    }
    y
}

pub fn deconv2d_backward_input(g: &ConvGeom, gy: &[f64], f: &[f64]) -> Vec<f64> {
    let (ci, co) = (g.c_in, g.c_out);
    let mut gx = vec![0.0; g.h * g.w * ci];
    for iy in 0..g.h {
        for ix in 0..g.w {
            let gin = &mut gx[(iy * g.w + ix) * ci..][..ci];
            for i in 0..g.k0 {
                let Some(oy) = ConvGeom::tap(iy, i, g.stride, g.pad, g.oh) else { continue };
                for j in 0..g.k1 {
                    let Some(ox) = ConvGeom::tap(ix, j, g.stride, g.pad, g.ow) else { continue };
                    let gout = &gy[(oy * g.ow + ox) * co..][..co];
                    let fblk = &f[(i * g.k1 + j) * ci * co..][..ci * co];
                    for (c, gv) in gin.iter_mut().enumerate() {
                        *gv += dot(gout, &fblk[c * co..(c + 1) * co]);
                    }
                }
            }
        }
    }
    gx
}

pub fn deconv2d_backward_filter(g: &ConvGeom, gy: &[f64], x: &[f64]) -> Vec<f64> {
    let (ci, co) = (g.c_in, g.c_out);
    let mut gf = vec![0.0; g.k0 * g.k1 * ci * co];
    for iy in 0..g.h {
        for ix in 0..g.w {
            let xin = &x[(iy * g.w + ix) * ci..][..ci];
            for i in 0..g.k0 {
                let Some(oy) = ConvGeom::tap(iy, i, g.stride, g.pad, g.oh) else { continue };
                for j in 0..g.k1 {
                    let Some(ox) = ConvGeom::tap(ix, j, g.stride, g.pad, g.ow) else { continue };
                    let gout = &gy[(oy * g.ow + ox) * co..][..co];
                    let gblk = &mut gf[(i * g.k1 + j) * ci * co..][..ci * co];
                    for (c, &a) in xin.iter().enumerate() {
                        axpy(a, gout, &mut gblk[c * co..(c + 1) * co]);
                    }
                }
            }
        }
    }
    gf
}

/// `a[m,k] @ b[k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (row, arow) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (p, &av) in arow.iter().enumerate() {
            axpy(av, &b[p * n..(p + 1) * n], row);
        }
    }
    out
}

/// `g[m,n] @ b[k,n]^T`.
pub fn matmul_grad_a(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for (orow, grow) in out.chunks_exact_mut(k).zip(g.chunks_exact(n)) {
        for (p, o) in orow.iter_mut().enumerate() {
            *o = dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// `a[m,k]^T @ g[m,n]`.
pub fn matmul_grad_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], grow, &mut out[p * n..(p + 1) * n]);
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}
