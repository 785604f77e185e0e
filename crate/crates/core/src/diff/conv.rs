//! Direct 3D convolution kernels and their gradients.
//!
//! Layouts: activations `[N, C, D, H, W]`, conv weights `[Cout, Cin, k, k, k]`,
//! transpose-conv weights `[Cin, Cout, k, k, k]`. Accumulation order is fixed
//! by the loop structure, so results are bit-deterministic under any rayon
//! thread count. Inner loops run over contiguous rows.

use rayon::prelude::*;

use super::tensor::{Scalar, Tensor};
use super::DiffError;

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_spatial: [usize; 3],
    pub out_spatial: [usize; 3],
}

pub fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims, DiffError> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 5 || ws.len() != 5 {
        return Err(DiffError::Shape {
            op: "conv3d",
            detail: format!("want 5-d input/weight, got {xs:?} and {ws:?}"),
        });
    }
    if ws[2] != ws[3] || ws[2] != ws[4] {
        return Err(DiffError::Shape { op: "conv3d", detail: format!("kernel must be cubic, got {ws:?}") });
    }
    if xs[1] != ws[1] {
        return Err(DiffError::Shape {
            op: "conv3d",
            detail: format!("input channels {} != weight channels {}", xs[1], ws[1]),
        });
    }
    if stride == 0 {
        return Err(DiffError::Shape { op: "conv3d", detail: "stride must be >= 1".into() });
    }
    let k = ws[2];
    let mut out = [0usize; 3];
    for a in 0..3 {
        let padded = xs[2 + a] + 2 * pad;
        if padded < k {
            return Err(DiffError::Shape {
                op: "conv3d",
                detail: format!("kernel {k} exceeds padded input {padded}"),
            });
        }
        out[a] = (padded - k) / stride + 1;
    }
    Ok(ConvDims {
        n: xs[0],
        c_in: xs[1],
        c_out: ws[0],
        k,
        stride,
        pad,
        in_spatial: [xs[2], xs[3], xs[4]],
        out_spatial: out,
    })
}

/// Valid output range for one kernel offset: all `o` with
/// `0 <= o*s + kk - p < dim`, clipped to `[0, out_dim)`.
#[inline]
fn out_range(kk: usize, s: usize, p: usize, dim: usize, out_dim: usize) -> (usize, usize) {
    let lo = if kk >= p { 0 } else { (p - kk).div_ceil(s) };
    let hi_excl = if dim + p > kk { ((dim + p - kk - 1) / s + 1).min(out_dim) } else { 0 };
    (lo.min(hi_excl), hi_excl)
}

/// Cross-correlation forward pass.
pub fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    dims: &ConvDims,
) -> Tensor<T> {
    let [id, ih, iw] = dims.in_spatial;
    let [od, oh, ow] = dims.out_spatial;
    let (k, s, p) = (dims.k, dims.stride, dims.pad);
    let xd = x.data();
    let wd = w.data();
    let out_plane = od * oh * ow;

    let mut out = Tensor::zeros(&[dims.n, dims.c_out, od, oh, ow]);
    out.data_mut()
        .par_chunks_mut(out_plane)
        .enumerate()
        .for_each(|(chunk_idx, dst)| {
            let n = chunk_idx / dims.c_out;
            let co = chunk_idx % dims.c_out;
            let bias = b.map(|t| t.data()[co]).unwrap_or_else(T::zero);
            for v in dst.iter_mut() {
                *v = bias;
            }
            for ci in 0..dims.c_in {
                let x_chan = (n * dims.c_in + ci) * id * ih * iw;
                let w_chan = (co * dims.c_in + ci) * k * k * k;
                for kd in 0..k {
                    let (z0, z1) = out_range(kd, s, p, id, od);
                    for kh in 0..k {
                        let (y0, y1) = out_range(kh, s, p, ih, oh);
                        for kw in 0..k {
                            let (x0, x1) = out_range(kw, s, p, iw, ow);
                            if x0 >= x1 {
                                continue;
                            }
                            let wv = wd[w_chan + (kd * k + kh) * k + kw];
                            for oz in z0..z1 {
                                let zi = oz * s + kd - p;
                                for oy in y0..y1 {
                                    let yi = oy * s + kh - p;
                                    let x_row = x_chan + (zi * ih + yi) * iw;
                                    let o_row = (oz * oh + oy) * ow;
                                    // input index for ox: ox*s + kw - p
                                    let x_base = x_row + x0 * s + kw - p;
                                    accumulate_row(
                                        &mut dst[o_row + x0..o_row + x1],
                                        &xd[x_base..],
                                        wv,
                                        s,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// `dst[i] += w * src[i * stride]` with contiguous fast path.
#[inline]
fn accumulate_row<T: Scalar>(dst: &mut [T], src: &[T], w: T, stride: usize) {
    if stride == 1 {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = *d + w * s;
        }
    } else {
        for (i, d) in dst.iter_mut().enumerate() {
            *d = *d + w * src[i * stride];
        }
    }
}

/// `(kernel offset, upstream coord)` pairs reaching each position, built once
/// per axis instead of per element.
fn upstream_lists(dim: usize, s: usize, p: usize, k: usize, out_dim: usize) -> Vec<Vec<(u32, u32)>> {
    (0..dim)
        .map(|i| {
            let mut v = Vec::new();
            for kk in 0..k {
                let shifted = i + p;
                if shifted < kk {
                    continue;
                }
                let num = shifted - kk;
                if num % s == 0 && num / s < out_dim {
                    v.push((kk as u32, (num / s) as u32));
                }
            }
            v
        })
        .collect()
}

/// Gradient of conv3d w.r.t. its input (gathered per input element).
pub fn conv3d_grad_input<T: Scalar>(g: &Tensor<T>, w: &Tensor<T>, dims: &ConvDims) -> Tensor<T> {
    let [id, ih, iw] = dims.in_spatial;
    let [od, oh, ow] = dims.out_spatial;
    let (k, s, p) = (dims.k, dims.stride, dims.pad);
    let gd = g.data();
    let wd = w.data();
    let in_plane = id * ih * iw;
    let lists_z = upstream_lists(id, s, p, k, od);
    let lists_y = upstream_lists(ih, s, p, k, oh);
    let lists_x = upstream_lists(iw, s, p, k, ow);

    let mut dx = Tensor::zeros(&[dims.n, dims.c_in, id, ih, iw]);
    dx.data_mut()
        .par_chunks_mut(in_plane)
        .enumerate()
        .for_each(|(chunk_idx, dst)| {
            let n = chunk_idx / dims.c_in;
            let ci = chunk_idx % dims.c_in;
            for z in 0..id {
                for y in 0..ih {
                    for xcol in 0..iw {
                        let mut acc = T::zero();
                        for co in 0..dims.c_out {
                            let g_chan = (n * dims.c_out + co) * od * oh * ow;
                            let w_chan = (co * dims.c_in + ci) * k * k * k;
                            for &(kd, zo) in &lists_z[z] {
                                for &(kh, yo) in &lists_y[y] {
                                    let g_row = g_chan + (zo as usize * oh + yo as usize) * ow;
                                    let w_row = w_chan + (kd as usize * k + kh as usize) * k;
                                    for &(kw, xo) in &lists_x[xcol] {
                                        acc = acc
                                            + gd[g_row + xo as usize] * wd[w_row + kw as usize];
                                    }
                                }
                            }
                        }
                        dst[(z * ih + y) * iw + xcol] = acc;
                    }
                }
            }
        });
    dx
}

/// Gradient of conv3d w.r.t. its weights.
pub fn conv3d_grad_weight<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>, dims: &ConvDims) -> Tensor<T> {
    let [id, ih, iw] = dims.in_spatial;
    let [od, oh, ow] = dims.out_spatial;
    let (k, s, p) = (dims.k, dims.stride, dims.pad);
    let gd = g.data();
    let xd = x.data();
    let w_block = dims.c_in * k * k * k;

    let mut dw = Tensor::zeros(&[dims.c_out, dims.c_in, k, k, k]);
    dw.data_mut()
        .par_chunks_mut(w_block)
        .enumerate()
        .for_each(|(co, dst)| {
            for ci in 0..dims.c_in {
                for kd in 0..k {
                    let (z0, z1) = out_range(kd, s, p, id, od);
                    for kh in 0..k {
                        let (y0, y1) = out_range(kh, s, p, ih, oh);
                        for kw in 0..k {
                            let (x0, x1) = out_range(kw, s, p, iw, ow);
                            let mut acc = T::zero();
                            for n in 0..dims.n {
                                let g_chan = (n * dims.c_out + co) * od * oh * ow;
                                let x_chan = (n * dims.c_in + ci) * id * ih * iw;
                                for oz in z0..z1 {
                                    let zi = oz * s + kd - p;
                                    for oy in y0..y1 {
                                        let yi = oy * s + kh - p;
                                        let g_row = g_chan + (oz * oh + oy) * ow;
                                        let x_row = x_chan + (zi * ih + yi) * iw + x0 * s + kw - p;
                                        if s == 1 {
                                            for (i, &gv) in gd[g_row + x0..g_row + x1].iter().enumerate() {
                                                acc = acc + gv * xd[x_row + i];
                                            }
                                        } else {
                                            for (i, &gv) in gd[g_row + x0..g_row + x1].iter().enumerate() {
                                                acc = acc + gv * xd[x_row + i * s];
                                            }
                                        }
                                    }
                                }
                            }
                            dst[((ci * k + kd) * k + kh) * k + kw] = acc;
                        }
                    }
                }
            }
        });
    dw
}

/// Sum of the output gradient over batch and spatial dims, per channel.
pub fn grad_bias<T: Scalar>(g: &Tensor<T>, n: usize, c: usize) -> Tensor<T> {
    let plane: usize = g.shape()[2..].iter().product();
    let gd = g.data();
    let mut db = Tensor::zeros(&[c]);
    for nn in 0..n {
        for cc in 0..c {
            let base = (nn * c + cc) * plane;
            let mut acc = db.data()[cc];
            for i in 0..plane {
                acc = acc + gd[base + i];
            }
            db.data_mut()[cc] = acc;
        }
    }
    db
}

#[derive(Debug, Clone, Copy)]
pub struct ConvTDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub in_spatial: [usize; 3],
    pub out_spatial: [usize; 3],
}

pub fn conv_transpose_dims<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
) -> Result<ConvTDims, DiffError> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 5 || ws.len() != 5 {
        return Err(DiffError::Shape {
            op: "conv3d_transpose",
            detail: format!("want 5-d input/weight, got {xs:?} and {ws:?}"),
        });
    }
    if ws[2] != ws[3] || ws[2] != ws[4] {
        return Err(DiffError::Shape {
            op: "conv3d_transpose",
            detail: format!("kernel must be cubic, got {ws:?}"),
        });
    }
    if xs[1] != ws[0] {
        return Err(DiffError::Shape {
            op: "conv3d_transpose",
            detail: format!("input channels {} != weight dim 0 {}", xs[1], ws[0]),
        });
    }
    if stride == 0 {
        return Err(DiffError::Shape { op: "conv3d_transpose", detail: "stride must be >= 1".into() });
    }
    let k = ws[2];
    let mut out = [0usize; 3];
    for a in 0..3 {
        out[a] = (xs[2 + a] - 1) * stride + k;
    }
    Ok(ConvTDims {
        n: xs[0],
        c_in: xs[1],
        c_out: ws[1],
        k,
        stride,
        in_spatial: [xs[2], xs[3], xs[4]],
        out_spatial: out,
    })
}

/// Transposed convolution (adjoint of pad-free conv3d with the same stride).
pub fn conv_transpose3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    dims: &ConvTDims,
) -> Tensor<T> {
    let [id, ih, iw] = dims.in_spatial;
    let [od, oh, ow] = dims.out_spatial;
    let (k, s) = (dims.k, dims.stride);
    let xd = x.data();
    let wd = w.data();
    let out_plane = od * oh * ow;
    let lists_z = upstream_lists(od, s, 0, k, id);
    let lists_y = upstream_lists(oh, s, 0, k, ih);
    let lists_x = upstream_lists(ow, s, 0, k, iw);

    let mut out = Tensor::zeros(&[dims.n, dims.c_out, od, oh, ow]);
    out.data_mut()
        .par_chunks_mut(out_plane)
        .enumerate()
        .for_each(|(chunk_idx, dst)| {
            let n = chunk_idx / dims.c_out;
            let co = chunk_idx % dims.c_out;
            let bias = b.map(|t| t.data()[co]).unwrap_or_else(T::zero);
            for z in 0..od {
                for y in 0..oh {
                    for xcol in 0..ow {
                        let mut acc = bias;
                        for ci in 0..dims.c_in {
                            let x_chan = (n * dims.c_in + ci) * id * ih * iw;
                            let w_chan = (ci * dims.c_out + co) * k * k * k;
                            for &(kd, zi) in &lists_z[z] {
                                for &(kh, yi) in &lists_y[y] {
                                    let x_row = x_chan + (zi as usize * ih + yi as usize) * iw;
                                    let w_row = w_chan + (kd as usize * k + kh as usize) * k;
                                    for &(kw, xi) in &lists_x[xcol] {
                                        acc = acc
                                            + xd[x_row + xi as usize] * wd[w_row + kw as usize];
                                    }
                                }
                            }
                        }
                        dst[(z * oh + y) * ow + xcol] = acc;
                    }
                }
            }
        });
    out
}

/// Gradient of conv_transpose3d w.r.t. its input: a pad-free strided conv of
/// the output gradient with the same weights.
pub fn conv_transpose3d_grad_input<T: Scalar>(
    g: &Tensor<T>,
    w: &Tensor<T>,
    dims: &ConvTDims,
) -> Tensor<T> {
    let [id, ih, iw] = dims.in_spatial;
    let [od, oh, ow] = dims.out_spatial;
    let (k, s) = (dims.k, dims.stride);
    let gd = g.data();
    let wd = w.data();
    let in_plane = id * ih * iw;

    let mut dx = Tensor::zeros(&[dims.n, dims.c_in, id, ih, iw]);
    dx.data_mut()
        .par_chunks_mut(in_plane)
        .enumerate()
        .for_each(|(chunk_idx, dst)| {
            let n = chunk_idx / dims.c_in;
            let ci = chunk_idx % dims.c_in;
            for z in 0..id {
                for y in 0..ih {
                    for xcol in 0..iw {
                        let mut acc = T::zero();
                        for co in 0..dims.c_out {
                            let g_chan = (n * dims.c_out + co) * od * oh * ow;
                            let w_chan = (ci * dims.c_out + co) * k * k * k;
                            for kd in 0..k {
                                let zo = z * s + kd;
                                for kh in 0..k {
                                    let yo = y * s + kh;
                                    let g_row = g_chan + (zo * oh + yo) * ow + xcol * s;
                                    let w_row = w_chan + (kd * k + kh) * k;
                                    for (kw, &wv) in wd[w_row..w_row + k].iter().enumerate() {
                                        acc = acc + gd[g_row + kw] * wv;
                                    }
                                }
                            }
                        }
                        dst[(z * ih + y) * iw + xcol] = acc;
                    }
                }
            }
        });
    dx
}

/// Gradient of conv_transpose3d w.r.t. its weights.
pub fn conv_transpose3d_grad_weight<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    dims: &ConvTDims,
) -> Tensor<T> {
    let [id, ih, iw] = dims.in_spatial;
    let [od, oh, ow] = dims.out_spatial;
    let (k, s) = (dims.k, dims.stride);
    let gd = g.data();
    let xd = x.data();
    let w_block = dims.c_out * k * k * k;

    let mut dw = Tensor::zeros(&[dims.c_in, dims.c_out, k, k, k]);
    dw.data_mut()
        .par_chunks_mut(w_block)
        .enumerate()
        .for_each(|(ci, dst)| {
            for co in 0..dims.c_out {
                for kd in 0..k {
                    for kh in 0..k {
                        for kw in 0..k {
                            let mut acc = T::zero();
                            for n in 0..dims.n {
                                let x_chan = (n * dims.c_in + ci) * id * ih * iw;
                                let g_chan = (n * dims.c_out + co) * od * oh * ow;
                                for z in 0..id {
                                    let zo = z * s + kd;
                                    for y in 0..ih {
                                        let yo = y * s + kh;
                                        let x_row = x_chan + (z * ih + y) * iw;
                                        let g_row = g_chan + (zo * oh + yo) * ow + kw;
                                        for (i, &xv) in xd[x_row..x_row + iw].iter().enumerate() {
                                            acc = acc + xv * gd[g_row + i * s];
                                        }
                                    }
                                }
                            }
                            dst[((co * k + kd) * k + kh) * k + kw] = acc;
                        }
                    }
                }
            }
        });
    dw
}
