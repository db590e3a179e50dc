//! Raw convolution / pooling kernels on [`Array`] values.
//!
//! `conv2d` lowers to im2col plus a small GEMM so the training loop stays
//! usable on a single CPU core; transpose convolution and pooling use
//! direct loops since they only appear at small sizes. The graph ops in
//! [`super::graph`] wrap these for autodiff.

use crate::error::{Error, Result};

use super::array::Array;

/// `(h + 2·padding − k) / stride + 1`, requiring exact division.
pub fn conv2d_out_size(h: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let span = (h + 2 * padding)
        .checked_sub(k)
        .ok_or_else(|| Error::config(format!("kernel {k} larger than padded input {h}+2*{padding}")))?;
    if span % stride != 0 {
        return Err(Error::config(format!(
            "output size not exact: ({h} + 2*{padding} - {k}) not divisible by stride {stride}"
        )));
    }
    Ok(span / stride + 1)
}

pub fn check_conv2d_args(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if x_shape.len() != 4 || w_shape.len() != 4 {
        return Err(Error::shape(format!(
            "conv2d wants 4-d input and weight, got {x_shape:?} and {w_shape:?}"
        )));
    }
    let (k_h, k_w) = (w_shape[2], w_shape[3]);
    if k_h != k_w {
        return Err(Error::shape(format!("conv2d wants square kernels, got {w_shape:?}")));
    }
    if k_h % 2 == 0 {
        return Err(Error::Contract(format!("conv2d wants an odd kernel size, got {k_h}")));
    }
    if stride == 0 {
        return Err(Error::config("conv2d stride must be positive".to_string()));
    }
    if x_shape[1] != w_shape[1] {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input {x_shape:?} vs weight {w_shape:?}"
        )));
    }
    if padding == 0 && (x_shape[2] < k_h || x_shape[3] < k_w) {
        return Err(Error::Contract(format!(
            "conv2d unpadded input {x_shape:?} smaller than kernel {k_h}"
        )));
    }
    let oh = conv2d_out_size(x_shape[2], k_h, stride, padding)?;
    let ow = conv2d_out_size(x_shape[3], k_w, stride, padding)?;
    Ok((oh, ow))
}

/// C[m,n] += A[m,k] · B[k,n]
fn gemm_nn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// C[m,n] += A[m,k] · B[n,k]ᵀ
fn gemm_nt(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row.iter()) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

/// C[m,n] += A[k,m]ᵀ · B[k,n]
fn gemm_tn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a[p * m + i];
            if a_pi == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += a_pi * bv;
            }
        }
    }
}

/// Lower `x[B,Cin,H,W]` to `cols[Cin·k·k, B·OH·OW]` for kernel `k`.
fn im2col(
    x: &Array,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let (b, c_in, h, w) = dims4(x);
    let n_cols = b * oh * ow;
    let mut cols = vec![0.0; c_in * k * k * n_cols];
    let xd = x.data();
    for ci in 0..c_in {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let out = &mut cols[row * n_cols..(row + 1) * n_cols];
                for bi in 0..b {
                    for oy in 0..oh {
                        let iy = (oy * stride + kh) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_base = ((bi * c_in + ci) * h + iy as usize) * w;
                        let o_base = (bi * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kw) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[o_base + ox] = xd[x_base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into input layout.
fn col2im(
    cols: &[f64],
    x_shape: &[usize],
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Array {
    let (b, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let n_cols = b * oh * ow;
    let mut dx = Array::zeros(x_shape);
    let out = dx.data_mut();
    for ci in 0..c_in {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let col_row = &cols[row * n_cols..(row + 1) * n_cols];
                for bi in 0..b {
                    for oy in 0..oh {
                        let iy = (oy * stride + kh) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_base = ((bi * c_in + ci) * h + iy as usize) * w;
                        let o_base = (bi * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kw) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[x_base + ix as usize] += col_row[o_base + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn dims4(a: &Array) -> (usize, usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2], s[3])
}

pub fn conv2d_forward(x: &Array, w: &Array, stride: usize, padding: usize) -> Result<Array> {
    let (oh, ow) = check_conv2d_args(x.shape(), w.shape(), stride, padding)?;
    let (b, c_in, _, _) = dims4(x);
    let c_out = w.shape()[0];
    let k = w.shape()[2];
    let n_cols = b * oh * ow;

    let cols = im2col(x, k, stride, padding, oh, ow);
    let mut y2 = vec![0.0; c_out * n_cols];
    gemm_nn(&mut y2, w.data(), &cols, c_out, c_in * k * k, n_cols);

    // [Cout, B·OH·OW] -> [B, Cout, OH, OW]
    let mut y = Array::zeros(&[b, c_out, oh, ow]);
    let plane = oh * ow;
    let yd = y.data_mut();
    for co in 0..c_out {
        for bi in 0..b {
            let src = &y2[co * n_cols + bi * plane..co * n_cols + (bi + 1) * plane];
            let dst = &mut yd[(bi * c_out + co) * plane..(bi * c_out + co + 1) * plane];
            dst.copy_from_slice(src);
        }
    }
    Ok(y)
}

/// Gradient w.r.t. the conv input.
pub fn conv2d_backward_input(
    dy: &Array,
    w: &Array,
    x_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Array> {
    let (b, c_out, oh, ow) = dims4(dy);
    let c_in = w.shape()[1];
    let k = w.shape()[2];
    let n_cols = b * oh * ow;

    let dy2 = nchw_to_rows(dy, c_out, b, oh * ow);
    let mut dcols = vec![0.0; c_in * k * k * n_cols];
    gemm_tn(&mut dcols, w.data(), &dy2, c_in * k * k, c_out, n_cols);
    Ok(col2im(&dcols, x_shape, k, stride, padding, oh, ow))
}

/// Gradient w.r.t. the conv weight.
pub fn conv2d_backward_weight(
    dy: &Array,
    x: &Array,
    w_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Array> {
    let (b, c_out, oh, ow) = dims4(dy);
    let c_in = w_shape[1];
    let k = w_shape[2];
    let n_cols = b * oh * ow;

    let cols = im2col(x, k, stride, padding, oh, ow);
    let dy2 = nchw_to_rows(dy, c_out, b, oh * ow);
    let mut dw = Array::zeros(w_shape);
    gemm_nt(dw.data_mut(), &dy2, &cols, c_out, n_cols, c_in * k * k);
    Ok(dw)
}

/// [B, C, P] layout -> [C, B·P] rows.
fn nchw_to_rows(a: &Array, c: usize, b: usize, plane: usize) -> Vec<f64> {
    let mut rows = vec![0.0; c * b * plane];
    let ad = a.data();
    for ci in 0..c {
        for bi in 0..b {
            let src = &ad[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
            let dst = &mut rows[ci * b * plane + bi * plane..ci * b * plane + (bi + 1) * plane];
            dst.copy_from_slice(src);
        }
    }
    rows
}

pub fn conv_transpose2d_out_size(h: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let out = ((h - 1) * stride + k)
        .checked_sub(2 * padding)
        .filter(|&o| o >= 1)
        .ok_or_else(|| {
            Error::config(format!(
                "conv_transpose2d output empty for h={h} k={k} stride={stride} padding={padding}"
            ))
        })?;
    Ok(out)
}

pub fn check_conv_transpose2d_args(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if x_shape.len() != 4 || w_shape.len() != 4 {
        return Err(Error::shape(format!(
            "conv_transpose2d wants 4-d input and weight, got {x_shape:?} and {w_shape:?}"
        )));
    }
    if w_shape[2] != w_shape[3] {
        return Err(Error::shape(format!(
            "conv_transpose2d wants square kernels, got {w_shape:?}"
        )));
    }
    if stride == 0 {
        return Err(Error::config("conv_transpose2d stride must be positive".to_string()));
    }
    if x_shape[1] != w_shape[0] {
        return Err(Error::shape(format!(
            "conv_transpose2d channel mismatch: input {x_shape:?} vs weight {w_shape:?} (weight is [Cin,Cout,k,k])"
        )));
    }
    let oh = conv_transpose2d_out_size(x_shape[2], w_shape[2], stride, padding)?;
    let ow = conv_transpose2d_out_size(x_shape[3], w_shape[3], stride, padding)?;
    Ok((oh, ow))
}

pub fn conv_transpose2d_forward(x: &Array, w: &Array, stride: usize, padding: usize) -> Result<Array> {
    let (oh, ow) = check_conv_transpose2d_args(x.shape(), w.shape(), stride, padding)?;
    let (b, c_in, h, win) = dims4(x);
    let c_out = w.shape()[1];
    let k = w.shape()[2];
    let mut y = Array::zeros(&[b, c_out, oh, ow]);
    let xd = x.data();
    let wd = w.data();
    let yd = y.data_mut();
    for bi in 0..b {
        for ci in 0..c_in {
            for iy in 0..h {
                for ix in 0..win {
                    let v = xd[((bi * c_in + ci) * h + iy) * win + ix];
                    if v == 0.0 {
                        continue;
                    }
                    for kh in 0..k {
                        let oy = (iy * stride + kh) as isize - padding as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let ox = (ix * stride + kw) as isize - padding as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            for co in 0..c_out {
                                yd[((bi * c_out + co) * oh + oy as usize) * ow + ox as usize] +=
                                    v * wd[((ci * c_out + co) * k + kh) * k + kw];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn conv_transpose2d_backward_input(
    dy: &Array,
    w: &Array,
    x_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Array> {
    let (b, c_in, h, win) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (_, c_out, oh, ow) = dims4(dy);
    let k = w.shape()[2];
    let mut dx = Array::zeros(x_shape);
    let dyd = dy.data();
    let wd = w.data();
    let dxd = dx.data_mut();
    for bi in 0..b {
        for ci in 0..c_in {
            for iy in 0..h {
                for ix in 0..win {
                    let mut acc = 0.0;
                    for kh in 0..k {
                        let oy = (iy * stride + kh) as isize - padding as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let ox = (ix * stride + kw) as isize - padding as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            for co in 0..c_out {
                                acc += dyd[((bi * c_out + co) * oh + oy as usize) * ow + ox as usize]
                                    * wd[((ci * c_out + co) * k + kh) * k + kw];
                            }
                        }
                    }
                    dxd[((bi * c_in + ci) * h + iy) * win + ix] = acc;
                }
            }
        }
    }
    Ok(dx)
}

pub fn conv_transpose2d_backward_weight(
    dy: &Array,
    x: &Array,
    w_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Array> {
    let (b, c_in, h, win) = dims4(x);
    let (_, c_out, oh, ow) = dims4(dy);
    let k = w_shape[2];
    let mut dw = Array::zeros(w_shape);
    let xd = x.data();
    let dyd = dy.data();
    let dwd = dw.data_mut();
    for bi in 0..b {
        for ci in 0..c_in {
            for iy in 0..h {
                for ix in 0..win {
                    let v = xd[((bi * c_in + ci) * h + iy) * win + ix];
                    if v == 0.0 {
                        continue;
                    }
                    for kh in 0..k {
                        let oy = (iy * stride + kh) as isize - padding as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let ox = (ix * stride + kw) as isize - padding as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            for co in 0..c_out {
                                dwd[((ci * c_out + co) * k + kh) * k + kw] += v
                                    * dyd[((bi * c_out + co) * oh + oy as usize) * ow + ox as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dw)
}

pub fn avg_pool2d_forward(x: &Array, k: usize) -> Result<Array> {
    if x.shape().len() != 4 {
        return Err(Error::shape(format!("avg_pool2d wants 4-d input, got {:?}", x.shape())));
    }
    let (b, c, h, w) = dims4(x);
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::config(format!(
            "avg_pool2d window {k} must divide spatial size {h}x{w}"
        )));
    }
    let (oh, ow) = (h / k, w / k);
    let mut y = Array::zeros(&[b, c, oh, ow]);
    let xd = x.data();
    let yd = y.data_mut();
    let inv = 1.0 / (k * k) as f64;
    for bc in 0..b * c {
        let x_plane = &xd[bc * h * w..(bc + 1) * h * w];
        let y_plane = &mut yd[bc * oh * ow..(bc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += x_plane[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                y_plane[oy * ow + ox] = acc * inv;
            }
        }
    }
    Ok(y)
}

pub fn avg_pool2d_backward(dy: &Array, x_shape: &[usize], k: usize) -> Array {
    let (b, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh, ow) = (h / k, w / k);
    let mut dx = Array::zeros(x_shape);
    let dyd = dy.data();
    let dxd = dx.data_mut();
    let inv = 1.0 / (k * k) as f64;
    for bc in 0..b * c {
        let dy_plane = &dyd[bc * oh * ow..(bc + 1) * oh * ow];
        let dx_plane = &mut dxd[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy_plane[oy * ow + ox] * inv;
                for dyy in 0..k {
                    for dxx in 0..k {
                        dx_plane[(oy * k + dyy) * w + ox * k + dxx] += g;
                    }
                }
            }
        }
    }
    dx
}
