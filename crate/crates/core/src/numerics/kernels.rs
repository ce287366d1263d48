//! Value-level compute kernels shared by the tape and the tape-free paths.
//!
//! Convolutions go through im2col + a single-threaded GEMM per image, with
//! rayon fanning out over batch elements. Every parallel region writes to
//! disjoint output slices and every reduction runs in index order, so results
//! are bit-identical regardless of thread count.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

/// C[m,n] += or = alpha * A[m,k] * B[k,n], all row-major contiguous.
#[allow(clippy::too_many_arguments)] // BLAS calling convention
fn gemm_rowmajor(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] = alpha * A[m,k] * B[n,k]^T.
#[allow(clippy::too_many_arguments)] // BLAS calling convention
fn gemm_b_transposed(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] = alpha * A[k,m]^T * B[k,n].
#[allow(clippy::too_many_arguments)] // BLAS calling convention
fn gemm_a_transposed(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("conv stride must be >= 1"));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::invalid(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Shape bookkeeping for one conv application.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    pub fn infer(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<ConvDims> {
        let xs = x.shape();
        let ws = w.shape();
        if xs.len() != 4 {
            return Err(Error::shape("conv2d", "NCHW input", format!("{xs:?}")));
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape(
                "conv2d",
                "OIKK square kernel",
                format!("{ws:?}"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {}", ws[1]),
                format!("{}", xs[1]),
            ));
        }
        let out_h = conv_out_size(xs[2], ws[2], stride, pad)?;
        let out_w = conv_out_size(xs[3], ws[3], stride, pad)?;
        Ok(ConvDims {
            batch: xs[0],
            in_c: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_c: ws[0],
            k: ws[2],
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one image [C,H,W] into columns [C*K*K, OH*OW].
fn im2col(d: &ConvDims, img: &[f32], cols: &mut [f32]) {
    let hw = d.out_hw();
    debug_assert_eq!(cols.len(), d.col_rows() * hw);
    cols.fill(0.0);
    for c in 0..d.in_c {
        for kh in 0..d.k {
            for kw in 0..d.k {
                let row = (c * d.k + kh) * d.k + kw;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oh in 0..d.out_h {
                    let ih = (oh * d.stride + kh) as isize - d.pad as isize;
                    if ih < 0 || ih >= d.in_h as isize {
                        continue;
                    }
                    let src_row = &img[(c * d.in_h + ih as usize) * d.in_w..];
                    for ow in 0..d.out_w {
                        let iw = (ow * d.stride + kw) as isize - d.pad as isize;
                        if iw < 0 || iw >= d.in_w as isize {
                            continue;
                        }
                        dst[oh * d.out_w + ow] = src_row[iw as usize];
                    }
                }
            }
        }
    }
}

/// Fold columns [C*K*K, OH*OW] back into an image [C,H,W], accumulating
/// overlapping contributions.
fn col2im(d: &ConvDims, cols: &[f32], img: &mut [f32]) {
    let hw = d.out_hw();
    for c in 0..d.in_c {
        for kh in 0..d.k {
            for kw in 0..d.k {
                let row = (c * d.k + kh) * d.k + kw;
                let src = &cols[row * hw..(row + 1) * hw];
                for oh in 0..d.out_h {
                    let ih = (oh * d.stride + kh) as isize - d.pad as isize;
                    if ih < 0 || ih >= d.in_h as isize {
                        continue;
                    }
                    let dst_base = (c * d.in_h + ih as usize) * d.in_w;
                    for ow in 0..d.out_w {
                        let iw = (ow * d.stride + kw) as isize - d.pad as isize;
                        if iw < 0 || iw >= d.in_w as isize {
                            continue;
                        }
                        img[dst_base + iw as usize] += src[oh * d.out_w + ow];
                    }
                }
            }
        }
    }
}

/// 2D convolution, NCHW input against OIKK weight.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let d = ConvDims::infer(x, w, stride, pad)?;
    let hw = d.out_hw();
    let in_img = d.in_c * d.in_h * d.in_w;
    let out_img = d.out_c * hw;
    let mut out = vec![0.0f32; d.batch * out_img];
    out.par_chunks_mut(out_img)
        .zip(x.data().par_chunks(in_img))
        .for_each(|(out_img_slice, img)| {
            let mut cols = vec![0.0f32; d.col_rows() * hw];
            im2col(&d, img, &mut cols);
            gemm_rowmajor(
                d.out_c,
                d.col_rows(),
                hw,
                1.0,
                w.data(),
                &cols,
                0.0,
                out_img_slice,
            );
        });
    Tensor::new(vec![d.batch, d.out_c, d.out_h, d.out_w], out)
}

/// Gradients of a conv2d with respect to input and weight.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let d = ConvDims::infer(x, w, stride, pad)?;
    let hw = d.out_hw();
    let in_img = d.in_c * d.in_h * d.in_w;
    let out_img = d.out_c * hw;
    debug_assert_eq!(dy.numel(), d.batch * out_img);

    // dW: ordered accumulation over the batch keeps the sum deterministic.
    let mut dw = vec![0.0f32; w.numel()];
    let mut cols = vec![0.0f32; d.col_rows() * hw];
    for n in 0..d.batch {
        im2col(&d, &x.data()[n * in_img..(n + 1) * in_img], &mut cols);
        gemm_b_transposed(
            d.out_c,
            hw,
            d.col_rows(),
            1.0,
            &dy.data()[n * out_img..(n + 1) * out_img],
            &cols,
            1.0,
            &mut dw,
        );
    }

    // dX: independent per image.
    let mut dx = vec![0.0f32; x.numel()];
    dx.par_chunks_mut(in_img)
        .zip(dy.data().par_chunks(out_img))
        .for_each(|(dx_img, dy_img)| {
            let mut dcols = vec![0.0f32; d.col_rows() * hw];
            gemm_a_transposed(
                d.col_rows(),
                d.out_c,
                hw,
                1.0,
                w.data(),
                dy_img,
                0.0,
                &mut dcols,
            );
            col2im(&d, &dcols, dx_img);
        });

    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
    ))
}

/// Per-channel batch statistics of an NCHW tensor: biased mean and variance
/// over batch and spatial positions, accumulated in f64 in index order.
pub fn batch_stats(x: &Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("batch_stats", "NCHW", format!("{s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let m = n * h * w;
    if m < 2 {
        return Err(Error::invalid(
            "batch norm needs at least 2 values per channel in train mode",
        ));
    }
    let hw = h * w;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut acc = 0.0f64;
        for img in 0..n {
            let base = (img * c + ch) * hw;
            for i in 0..hw {
                acc += x.data()[base + i] as f64;
            }
        }
        let mu = acc / m as f64;
        let mut vacc = 0.0f64;
        for img in 0..n {
            let base = (img * c + ch) * hw;
            for i in 0..hw {
                let dv = x.data()[base + i] as f64 - mu;
                vacc += dv * dv;
            }
        }
        mean[ch] = mu as f32;
        var[ch] = (vacc / m as f64) as f32;
    }
    Ok((mean, var))
}

/// Normalize with given per-channel mean/inv_std and apply affine scale/shift.
pub fn bn_apply(
    x: &Tensor,
    mean: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    beta: &[f32],
) -> Result<Tensor> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if mean.len() != c || inv_std.len() != c || gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "bn_apply",
            format!("{c} channels"),
            format!(
                "mean {} inv_std {} gamma {} beta {}",
                mean.len(),
                inv_std.len(),
                gamma.len(),
                beta.len()
            ),
        ));
    }
    let hw = h * w;
    let mut out = vec![0.0f32; x.numel()];
    out.par_chunks_mut(c * hw)
        .zip(x.data().par_chunks(c * hw))
        .for_each(|(o_img, x_img)| {
            for ch in 0..c {
                let (mu, istd, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
                for i in 0..hw {
                    o_img[ch * hw + i] = (x_img[ch * hw + i] - mu) * istd * g + b;
                }
            }
        });
    Tensor::new(vec![n, c, h, w], out)
}

/// Train-mode batch-norm backward.
///
/// Returns (dx, dgamma, dbeta) given the saved batch mean and inverse std.
pub fn bn_train_backward(
    x: &Tensor,
    dy: &Tensor,
    mean: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let mut dx = vec![0.0f32; x.numel()];
    // Two channel-wise reductions then an elementwise pass; reductions are in
    // index order (f64 accumulators).
    for ch in 0..c {
        let mu = mean[ch] as f64;
        let istd = inv_std[ch] as f64;
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for img in 0..n {
            let base = (img * c + ch) * hw;
            for i in 0..hw {
                let g = dy.data()[base + i] as f64;
                let xhat = (x.data()[base + i] as f64 - mu) * istd;
                sum_dy += g;
                sum_dy_xhat += g * xhat;
            }
        }
        dgamma[ch] = sum_dy_xhat as f32;
        dbeta[ch] = sum_dy as f32;
        let gam = gamma[ch] as f64;
        let mean_dy = sum_dy / m;
        let mean_dy_xhat = sum_dy_xhat / m;
        for img in 0..n {
            let base = (img * c + ch) * hw;
            for i in 0..hw {
                let g = dy.data()[base + i] as f64;
                let xhat = (x.data()[base + i] as f64 - mu) * istd;
                dx[base + i] = (gam * istd * (g - mean_dy - xhat * mean_dy_xhat)) as f32;
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), dx)?, dgamma, dbeta))
}

/// Eval-mode batch-norm backward; running statistics are constants.
pub fn bn_eval_backward(
    x: &Tensor,
    dy: &Tensor,
    mean: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let mut dx = vec![0.0f32; x.numel()];
    for ch in 0..c {
        let mu = mean[ch];
        let istd = inv_std[ch];
        let gam = gamma[ch];
        let mut sg = 0.0f64;
        let mut sb = 0.0f64;
        for img in 0..n {
            let base = (img * c + ch) * hw;
            for i in 0..hw {
                let g = dy.data()[base + i];
                sg += (g * (x.data()[base + i] - mu) * istd) as f64;
                sb += g as f64;
                dx[base + i] = g * gam * istd;
            }
        }
        dgamma[ch] = sg as f32;
        dbeta[ch] = sb as f32;
    }
    Ok((Tensor::new(x.shape().to_vec(), dx)?, dgamma, dbeta))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

/// Global average pool NCHW -> NC.
pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("global_avg_pool", "NCHW", format!("{s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let mut out = vec![0.0f32; n * c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            let mut acc = 0.0f64;
            for i in 0..hw {
                acc += x.data()[base + i] as f64;
            }
            out[img * c + ch] = (acc / hw as f64) as f32;
        }
    }
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward(x_shape: &[usize], dy: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let hw = h * w;
    let scale = 1.0 / hw as f32;
    let mut dx = vec![0.0f32; n * c * hw];
    for img in 0..n {
        for ch in 0..c {
            let g = dy.data()[img * c + ch] * scale;
            let base = (img * c + ch) * hw;
            dx[base..base + hw].fill(g);
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}

/// Fully connected layer: x [N,F] * w [O,F]^T + b [O] -> [N,O].
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || b.numel() != ws[0] {
        return Err(Error::shape(
            "linear",
            "x [N,F], w [O,F], b [O]",
            format!("x {xs:?}, w {ws:?}, b {:?}", b.shape()),
        ));
    }
    let (n, f, o) = (xs[0], xs[1], ws[0]);
    let mut out = vec![0.0f32; n * o];
    gemm_b_transposed(n, f, o, 1.0, x.data(), w.data(), 0.0, &mut out);
    for row in out.chunks_mut(o) {
        for (v, &bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Tensor::new(vec![n, o], out)
}

pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let mut dx = vec![0.0f32; n * f];
    gemm_rowmajor(n, o, f, 1.0, dy.data(), w.data(), 0.0, &mut dx);
    let mut dw = vec![0.0f32; o * f];
    gemm_a_transposed(o, n, f, 1.0, dy.data(), x.data(), 0.0, &mut dw);
    let mut db = vec![0.0f32; o];
    for row in dy.data().chunks(o) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok((
        Tensor::new(vec![n, f], dx)?,
        Tensor::new(vec![o, f], dw)?,
        Tensor::new(vec![o], db)?,
    ))
}
