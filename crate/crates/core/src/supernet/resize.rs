//! Bilinear image resizing for the switchable-resolution axis.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Resize a batch of square NCHW images to `resolution` with bilinear
/// interpolation (half-pixel sample centers, edge-clamped). Returns the input
/// unchanged when the size already matches. Performed as preprocessing, so
/// no gradient flows through it.
pub fn resize_input(x: &Tensor, resolution: u32) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("resize_input", "NCHW", format!("{s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h != w {
        return Err(Error::shape(
            "resize_input",
            "square images",
            format!("{h}x{w}"),
        ));
    }
    let out_size = resolution as usize;
    if out_size == 0 {
        return Err(Error::invalid("resolution must be positive"));
    }
    if out_size == h {
        return Ok(x.clone());
    }
    // Half-pixel mapping: source = (dst + 0.5) * in/out - 0.5, clamped.
    let scale = h as f64 / out_size as f64;
    let mut coords = Vec::with_capacity(out_size);
    for o in 0..out_size {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (h - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(h - 1);
        coords.push((lo, hi, (src - lo as f64) as f32));
    }
    let mut out = vec![0.0f32; n * c * out_size * out_size];
    for img in 0..n {
        for ch in 0..c {
            let src_base = (img * c + ch) * h * w;
            let dst_base = (img * c + ch) * out_size * out_size;
            for (oy, &(y0, y1, fy)) in coords.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in coords.iter().enumerate() {
                    let v00 = x.data()[src_base + y0 * w + x0];
                    let v01 = x.data()[src_base + y0 * w + x1];
                    let v10 = x.data()[src_base + y1 * w + x0];
                    let v11 = x.data()[src_base + y1 * w + x1];
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    out[dst_base + oy * out_size + ox] = top + (bot - top) * fy;
                }
            }
        }
    }
    Tensor::new(vec![n, c, out_size, out_size], out)
}
