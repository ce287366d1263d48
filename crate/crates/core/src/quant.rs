//! Uniform fake-quantization with a learned step size.
//!
//! Values are divided by a positive step, clipped to an integer code range,
//! rounded to the nearest code (ties to even) and scaled back:
//! `vhat = round(clip(v / s, lower, upper)) * s`. Rounding is a staircase, so
//! training uses the straight-through convention: the value gradient passes
//! unchanged inside the clip range and is zero outside; the step gradient is
//! the rounding residual inside the range and the saturated bound outside,
//! scaled by a per-tensor constant fixed at initialization.
//!
//! All intermediate arithmetic runs in `f64` and results are stored as `f32`.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Smallest value a learned step may take; steps are clamped here after
/// every optimizer update.
pub const STEP_MIN: f32 = 1e-8;

/// Step used when the initialization formula degenerates (all-zero input).
pub const STEP_INIT_FALLBACK: f32 = 1e-4;

/// Code range for the unsigned (activation) quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnsignedRange {
    /// Upper code `2^bits - 1`: the full unsigned range.
    #[default]
    Full,
    /// Upper code `2^(bits-1)`: half the range, for compatibility with
    /// implementations that reserve the top half.
    Narrow,
}

/// Inclusive integer code range of a quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantBounds {
    pub lower: i64,
    pub upper: i64,
}

impl QuantBounds {
    fn validate_bits(bits: u32) -> Result<()> {
        if !(2..=32).contains(&bits) {
            return Err(Error::invalid(format!(
                "bit-width {bits} out of supported range [2, 32]"
            )));
        }
        Ok(())
    }

    /// Symmetric signed range `[-2^(bits-1), 2^(bits-1) - 1]`.
    pub fn signed(bits: u32) -> Result<Self> {
        Self::validate_bits(bits)?;
        let half = 1i64 << (bits - 1);
        Ok(QuantBounds {
            lower: -half,
            upper: half - 1,
        })
    }

    /// Unsigned range `[0, upper]` with the upper code set by `range`.
    pub fn unsigned(bits: u32, range: UnsignedRange) -> Result<Self> {
        Self::validate_bits(bits)?;
        let upper = match range {
            UnsignedRange::Full => (1i64 << bits) - 1,
            UnsignedRange::Narrow => 1i64 << (bits - 1),
        };
        Ok(QuantBounds { lower: 0, upper })
    }

    pub fn contains(&self, code: i64) -> bool {
        (self.lower..=self.upper).contains(&code)
    }
}

fn validate_step(step: f32) -> Result<f64> {
    if !step.is_finite() || step <= 0.0 {
        return Err(Error::invalid(format!(
            "quantizer step must be finite and positive, got {step}"
        )));
    }
    Ok(step as f64)
}

/// Integer code of one value: `round(clip(v/s, lower, upper))`.
fn code_of(v: f32, step: f64, b: QuantBounds) -> f64 {
    let z = (v as f64 / step).clamp(b.lower as f64, b.upper as f64);
    z.round_ties_even()
}

/// Fake-quantize a slice into `out`.
pub fn quantize_slice(v: &[f32], step: f32, b: QuantBounds, out: &mut [f32]) -> Result<()> {
    if out.len() != v.len() {
        return Err(Error::shape(
            "quantize_slice",
            format!("{} outputs", v.len()),
            format!("{}", out.len()),
        ));
    }
    let s = validate_step(step)?;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (code_of(x, s, b) * s) as f32;
    }
    Ok(())
}

/// Fake-quantize a tensor.
pub fn quantize_tensor(v: &Tensor, step: f32, b: QuantBounds) -> Result<Tensor> {
    let mut out = vec![0.0f32; v.numel()];
    quantize_slice(v.data(), step, b, &mut out)?;
    Tensor::new(v.shape().to_vec(), out)
}

/// Integer codes of a slice.
pub fn quantize_codes(v: &[f32], step: f32, b: QuantBounds) -> Result<Vec<i64>> {
    let s = validate_step(step)?;
    Ok(v.iter().map(|&x| code_of(x, s, b) as i64).collect())
}

/// Per-tensor constant scaling the step gradient: `1 / sqrt(N * upper)`.
pub fn grad_scale(numel: usize, b: QuantBounds) -> Result<f32> {
    if numel == 0 || b.upper <= 0 {
        return Err(Error::invalid(format!(
            "gradient scale needs a non-empty tensor and positive upper bound, \
             got N={numel}, upper={}",
            b.upper
        )));
    }
    Ok((1.0 / ((numel as f64) * (b.upper as f64)).sqrt()) as f32)
}

/// Initial step for a tensor: `2 * mean(|v|) / sqrt(upper)`, falling back to
/// [`STEP_INIT_FALLBACK`] when the data is all zero.
pub fn init_step(values: &[f32], b: QuantBounds) -> Result<f32> {
    if values.is_empty() || b.upper <= 0 {
        return Err(Error::invalid(
            "step initialization needs a non-empty tensor and positive upper bound",
        ));
    }
    let mut acc = 0.0f64;
    for &v in values {
        acc += (v as f64).abs();
    }
    let mean_abs = acc / values.len() as f64;
    let s = 2.0 * mean_abs / (b.upper as f64).sqrt();
    if !s.is_finite() || s <= 0.0 {
        return Ok(STEP_INIT_FALLBACK);
    }
    Ok(s as f32)
}

/// Straight-through gradients of the fake-quantizer.
///
/// Returns the gradient with respect to the input tensor and the (scalar)
/// gradient with respect to the step. The step gradient accumulates in `f64`
/// in index order.
pub fn lsq_backward(
    v: &Tensor,
    step: f32,
    b: QuantBounds,
    grad_scale: f32,
    dy: &Tensor,
) -> Result<(Tensor, f32)> {
    if dy.shape() != v.shape() {
        return Err(Error::shape(
            "lsq_backward",
            format!("{:?}", v.shape()),
            format!("{:?}", dy.shape()),
        ));
    }
    let s = validate_step(step)?;
    let (lo, hi) = (b.lower as f64, b.upper as f64);
    let mut dx = vec![0.0f32; v.numel()];
    let mut ds_acc = 0.0f64;
    for (i, dxi) in dx.iter_mut().enumerate() {
        let z = v.data()[i] as f64 / s;
        let g = dy.data()[i] as f64;
        if z <= lo {
            ds_acc += g * lo;
        } else if z >= hi {
            ds_acc += g * hi;
        } else {
            *dxi = dy.data()[i];
            ds_acc += g * (z.round_ties_even() - z);
        }
    }
    let dstep = (ds_acc * grad_scale as f64) as f32;
    Ok((Tensor::new(v.shape().to_vec(), dx)?, dstep))
}

/// Result of one bit-width's finite-difference and invariant sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub bits: u32,
    /// Finite-difference points accepted per quantizer kind (signed weight
    /// bounds and unsigned activation bounds).
    pub points: usize,
    /// Worst relative error of the value gradient against central
    /// differences.
    pub max_rel_v: f64,
    /// Worst relative error of the step gradient against central
    /// differences.
    pub max_rel_s: f64,
    /// Human-readable descriptions of every violated check; empty means the
    /// sweep passed.
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Check the straight-through gradients and the quantizer invariants for one
/// bit-width.
///
/// Draws `points` random (value, step) pairs per bounds kind, skipping the
/// neighborhoods where the gradient convention is discontinuous (rounding
/// ties and clip boundaries), and compares [`lsq_backward`] against central
/// finite differences of the frozen-residual surrogate
/// `f(v, s) = (r0 + clip(v/s)) * s`, whose exact partials are the
/// straight-through gradients. On the same draws it asserts the code range,
/// reconstruction fidelity (`|vhat - v| <= s/2` strictly inside the clip
/// range), idempotence of re-quantization, and monotonicity.
pub fn gradcheck_bits(
    bits: u32,
    range: UnsignedRange,
    points: usize,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    use rand::{Rng, SeedableRng};

    let mut report = GradCheckReport {
        bits,
        points,
        max_rel_v: 0.0,
        max_rel_s: 0.0,
        failures: Vec::new(),
    };
    let kinds = [
        QuantBounds::signed(bits)?,
        QuantBounds::unsigned(bits, range)?,
    ];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ ((bits as u64) << 32));

    for b in kinds {
        let (lo, hi) = (b.lower as f64, b.upper as f64);
        let mut accepted = 0usize;
        while accepted < points {
            let s = 10f64.powf(rng.gen_range(-2.0..0.0));
            let z = rng.gen_range(lo - 2.0..hi + 2.0);
            // Exclusion zones: near a rounding tie or a clip boundary the
            // straight-through convention jumps, so central differences do
            // not apply there.
            if (z - z.round_ties_even()).abs() < 0.05
                || (z - lo).abs() < 0.05
                || (z - hi).abs() < 0.05
            {
                continue;
            }
            accepted += 1;
            let v = (z * s) as f32;
            let step = s as f32;
            let vt = Tensor::new(vec![1], vec![v])?;
            let dy = Tensor::new(vec![1], vec![1.0f32])?;
            let (dx, dstep) = lsq_backward(&vt, step, b, 1.0, &dy)?;

            // Frozen residual at the evaluation point.
            let zc = (v as f64 / s).clamp(lo, hi);
            let r0 = zc.round_ties_even() - zc;
            let f = |vv: f64, ss: f64| ((vv / ss).clamp(lo, hi) + r0) * ss;

            let hv = 1e-5 * s;
            let num_v = (f(v as f64 + hv, s) - f(v as f64 - hv, s)) / (2.0 * hv);
            let rel_v = (dx.data()[0] as f64 - num_v).abs() / num_v.abs().max(1.0);
            report.max_rel_v = report.max_rel_v.max(rel_v);
            if rel_v > tol {
                report.failures.push(format!(
                    "bits {bits} bounds [{lo},{hi}]: grad_v {} vs FD {num_v} at v={v}, s={s}",
                    dx.data()[0]
                ));
            }

            let hs = 1e-6 * s;
            let num_s = (f(v as f64, s + hs) - f(v as f64, s - hs)) / (2.0 * hs);
            let rel_s = (dstep as f64 - num_s).abs() / num_s.abs().max(1.0);
            report.max_rel_s = report.max_rel_s.max(rel_s);
            if rel_s > tol {
                report.failures.push(format!(
                    "bits {bits} bounds [{lo},{hi}]: grad_s {dstep} vs FD {num_s} at v={v}, s={s}"
                ));
            }

            // Invariants on the same draw.
            let code = quantize_codes(&[v], step, b)?[0];
            if !b.contains(code) {
                report
                    .failures
                    .push(format!("bits {bits}: code {code} outside [{lo},{hi}]"));
            }
            let mut vhat = [0.0f32];
            quantize_slice(&[v], step, b, &mut vhat)?;
            if zc > lo && zc < hi && (vhat[0] - v).abs() as f64 > s / 2.0 + 1e-6 {
                report.failures.push(format!(
                    "bits {bits}: |vhat - v| = {} exceeds s/2 = {} in-range",
                    (vhat[0] - v).abs(),
                    s / 2.0
                ));
            }
            let mut again = [0.0f32];
            quantize_slice(&vhat, step, b, &mut again)?;
            if again[0].to_bits() != vhat[0].to_bits() {
                report.failures.push(format!(
                    "bits {bits}: re-quantization moved {} to {}",
                    vhat[0], again[0]
                ));
            }
            let v2 = v + rng.gen_range(0.0f32..(2.0 * s) as f32);
            let mut vhat2 = [0.0f32];
            quantize_slice(&[v2], step, b, &mut vhat2)?;
            if vhat2[0] < vhat[0] {
                report.failures.push(format!(
                    "bits {bits}: quantization not monotone: q({v2}) = {} < q({v}) = {}",
                    vhat2[0], vhat[0]
                ));
            }
        }
    }
    Ok(report)
}

/// Run [`gradcheck_bits`] for every bit-width in `bits_list`.
pub fn gradcheck_suite(
    bits_list: &[u32],
    range: UnsignedRange,
    points: usize,
    tol: f64,
    seed: u64,
) -> Result<Vec<GradCheckReport>> {
    bits_list
        .iter()
        .map(|&q| gradcheck_bits(q, range, points, tol, seed))
        .collect()
}
