//! Parameter-space optimizers keyed by parameter index.
//!
//! State vectors are allocated lazily the first time a parameter receives a
//! gradient; parameters that get no gradient in a step are left untouched
//! bit-for-bit (no momentum decay without a gradient). All state is plain
//! `f32`/`u64` so checkpoints can round-trip it exactly.

use crate::error::{Error, Result};

/// SGD with classical momentum: `buf = m*buf + g; p -= lr*buf`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f32,
    pub buffers: Vec<Option<Vec<f32>>>,
}

/// Adam with bias correction and per-parameter step counts.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub slots: Vec<Option<AdamSlot>>,
}

#[derive(Debug, Clone)]
pub struct AdamSlot {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn sgd(momentum: f32) -> Self {
        Optimizer::Sgd(Sgd {
            momentum,
            buffers: Vec::new(),
        })
    }

    pub fn adam(beta1: f32, beta2: f32, eps: f32) -> Self {
        Optimizer::Adam(Adam {
            beta1,
            beta2,
            eps,
            slots: Vec::new(),
        })
    }

    /// Apply one update to parameter `idx` in place.
    pub fn step(&mut self, idx: usize, param: &mut [f32], grad: &[f32], lr: f32) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::shape(
                "Optimizer::step",
                format!("{} gradient values", param.len()),
                format!("{}", grad.len()),
            ));
        }
        match self {
            Optimizer::Sgd(s) => {
                if s.buffers.len() <= idx {
                    s.buffers.resize(idx + 1, None);
                }
                let buf = s.buffers[idx].get_or_insert_with(|| vec![0.0; param.len()]);
                if buf.len() != param.len() {
                    return Err(Error::shape(
                        "Optimizer::step",
                        format!("momentum buffer of {} values", param.len()),
                        format!("{}", buf.len()),
                    ));
                }
                for i in 0..param.len() {
                    buf[i] = s.momentum * buf[i] + grad[i];
                    param[i] -= lr * buf[i];
                }
            }
            Optimizer::Adam(a) => {
                if a.slots.len() <= idx {
                    a.slots.resize(idx + 1, None);
                }
                let slot = a.slots[idx].get_or_insert_with(|| AdamSlot {
                    m: vec![0.0; param.len()],
                    v: vec![0.0; param.len()],
                    t: 0,
                });
                if slot.m.len() != param.len() {
                    return Err(Error::shape(
                        "Optimizer::step",
                        format!("adam state of {} values", param.len()),
                        format!("{}", slot.m.len()),
                    ));
                }
                slot.t += 1;
                let bc1 = 1.0 - (a.beta1 as f64).powi(slot.t as i32);
                let bc2 = 1.0 - (a.beta2 as f64).powi(slot.t as i32);
                for i in 0..param.len() {
                    slot.m[i] = a.beta1 * slot.m[i] + (1.0 - a.beta1) * grad[i];
                    slot.v[i] = a.beta2 * slot.v[i] + (1.0 - a.beta2) * grad[i] * grad[i];
                    let m_hat = slot.m[i] as f64 / bc1;
                    let v_hat = slot.v[i] as f64 / bc2;
                    param[i] -= (lr as f64 * m_hat / (v_hat.sqrt() + a.eps as f64)) as f32;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut opt = Optimizer::sgd(0.0);
        let mut p = vec![1.0f32, -2.0];
        opt.step(0, &mut p, &[0.5, -0.5], 0.1).unwrap();
        assert_eq!(p, vec![0.95, -1.95]);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        // Same gradient twice: second step moves by lr*(1+m)*g.
        let mut opt = Optimizer::sgd(0.9);
        let mut p = vec![0.0f32];
        opt.step(0, &mut p, &[1.0], 0.1).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-7);
        opt.step(0, &mut p, &[1.0], 0.1).unwrap();
        assert!((p[0] + 0.1 + 0.1 * 1.9).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_with_zero_buffer_is_bitwise_noop() {
        let mut opt = Optimizer::sgd(0.9);
        let orig = vec![0.25f32, -0.0, 1.0e-30];
        let mut p = orig.clone();
        opt.step(0, &mut p, &[0.0, 0.0, 0.0], 0.05).unwrap();
        for (a, b) in p.iter().zip(&orig) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn params_are_keyed_independently() {
        let mut opt = Optimizer::sgd(0.9);
        let mut p0 = vec![0.0f32];
        let mut p1 = vec![0.0f32];
        opt.step(0, &mut p0, &[1.0], 0.1).unwrap();
        opt.step(1, &mut p1, &[1.0], 0.1).unwrap();
        // Momentum of p0 must not leak into p1's first step.
        assert_eq!(p0[0].to_bits(), p1[0].to_bits());
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
        let mut opt = Optimizer::adam(b1, b2, eps);
        let mut p = vec![1.0f32];
        let g = 0.3f32;
        opt.step(0, &mut p, &[g], 0.01).unwrap();
        let m = (1.0 - b1 as f64) * g as f64;
        let v = (1.0 - b2 as f64) * (g as f64) * (g as f64);
        let m_hat = m / (1.0 - b1 as f64);
        let v_hat = v / (1.0 - b2 as f64);
        let want = 1.0 - 0.01 * m_hat / (v_hat.sqrt() + eps as f64);
        assert!((p[0] as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn length_mismatch_errors() {
        let mut opt = Optimizer::sgd(0.9);
        let mut p = vec![0.0f32; 3];
        assert!(opt.step(0, &mut p, &[0.0; 2], 0.1).is_err());
        opt.step(0, &mut p, &[0.0; 3], 0.1).unwrap();
        // Buffer now sized 3; a later call with a different size must fail.
        assert!(opt.step(0, &mut p[..2].to_vec(), &[0.0; 2], 0.1).is_err());
    }
}
