//! Teacher-student adaptation of the switchable quantized network to an
//! unlabeled target domain.
//!
//! The student trains; the teacher is an exponential moving average of the
//! student and is never touched by the optimizer. Each step samples a
//! sandwich of subnet configurations, trains them jointly on labeled source
//! data, and regularizes on target data with recursive distillation
//! (teacher-to-student across configuration sizes), confidence-gated
//! pseudo-labels, and an information-maximization term.

pub mod sampling;
pub mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use sampling::{sample_step_configs, sandwichq_sample, Role, SampledConfig, SamplingMode};
pub use trainer::{ema_update, evaluate, steps_per_epoch, TrainerState};

/// Coefficients of the composite training loss, plus the pseudo-label
/// confidence threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Supervised source classification term.
    pub lambda_cls: f64,
    /// Recursive distillation term (both teacher-student pairs).
    pub lambda_rd: f64,
    /// Confidence-gated pseudo-label term.
    pub lambda_pl: f64,
    /// Information-maximization regularizer.
    pub lambda_im: f64,
    /// Minimum top-1 probability for a target sample to receive a
    /// pseudo-label.
    pub tau_pl: f64,
}

impl LossWeights {
    /// Desk-scale defaults: every term active with unit weight, gate at 0.9.
    pub fn desk_defaults() -> Self {
        LossWeights {
            lambda_cls: 1.0,
            lambda_rd: 1.0,
            lambda_pl: 1.0,
            lambda_im: 1.0,
            tau_pl: 0.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_rd", self.lambda_rd),
            ("lambda_pl", self.lambda_pl),
            ("lambda_im", self.lambda_im),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "{name} must be a non-negative finite value, got {v}"
                )));
            }
        }
        if !self.tau_pl.is_finite() || self.tau_pl <= 0.0 || self.tau_pl >= 1.0 {
            return Err(Error::invalid(format!(
                "tau_pl must lie strictly between 0 and 1, got {}",
                self.tau_pl
            )));
        }
        Ok(())
    }
}

/// Which training phase a state is in; the cosine schedule restarts per
/// phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Adapt,
}

impl Phase {
    pub fn as_u32(self) -> u32 {
        match self {
            Phase::Warmup => 0,
            Phase::Adapt => 1,
        }
    }

    pub fn from_u32(v: u32) -> Result<Self> {
        match v {
            0 => Ok(Phase::Warmup),
            1 => Ok(Phase::Adapt),
            other => Err(Error::invalid(format!("unknown phase tag {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Adapt => "adapt",
        }
    }
}

/// Per-step training metrics, one JSON line each in the metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepMetrics {
    pub phase: String,
    /// Steps completed across all phases.
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub l_cls: f64,
    pub l_rd: f64,
    pub l_pl: f64,
    pub l_im: f64,
    pub l_total: f64,
    /// Target samples whose confidence cleared the pseudo-label gate.
    pub pl_confident: u64,
    /// Wall-clock duration; absent in strict (bit-reproducible) mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_weights_are_valid() {
        LossWeights::desk_defaults().validate().unwrap();
    }

    #[test]
    fn invalid_weights_are_rejected() {
        let mut w = LossWeights::desk_defaults();
        w.lambda_rd = -0.5;
        assert!(w.validate().is_err());
        let mut w = LossWeights::desk_defaults();
        w.tau_pl = 1.0;
        assert!(w.validate().is_err());
        let mut w = LossWeights::desk_defaults();
        w.tau_pl = 0.0;
        assert!(w.validate().is_err());
    }

    #[test]
    fn phase_round_trips_through_tags() {
        for p in [Phase::Warmup, Phase::Adapt] {
            assert_eq!(Phase::from_u32(p.as_u32()).unwrap(), p);
        }
        assert!(Phase::from_u32(9).is_err());
    }

    #[test]
    fn metrics_serialize_without_wall_clock_when_absent() {
        let m = StepMetrics {
            phase: "adapt".into(),
            step: 3,
            epoch: 1,
            lr: 0.01,
            l_cls: 1.0,
            l_rd: 0.5,
            l_pl: 0.25,
            l_im: -0.1,
            l_total: 1.65,
            pl_confident: 7,
            wall_ms: None,
        };
        let line = serde_json::to_string(&m).unwrap();
        assert!(!line.contains("wall_ms"));
        let back: StepMetrics = serde_json::from_str(&line).unwrap();
        assert_eq!(back, m);
    }
}
