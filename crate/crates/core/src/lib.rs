//! Switchable quantized networks with source-free domain adaptation.
//!
//! One shared set of weights serves a whole grid of deployable
//! configurations — channel width, input resolution and weight/activation
//! bit-width — so a model adapted once can be re-deployed under different
//! compute budgets without retraining. The crate provides the quantizer,
//! the elastic network, the adaptation trainer (teacher/student with
//! pseudo-labels and self-distillation), budget planning over the
//! configuration grid, and binary dataset/checkpoint containers, plus the
//! `rtfq` command-line tool.
//!
//! All computation is deterministic for a fixed seed: `f32` CPU kernels with
//! index-ordered reductions, a seeded counter-based RNG, and parallelism
//! restricted to disjoint output regions.

pub mod adapt;
pub mod budget;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod io;
pub mod numerics;
pub mod quant;
pub mod supernet;

pub use error::{Error, Result};
