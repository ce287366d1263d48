//! Per-step subnet sampling.
//!
//! The joint sandwich rule trains the two extreme configurations every step
//! — the smallest (minimum width, resolution, and bit-width) and the full
//! supernet (all maxima) — plus K configurations drawn uniformly from the
//! whole grid, so every bit-width trains against every width and resolution.
//! Two baseline modes exist: per-bit sandwiches (a full sandwich at each
//! fixed bit-width, costing |Q| times the subnet evaluations per step) and a
//! single-bit sandwich for one fixed bit-width.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::supernet::arch::{ConfigSpace, SubnetConfig};

/// Why a configuration is in the step's sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Smallest,
    Supernet,
    Random,
}

/// One sampled configuration and its role.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledConfig {
    pub config: SubnetConfig,
    pub role: Role,
}

/// How subnets are drawn each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Joint sandwich over the full width x resolution x bit-width grid.
    SandwichQ,
    /// A full sandwich at every bit-width, each step.
    PerBitSandwich,
    /// A sandwich over width x resolution at one fixed bit-width.
    SingleBit(u32),
}

/// Sandwich over width x resolution at a fixed bit-width.
fn sandwich_at_bits(
    space: &ConfigSpace,
    bits: u32,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SampledConfig>> {
    space.bits_index(bits)?;
    let smallest = SubnetConfig {
        bits,
        ..space.smallest()
    };
    let largest = SubnetConfig {
        bits,
        ..space.largest()
    };
    let pool: Vec<SubnetConfig> = space
        .configs()
        .into_iter()
        .filter(|c| c.bits == bits)
        .collect();
    let mut out = vec![
        SampledConfig {
            config: smallest,
            role: Role::Smallest,
        },
        SampledConfig {
            config: largest,
            role: Role::Supernet,
        },
    ];
    for _ in 0..k {
        let pick = pool[rng.gen_range(0..pool.len())];
        out.push(SampledConfig {
            config: pick,
            role: Role::Random,
        });
    }
    Ok(out)
}

/// The joint sandwich: both global extremes plus `k` uniform draws over the
/// full configuration grid.
pub fn sandwichq_sample(
    space: &ConfigSpace,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SampledConfig>> {
    space.validate()?;
    let pool = space.configs();
    let mut out = vec![
        SampledConfig {
            config: space.smallest(),
            role: Role::Smallest,
        },
        SampledConfig {
            config: space.largest(),
            role: Role::Supernet,
        },
    ];
    for _ in 0..k {
        let pick = pool[rng.gen_range(0..pool.len())];
        out.push(SampledConfig {
            config: pick,
            role: Role::Random,
        });
    }
    Ok(out)
}

/// Draw the step's configurations for the given mode.
pub fn sample_step_configs(
    space: &ConfigSpace,
    mode: SamplingMode,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SampledConfig>> {
    match mode {
        SamplingMode::SandwichQ => sandwichq_sample(space, k, rng),
        SamplingMode::SingleBit(bits) => sandwich_at_bits(space, bits, k, rng),
        SamplingMode::PerBitSandwich => {
            let mut out = Vec::new();
            for &bits in &space.bits {
                out.extend(sandwich_at_bits(space, bits, k, rng)?);
            }
            if out.is_empty() {
                return Err(Error::invalid("configuration space has no bit-widths"));
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn space() -> ConfigSpace {
        ConfigSpace::desk()
    }

    #[test]
    fn zero_random_slots_gives_exactly_the_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sandwichq_sample(&space(), 0, &mut rng).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].role, Role::Smallest);
        assert_eq!(s[0].config, space().smallest());
        assert_eq!(s[1].role, Role::Supernet);
        assert_eq!(s[1].config, space().largest());
    }

    #[test]
    fn default_k_gives_four_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sandwichq_sample(&space(), 2, &mut rng).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s[2..].iter().all(|c| c.role == Role::Random));
        for c in &s {
            assert!(space().contains(&c.config));
        }
    }

    #[test]
    fn sampling_is_deterministic_in_rng_state() {
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        let sa = sandwichq_sample(&space(), 5, &mut a).unwrap();
        let sb = sandwichq_sample(&space(), 5, &mut b).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn random_slots_are_uniform_over_the_grid() {
        // 10,000 steps with K=2 gives 20,000 draws over 27 cells; each cell's
        // frequency must sit within 3 binomial standard deviations of 1/27.
        let sp = space();
        let n_cells = sp.configs().len();
        assert_eq!(n_cells, 27);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = std::collections::HashMap::new();
        let draws = 20_000usize;
        for _ in 0..10_000 {
            let s = sandwichq_sample(&sp, 2, &mut rng).unwrap();
            for c in &s[2..] {
                *counts.entry(format!("{}", c.config)).or_insert(0usize) += 1;
            }
        }
        let p = 1.0 / n_cells as f64;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        for cfg in sp.configs() {
            let freq = *counts.get(&format!("{cfg}")).unwrap_or(&0) as f64 / draws as f64;
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "{cfg}: frequency {freq:.5} vs expected {p:.5} ± {:.5}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn single_bit_mode_fixes_the_bit_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_step_configs(&space(), SamplingMode::SingleBit(6), 4, &mut rng).unwrap();
        assert_eq!(s.len(), 6);
        assert!(s.iter().all(|c| c.config.bits == 6));
        assert_eq!(s[0].config.width, 0.5);
        assert_eq!(s[1].config.width, 1.0);
        let bad = sample_step_configs(&space(), SamplingMode::SingleBit(5), 4, &mut rng);
        assert!(bad.is_err());
    }

    #[test]
    fn per_bit_mode_costs_bits_times_the_joint_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = 2;
        let joint = sample_step_configs(&space(), SamplingMode::SandwichQ, k, &mut rng).unwrap();
        let per_bit =
            sample_step_configs(&space(), SamplingMode::PerBitSandwich, k, &mut rng).unwrap();
        assert_eq!(per_bit.len(), space().bits.len() * joint.len());
        for &bits in &space().bits {
            let at_bits: Vec<_> = per_bit.iter().filter(|c| c.config.bits == bits).collect();
            assert_eq!(at_bits.len(), 2 + k);
            assert_eq!(at_bits[0].role, Role::Smallest);
            assert_eq!(at_bits[1].role, Role::Supernet);
        }
    }
}
